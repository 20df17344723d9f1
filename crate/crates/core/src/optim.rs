//! Adam with coupled L2 weight decay, and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params`. The gradient seen by the moments is `g + wd·θ`.
    /// Parameters whose gradient is `None` are left untouched.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam", &[params.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("adam state", &[self.m.len()], &[params.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adam", p.shape(), g.shape()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] + self.weight_decay * *theta;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                *theta -= (self.lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }

    pub fn update_store(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        self.update(store.values_mut(), grads)
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f32, lr_min: f32) -> Result<f32> {
    if total == 0 {
        return Err(Error::InvalidArg("cosine schedule needs T >= 1".into()));
    }
    if t > total {
        return Err(Error::InvalidArg(format!("step {t} beyond schedule length {total}")));
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok((lr_min as f64 + 0.5 * (lr_max - lr_min) as f64 * (1.0 + c)) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f32) -> Tensor {
        Tensor::scalar(x)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut adam = AdamState::new(0.1, 0.0);
        let mut p = vec![one(1.0), Tensor::full(&[3], -2.0)];
        let before = p.clone();
        adam.update(&mut p, &[Some(one(0.0)), Some(Tensor::zeros(&[3]))])
            .unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn single_step_matches_hand_oracle() {
        // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1 -> update = lr / (1 + eps)
        let mut adam = AdamState::new(0.1, 0.0);
        let mut p = vec![one(1.0)];
        adam.update(&mut p, &[Some(one(1.0))]).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].item() as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn decay_path_single_step() {
        // g' = 1e-4·θ = 1e-4; m̂ = 1e-4, v̂ = 1e-8 -> update = lr·1e-4 / (1e-4 + eps)
        let mut adam = AdamState::new(0.1, 1e-4);
        let mut p = vec![one(1.0)];
        adam.update(&mut p, &[Some(one(0.0))]).unwrap();
        let g = 1e-4f64;
        let expected = 1.0 - 0.1 * g / ((g * g).sqrt() + 1e-8);
        assert!((p[0].item() as f64 - expected).abs() < 1e-6, "{}", p[0].item());
        assert!(p[0].item() < 1.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut adam = AdamState::new(0.1, 0.0);
        let mut p = vec![Tensor::zeros(&[2])];
        assert!(matches!(
            adam.update(&mut p, &[Some(Tensor::zeros(&[3]))]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn step_counter_increments() {
        let mut adam = AdamState::new(0.01, 0.0);
        let mut p = vec![one(0.5)];
        for k in 1..=5 {
            adam.update(&mut p, &[Some(one(0.3))]).unwrap();
            assert_eq!(adam.step, k);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 0.0).unwrap(), 1e-3);
        assert!(cosine_lr(10, 10, 1e-3, 1e-5).unwrap() - 1e-5 < 1e-12);
        let mid = cosine_lr(5, 10, 1e-3, 1e-5).unwrap();
        assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-9);
        assert!(cosine_lr(11, 10, 1e-3, 0.0).is_err());
        assert!(cosine_lr(0, 0, 1e-3, 0.0).is_err());
    }
}

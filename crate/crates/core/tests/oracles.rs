mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsmg_core::augment::Pca;
use rsmg_core::optim::{cosine_lr, AdamState};
use rsmg_core::Tensor;

use common::{power_iteration_pca, subspace_distance};

/// A `[C,H,W]` cube whose channels mix independent sources with well separated variances.
fn anisotropic_cube(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let mix: Vec<Vec<f32>> = (0..c)
        .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let sources: Vec<Vec<f32>> = (0..c)
        .map(|s| {
            let scale = 4.0f32 * 0.5f32.powi(s as i32);
            (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()
        })
        .collect();
    let mut data = vec![0.0f32; c * n];
    for ch in 0..c {
        for p in 0..n {
            data[ch * n + p] = (0..c).map(|s| mix[ch][s] * sources[s][p]).sum::<f32>() + 0.3 * ch as f32;
        }
    }
    Tensor::new(&[c, h, w], data).unwrap()
}

#[test]
fn pca_subspace_matches_power_iteration() {
    for seed in 0..4 {
        let x = anisotropic_cube(10, 16, 12, seed);
        for k in [1, 3, 5] {
            let pca = Pca::fit(&x, k).unwrap();
            let oracle = power_iteration_pca(&x, k);
            let d = subspace_distance(&oracle, &pca.components);
            assert!(d <= 1e-3, "seed {seed} k {k}: subspace distance {d:.2e}");
        }
    }
}

#[test]
fn adam_tracks_f64_reference_over_many_steps() {
    let (lr, wd, b1, b2, eps) = (0.01f64, 1e-4f64, 0.9f64, 0.999f64, 1e-8f64);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let init: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut params = vec![Tensor::new(&[6], init.clone()).unwrap()];
    let mut adam = AdamState::new(lr as f32, wd as f32);
    let mut theta: Vec<f64> = init.iter().map(|&v| v as f64).collect();
    let (mut m, mut v) = (vec![0.0f64; 6], vec![0.0f64; 6]);
    for t in 1..=50 {
        let g: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        adam.update(&mut params, &[Some(Tensor::new(&[6], g.clone()).unwrap())])
            .unwrap();
        for i in 0..6 {
            let gi = g[i] as f64 + wd * theta[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / (1.0 - b1.powi(t));
            let vhat = v[i] / (1.0 - b2.powi(t));
            theta[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    for (a, b) in params[0].data().iter().zip(&theta) {
        assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
    }
}

#[test]
fn cosine_schedule_matches_closed_form_everywhere() {
    let total = 37;
    for t in 0..=total {
        let want = 1e-5 + 0.5 * (1e-3 - 1e-5) * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos());
        let got = cosine_lr(t, total, 1e-3, 1e-5).unwrap() as f64;
        assert!((got - want).abs() <= 1e-9, "t {t}: {got} vs {want}");
    }
    let lrs: Vec<f32> = (0..=total).map(|t| cosine_lr(t, total, 1e-3, 1e-5).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(cosine_lr(total + 1, total, 1e-3, 1e-5).is_err());
}

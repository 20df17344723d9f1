//! Central finite-difference gradient checking.
//!
//! The error reported is norm-wise over every checked coordinate:
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-6)`. Coordinates near
//! kinks (relu, max) contribute small local errors that a per-element ratio
//! would blow up.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f32,
    /// Upper bound on checked coordinates per input; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            max_coords: Some(64),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_error: f64,
    pub checked: usize,
    pub analytic_norm: f64,
}

/// Compare the tape's gradients of `f` against central differences for every input.
///
/// `f` must build a scalar loss from the given handles and must be a pure
/// function of the input values.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item() as f64)
    };
    compare(inputs, &analytic, cfg, eval)
}

/// Like [`check_gradients`] but also perturbs every parameter of `store`.
/// `f` receives a session bound to the (possibly perturbed) parameters and the
/// input handles.
pub fn check_model_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(store, true);
        let vars: Vec<Var> = inputs.iter().map(|t| s.variable(t.clone())).collect();
        let loss = f(&mut s, &vars)?;
        s.backward(loss)?;
        let mut grads: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| s.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        for (g, p) in s.param_grads().into_iter().zip(store.values()) {
            grads.push(g.unwrap_or_else(|| Tensor::zeros(p.shape())));
        }
        grads
    };
    let mut all: Vec<Tensor> = inputs.to_vec();
    all.extend(store.values().iter().cloned());
    let n_in = inputs.len();
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut perturbed = store.clone();
        perturbed.values_mut().clone_from_slice(&values[n_in..]);
        let mut s = Session::new(&perturbed, false);
        let vs: Vec<Var> = values[..n_in].iter().map(|x| s.constant(x.clone())).collect();
        let l = f(&mut s, &vs)?;
        Ok(s.value(l).item() as f64)
    };
    compare(&all, &analytic, cfg, eval)
}

fn compare(
    inputs: &[Tensor],
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
    eval: impl Fn(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    let mut checked = 0;
    for k in 0..inputs.len() {
        let n = inputs[k].numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + cfg.step;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - cfg.step;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step as f64);
            let a = analytic[k].data()[idx] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            checked += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-6);
    Ok(GradCheckReport {
        rel_error: diff2.sqrt() / denom,
        checked,
        analytic_norm: a2.sqrt(),
    })
}

/// Reduce an arbitrary output to a scalar with fixed pseudo-random weights so every
/// output coordinate influences the checked loss.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(tape.shape(y), -1.0, 1.0, &mut rng);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

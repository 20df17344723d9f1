//! Quick built-in checks run by the `selftest` CLI command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::contrastive_loss;
use crate::autodiff::{PadMode, Tape};
use crate::error::Result;
use crate::gradcheck::{check_gradients, weighted_sum, GradCheckConfig};
use crate::pipeline::{Confusion, ExactMetrics};
use crate::tensor::Tensor;
use crate::wavelet::{dwt2, idwt2};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn wavelet_round_trip() -> Result<(bool, String)> {
    let x = Tensor::randn(&[4, 8, 16, 16], &mut ChaCha8Rng::seed_from_u64(1));
    let y = idwt2(&dwt2(&x)?)?;
    let err = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    Ok((err <= 1e-5, format!("max abs error {err:.2e}")))
}

fn gradients() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
    let report = check_gradients(&[x, w], &GradCheckConfig::default(), |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, PadMode::Zero, 1)?;
        let y = t.gelu(y)?;
        let s = t.haar_analysis(y)?;
        let n = t.reshape(s, &[2, 16 * 9])?;
        let p = t.softmax(n)?;
        weighted_sum(t, p, 3)
    })?;
    Ok((
        report.rel_error <= 1e-2,
        format!("conv/gelu/haar/softmax rel error {:.2e}", report.rel_error),
    ))
}

fn metrics() -> Result<(bool, String)> {
    let m = ExactMetrics::from_confusion(&Confusion {
        k: 2,
        counts: vec![2, 1, 1, 2],
    })?;
    let ok = m.oa == (2, 3).into() && m.aa == (2, 3).into() && m.kappa == (1, 3).into();
    Ok((ok, format!("OA {} AA {} kappa {}", m.oa, m.aa, m.kappa)))
}

fn contrastive_uniform() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for n in [2usize, 4, 8] {
        let mut t = Tape::new();
        let e = t.constant(Tensor::from_fn(&[n, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let scale = t.constant(Tensor::scalar(10.0));
        let classes: Vec<usize> = (0..n).collect();
        let l = contrastive_loss(&mut t, e, e, &classes, scale)?;
        worst = worst.max((t.value(l).data()[0] as f64 - (n as f64).ln()).abs());
    }
    Ok((worst <= 1e-6, format!("max |loss - ln N| {worst:.2e}")))
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("wavelet round trip", wavelet_round_trip()),
        check("gradients", gradients()),
        check("metrics", metrics()),
        check("contrastive uniform", contrastive_uniform()),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_pass() {
        for r in super::run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}

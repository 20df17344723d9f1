//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsmg_core::params::ParamStore;
use rsmg_core::Tensor;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Overwrite every parameter with uniform noise in `[-scale, scale]` so no
/// zero-initialized path hides a gradient.
pub fn randomize_params(store: &mut ParamStore, seed: u64, scale: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.values_mut() {
        *t = Tensor::uniform(t.shape(), -scale, scale, &mut rng);
    }
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// A reduced fraction with positive denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Frac(pub i128, pub i128);

impl Frac {
    pub fn new(n: i128, d: i128) -> Frac {
        assert!(d != 0);
        let g = gcd(n, d).max(1);
        let s = if d < 0 { -1 } else { 1 };
        Frac(s * n / g, s * d / g)
    }

    pub fn add(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }

    pub fn f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// OA, AA (over classes present in the truth) and Cohen's kappa by direct counting.
pub fn brute_force_metrics(k: usize, truth: &[usize], pred: &[usize]) -> (Frac, Frac, Frac) {
    let n = truth.len() as i128;
    let mut correct = 0i128;
    let mut per_class = Frac(0, 1);
    let mut present = 0i128;
    let mut chance = 0i128;
    for c in 0..k {
        let support = truth.iter().filter(|&&t| t == c).count() as i128;
        let hits = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as i128;
        let predicted = pred.iter().filter(|&&p| p == c).count() as i128;
        correct += hits;
        chance += support * predicted;
        if support > 0 {
            present += 1;
            per_class = per_class.add(Frac::new(hits, support));
        }
    }
    let oa = Frac::new(correct, n);
    let aa = Frac::new(per_class.0, per_class.1 * present);
    let kappa = if n * n == chance {
        Frac(1, 1)
    } else {
        Frac::new(n * correct - chance, n * n - chance)
    };
    (oa, aa, kappa)
}

/// Leading `k` covariance eigenvectors of a `[C,H,W]` cube by power iteration
/// with deflation, in f64.
pub fn power_iteration_pca(x: &Tensor, k: usize) -> Vec<Vec<f64>> {
    let [c, h, w] = x.shape()[..] else {
        panic!("[C,H,W] expected")
    };
    let n = h * w;
    let d = x.data();
    let mean: Vec<f64> = (0..c)
        .map(|ch| d[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![vec![0.0f64; c]; c];
    for p in 0..n {
        for i in 0..c {
            let a = d[i * n + p] as f64 - mean[i];
            for j in 0..c {
                cov[i][j] += a * (d[j * n + p] as f64 - mean[j]) / n as f64;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out: Vec<Vec<f64>> = Vec::new();
    for _ in 0..k {
        let mut v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut lambda = 0.0;
        for _ in 0..20_000 {
            let mut nv: Vec<f64> = (0..c).map(|i| (0..c).map(|j| cov[i][j] * v[j]).sum()).collect();
            for u in &out {
                let dot: f64 = nv.iter().zip(u).map(|(a, b)| a * b).sum();
                nv.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = nv.iter().map(|a| a * a).sum::<f64>().sqrt();
            nv.iter_mut().for_each(|a| *a /= norm);
            let delta: f64 = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = nv;
            if (norm - lambda).abs() < 1e-15 * norm.max(1.0) && delta < 1e-13 {
                break;
            }
            lambda = norm;
        }
        out.push(v);
    }
    out
}

/// Frobenius norm of the part of `b` outside span(`a`); an upper bound on the
/// sine of the largest principal angle between two orthonormal bases.
pub fn subspace_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for v in b {
        let mut r = v.clone();
        for u in a {
            let dot: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            r.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
        }
        total += r.iter().map(|x| x * x).sum::<f64>();
    }
    total.sqrt()
}

/// Symmetric multi-positive InfoNCE computed directly in f64.
pub fn contrastive_oracle(logits: &[Vec<f64>], classes: &[usize]) -> f64 {
    let n = logits.len();
    let side = |get: &dyn Fn(usize, usize) -> f64| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let m = (0..n).map(|j| get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..n).map(|j| (get(i, j) - m).exp()).sum::<f64>().ln();
            let pos: Vec<usize> = (0..n).filter(|&j| classes[j] == classes[i]).collect();
            total += pos.iter().map(|&j| lse - get(i, j)).sum::<f64>() / pos.len() as f64;
        }
        total / n as f64
    };
    0.5 * (side(&|i, j| logits[i][j]) + side(&|i, j| logits[j][i]))
}

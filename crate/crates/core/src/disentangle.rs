//! Cross-modal wavelet disentanglement.
//!
//! Each modality is split into Haar subbands. The LL band is perturbed with
//! batch-statistics Gaussian noise, the three detail bands are summarized by a
//! histogram-equalized gradient magnitude, and each modality's subbands are
//! convolved and then gated by spatial attention computed from the other
//! modality. The inverse transform reassembles both feature maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Init};
use crate::params::Session;
use crate::tensor::Tensor;
use crate::wavelet::{dwt2_var, idwt2_var, SubbandSet};

pub const HE_BINS: usize = 256;
const FLAT_RANGE: f32 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ResampleConfig {
    /// Variance of the per-sample shift strength `rho`.
    pub alpha: f32,
    pub seed: u64,
}

impl ResampleConfig {
    pub fn new(alpha: f32, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArg(format!("alpha must lie in [0,1], got {alpha}")));
        }
        Ok(ResampleConfig { alpha, seed })
    }

    /// One `rho ~ N(0, alpha)` per sample; all zeros when `alpha` is zero.
    pub fn draw_rhos(&self, n: usize) -> Vec<f32> {
        if self.alpha == 0.0 {
            return vec![0.0; n];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let sd = self.alpha.sqrt();
        (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect()
    }
}

/// `ll + rho_n * sigma`, where `sigma` is the standard deviation across the batch
/// at every (channel, row, col) and `rho_n` scales sample `n`. The variance is
/// taken after subtracting the first sample, so identical samples give an exact
/// zero.
pub fn resample_ll_var(tape: &mut Tape, ll: Var, rhos: &[f32]) -> Result<Var> {
    let shape = tape.shape(ll).to_vec();
    if shape.len() != 4 || shape[0] != rhos.len() {
        return Err(Error::shape("resample_ll", &shape, &[rhos.len()]));
    }
    if rhos.iter().all(|&r| r == 0.0) {
        return Ok(ll);
    }
    let first = tape.narrow(ll, 0, 0, 1)?;
    let shifted = tape.sub(ll, first)?;
    let mean = tape.mean_axis(shifted, 0)?;
    let centered = tape.sub(shifted, mean)?;
    let sq = tape.square(centered)?;
    let var = tape.mean_axis(sq, 0)?;
    let sigma = tape.sqrt(var)?;
    let per = shape[1..].iter().product::<usize>();
    let rho_full = Tensor::from_fn(&shape, |i| rhos[i / per]);
    let rho_full = tape.constant(rho_full);
    let shift = tape.mul(rho_full, sigma)?;
    tape.add(ll, shift)
}

pub fn resample_ll(ll: &Tensor, cfg: &ResampleConfig) -> Result<Tensor> {
    if ll.rank() != 4 {
        return Err(Error::InvalidArg(format!(
            "resample_ll expects [N,C,h,w], got {:?}",
            ll.shape()
        )));
    }
    let rhos = cfg.draw_rhos(ll.shape()[0]);
    let mut tape = Tape::new();
    let v = tape.constant(ll.clone());
    let out = resample_ll_var(&mut tape, v, &rhos)?;
    Ok(tape.value(out).clone())
}

/// Histogram equalization of one plane: 256 uniform bins over `[min, max]`,
/// each value mapped to the cumulative fraction of its bin. Planes whose range
/// is below `1e-12` are returned unchanged.
pub fn histogram_equalize(plane: &[f32]) -> Vec<f32> {
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    if plane.is_empty() || span.is_nan() || span < FLAT_RANGE {
        return plane.to_vec();
    }
    let range = (hi - lo) as f64;
    let bin = |v: f32| (((v - lo) as f64 / range * HE_BINS as f64) as usize).min(HE_BINS - 1);
    let mut hist = [0usize; HE_BINS];
    for &v in plane {
        hist[bin(v)] += 1;
    }
    let mut cdf = [0.0f32; HE_BINS];
    let mut acc = 0usize;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = (acc as f64 / plane.len() as f64) as f32;
    }
    plane.iter().map(|&v| cdf[bin(v)]).collect()
}

/// `HE(sqrt(hl² + lh² + hh²))`, equalized per (sample, channel) plane.
pub fn gradient_map(hl: &Tensor, lh: &Tensor, hh: &Tensor) -> Result<Tensor> {
    if hl.shape() != lh.shape() || hl.shape() != hh.shape() {
        return Err(Error::shape("gradient_map", hl.shape(), lh.shape()));
    }
    if hl.rank() != 4 {
        return Err(Error::InvalidArg(format!(
            "gradient_map expects [N,C,h,w], got {:?}",
            hl.shape()
        )));
    }
    let mag: Vec<f32> = hl
        .data()
        .iter()
        .zip(lh.data())
        .zip(hh.data())
        .map(|((a, b), c)| (a * a + b * b + c * c).sqrt())
        .collect();
    let plane = hl.shape()[2] * hl.shape()[3];
    let out: Vec<f32> = mag.chunks(plane).flat_map(histogram_equalize).collect();
    Tensor::new(hl.shape(), out)
}

/// `sigmoid(conv7x7([channel-mean; channel-max]))` with reflect padding.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    /// Zero-initialized kernel: the map starts at a uniform 0.5.
    pub fn new(init: &mut Init<'_>, name: &str) -> Self {
        SpatialAttention {
            conv: init.conv_zero(name, 2, 1, 7, 1).with_mode(PadMode::Reflect),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, f: Var) -> Result<Var> {
        let mean = s.mean_axis(f, 1)?;
        let max = s.max_axis(f, 1)?;
        let stacked = s.concat(&[mean, max], 1)?;
        let logits = self.conv.forward(s, stacked)?;
        s.sigmoid(logits)
    }
}

/// `attn ⊗ conv(f_own)` with the `[N,1,h,w]` map broadcast over channels.
pub fn cross_modal_weight(s: &mut Session<'_>, f_own: Var, attn_other: Var, conv: &Conv) -> Result<Var> {
    let (fs, as_) = (s.shape(f_own).to_vec(), s.shape(attn_other).to_vec());
    if fs.len() != 4 || as_.len() != 4 || fs[0] != as_[0] || fs[2..] != as_[2..] || as_[1] != 1 {
        return Err(Error::shape("cross_modal_weight", &fs, &as_));
    }
    let y = conv.forward(s, f_own)?;
    s.mul(y, attn_other)
}

/// Parameters applied to one modality.
#[derive(Clone, Debug)]
pub struct Branch {
    /// One convolution per subband in LL, HL, LH, HH order.
    pub convs: [Conv; 4],
    /// Attention computed from this modality's resampled LL band.
    pub attn_ll: SpatialAttention,
    /// Attention computed from this modality's gradient map.
    pub attn_hf: SpatialAttention,
}

impl Branch {
    /// Subband convolutions start as exact identities (centered Dirac kernels).
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, k: usize) -> Self {
        init.scope(name, |i| {
            let convs = ["ll", "hl", "lh", "hh"].map(|b| i.conv_with(b, dirac(channels, k), 1));
            Branch {
                convs,
                attn_ll: SpatialAttention::new(i, "attn_ll"),
                attn_hf: SpatialAttention::new(i, "attn_hf"),
            }
        })
    }
}

fn dirac(c: usize, k: usize) -> Tensor {
    let mut w = Tensor::zeros(&[c, c, k, k]);
    for ch in 0..c {
        w.set(&[ch, ch, k / 2, k / 2], 1.0);
    }
    w
}

#[derive(Clone, Debug)]
pub struct Mwdis {
    pub m1: Branch,
    pub m2: Branch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MwdisConfig {
    pub resample: ResampleConfig,
    /// Replace every attention map by this constant.
    pub attn_bypass: Option<f32>,
}

impl Mwdis {
    pub fn new(init: &mut Init<'_>, name: &str, c1: usize, c2: usize) -> Self {
        init.scope(name, |i| Mwdis {
            m1: Branch::new(i, "m1", c1, 3),
            m2: Branch::new(i, "m2", c2, 3),
        })
    }

    /// Both modalities use the same parameters; requires equal channel counts.
    pub fn new_shared(init: &mut Init<'_>, name: &str, c: usize, k: usize) -> Self {
        let b = init.scope(name, |i| Branch::new(i, "shared", c, k));
        Mwdis { m1: b.clone(), m2: b }
    }

    pub fn forward(&self, s: &mut Session<'_>, x1: Var, x2: Var, cfg: &MwdisConfig) -> Result<(Var, Var)> {
        let (n1, n2) = (s.shape(x1)[0], s.shape(x2)[0]);
        if s.shape(x1).len() != 4 || s.shape(x2).len() != 4 || n1 != n2 || s.shape(x1)[2..] != s.shape(x2)[2..] {
            return Err(Error::shape("mwdis", s.shape(x1), s.shape(x2)));
        }
        let rhos = cfg.resample.draw_rhos(n1);
        let b1 = dwt2_var(s, x1)?;
        let b2 = dwt2_var(s, x2)?;
        let (ll_attn1, hf_attn1) = self.attention_sources(s, &self.m1, &b1, &rhos, cfg)?;
        let (ll_attn2, hf_attn2) = self.attention_sources(s, &self.m2, &b2, &rhos, cfg)?;
        let y1 = reassemble(s, &self.m1, &b1, ll_attn2, hf_attn2)?;
        let y2 = reassemble(s, &self.m2, &b2, ll_attn1, hf_attn1)?;
        Ok((y1, y2))
    }

    fn attention_sources(
        &self,
        s: &mut Session<'_>,
        branch: &Branch,
        bands: &SubbandSet<Var>,
        rhos: &[f32],
        cfg: &MwdisConfig,
    ) -> Result<(Var, Var)> {
        if let Some(c) = cfg.attn_bypass {
            let mut shape = s.shape(bands.ll).to_vec();
            shape[1] = 1;
            let a = s.constant(Tensor::full(&shape, c));
            return Ok((a, a));
        }
        let ll_hat = resample_ll_var(s, bands.ll, rhos)?;
        let attn_ll = branch.attn_ll.forward(s, ll_hat)?;
        let g = gradient_map(s.value(bands.hl), s.value(bands.lh), s.value(bands.hh))?;
        let g = s.constant(g);
        let attn_hf = branch.attn_hf.forward(s, g)?;
        Ok((attn_ll, attn_hf))
    }
}

fn reassemble(
    s: &mut Session<'_>,
    branch: &Branch,
    bands: &SubbandSet<Var>,
    attn_ll: Var,
    attn_hf: Var,
) -> Result<Var> {
    let [c_ll, c_hl, c_lh, c_hh] = &branch.convs;
    let out = SubbandSet {
        ll: cross_modal_weight(s, bands.ll, attn_ll, c_ll)?,
        hl: cross_modal_weight(s, bands.hl, attn_hf, c_hl)?,
        lh: cross_modal_weight(s, bands.lh, attn_hf, c_lh)?,
        hh: cross_modal_weight(s, bands.hh, attn_hf, c_hh)?,
    };
    idwt2_var(s, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn rand4(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn alpha_zero_is_bit_identity() {
        let x = rand4(&[3, 2, 4, 4], 1).map(|v| if v < -0.9 { -0.0 } else { v });
        let out = resample_ll(&x, &ResampleConfig::new(0.0, 5).unwrap()).unwrap();
        assert!(out.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn identical_batch_is_invariant() {
        let one = rand4(&[1, 2, 3, 3], 2);
        for n in 2..=7 {
            let data = one.data().repeat(n);
            let x = Tensor::new(&[n, 2, 3, 3], data).unwrap();
            for alpha in [0.3, 1.0] {
                let out = resample_ll(&x, &ResampleConfig::new(alpha, 9).unwrap()).unwrap();
                assert_eq!(out, x);
            }
        }
    }

    #[test]
    fn resample_matches_recorded_draws() {
        let x = rand4(&[2, 1, 2, 2], 3);
        let cfg = ResampleConfig::new(0.5, 17).unwrap();
        let rhos = cfg.draw_rhos(2);
        let out = resample_ll(&x, &cfg).unwrap();
        for i in 0..4 {
            let (a, b) = (x.data()[i] as f64, x.data()[4 + i] as f64);
            let mu = (a + b) / 2.0;
            let sigma = (((a - mu).powi(2) + (b - mu).powi(2)) / 2.0).sqrt();
            assert!((out.data()[i] as f64 - (a + rhos[0] as f64 * sigma)).abs() < 1e-6);
            assert!((out.data()[4 + i] as f64 - (b + rhos[1] as f64 * sigma)).abs() < 1e-6);
        }
        assert!(ResampleConfig::new(1.5, 0).is_err());
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(histogram_equalize(&[2.0; 5]), vec![2.0; 5]);
        assert_eq!(histogram_equalize(&[1.0, 2.0, 3.0, 4.0]), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(histogram_equalize(&[0.0, 1.0, 0.0, 1.0]), vec![0.5, 1.0, 0.5, 1.0]);
        let ramp: Vec<f32> = (0..256).map(|i| i as f32 * 0.37).collect();
        let out = histogram_equalize(&ramp);
        assert!(out.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*out.last().unwrap(), 1.0);
    }

    #[test]
    fn gradient_map_examples() {
        let s = [1, 1, 2, 2];
        let g = gradient_map(&Tensor::full(&s, 3.0), &Tensor::full(&s, 4.0), &Tensor::zeros(&s)).unwrap();
        assert_eq!(g, Tensor::full(&s, 5.0));
        let z = gradient_map(&Tensor::zeros(&s), &Tensor::zeros(&s), &Tensor::zeros(&s)).unwrap();
        assert_eq!(z, Tensor::zeros(&s));
        assert!(gradient_map(&Tensor::zeros(&s), &Tensor::zeros(&[1, 1, 2, 1]), &Tensor::zeros(&s)).is_err());
    }

    fn store_with<T>(f: impl FnOnce(&mut Init<'_>) -> T) -> (ParamStore, T) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = f(&mut Init::new(&mut store, &mut rng));
        (store, t)
    }

    #[test]
    fn zero_attention_kernel_gives_half() {
        let (store, sa) = store_with(|i| SpatialAttention::new(i, "sa"));
        let mut s = Session::new(&store, false);
        let f = s.constant(rand4(&[2, 3, 4, 4], 4));
        let a = sa.forward(&mut s, f).unwrap();
        assert_eq!(s.shape(a), &[2, 1, 4, 4]);
        assert!(s.value(a).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn attention_on_single_pixel_matches_dot_product() {
        let (mut store, sa) = store_with(|i| SpatialAttention::new(i, "sa"));
        let w = rand4(&[1, 2, 7, 7], 5);
        *store.get_mut(sa.conv.w) = w.clone();
        *store.get_mut(sa.conv.b) = Tensor::new(&[1], vec![0.3]).unwrap();
        let x = Tensor::new(&[1, 3, 1, 1], vec![0.2, -0.5, 0.9]).unwrap();
        let mut s = Session::new(&store, false);
        let f = s.constant(x);
        let a = sa.forward(&mut s, f).unwrap();
        let (mean, max) = ((0.2f64 - 0.5 + 0.9) / 3.0, 0.9f64);
        let sum0: f64 = w.data()[..49].iter().map(|&v| v as f64).sum();
        let sum1: f64 = w.data()[49..].iter().map(|&v| v as f64).sum();
        let z = 0.3 + mean * sum0 + max * sum1;
        let expect = 1.0 / (1.0 + (-z).exp());
        assert!((s.value(a).item() as f64 - expect).abs() < 1e-6);
        let mut s2 = Session::new(&store, false);
        let r = s2.constant(rand4(&[2, 3, 5, 5], 6));
        let a2 = sa.forward(&mut s2, r).unwrap();
        assert!(s2.value(a2).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn cross_modal_weight_examples() {
        let (store, conv) = store_with(|i| i.conv_with("c", dirac(3, 1), 1));
        let x = rand4(&[2, 3, 4, 4], 7);
        let mut s = Session::new(&store, false);
        let f = s.constant(x.clone());
        let one = s.constant(Tensor::ones(&[2, 1, 4, 4]));
        let y = cross_modal_weight(&mut s, f, one, &conv).unwrap();
        assert_eq!(s.value(y), &x);
        let half = s.constant(Tensor::full(&[2, 1, 4, 4], 0.5));
        let y = cross_modal_weight(&mut s, f, half, &conv).unwrap();
        assert!(s.value(y).max_abs_diff(&x.map(|v| 0.5 * v)) == 0.0);
        let bad = s.constant(Tensor::ones(&[2, 1, 3, 4]));
        assert!(matches!(
            cross_modal_weight(&mut s, f, bad, &conv),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn bypass_cfg(alpha: f32) -> MwdisConfig {
        MwdisConfig {
            resample: ResampleConfig::new(alpha, 1).unwrap(),
            attn_bypass: Some(1.0),
        }
    }

    #[test]
    fn identity_configuration_round_trips() {
        let (store, m) = store_with(|i| Mwdis::new(i, "mw", 3, 1));
        let x1 = rand4(&[2, 3, 6, 4], 8);
        let x2 = rand4(&[2, 1, 6, 4], 9);
        let mut s = Session::new(&store, false);
        let (a, b) = (s.constant(x1.clone()), s.constant(x2.clone()));
        let (y1, y2) = m.forward(&mut s, a, b, &bypass_cfg(0.0)).unwrap();
        assert!(s.value(y1).max_abs_diff(&x1) <= 1e-5);
        assert!(s.value(y2).max_abs_diff(&x2) <= 1e-5);
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let (store, m) = store_with(|i| Mwdis::new(i, "mw", 2, 2));
        let cfg = MwdisConfig {
            resample: ResampleConfig::new(0.5, 3).unwrap(),
            attn_bypass: None,
        };
        let run = || {
            let mut s = Session::new(&store, false);
            let a = s.constant(rand4(&[3, 2, 4, 4], 10));
            let b = s.constant(rand4(&[3, 2, 4, 4], 11));
            let (y1, y2) = m.forward(&mut s, a, b, &cfg).unwrap();
            (s.value(y1).clone(), s.value(y2).clone())
        };
        let (a, b) = run();
        assert_eq!(a.shape(), &[3, 2, 4, 4]);
        assert_eq!((a.clone(), b.clone()), run());
    }

    #[test]
    fn odd_extent_is_rejected() {
        let (store, m) = store_with(|i| Mwdis::new(i, "mw", 1, 1));
        let mut s = Session::new(&store, false);
        let a = s.constant(Tensor::zeros(&[1, 1, 5, 4]));
        let r = m.forward(&mut s, a, a, &bypass_cfg(0.0));
        assert!(matches!(r, Err(Error::OddExtent { .. })));
    }
}

//! Input preprocessing and patch augmentation: per-modality PCA, stacking with
//! externally reconstructed channels, patch cropping, and flip/radiometric jitter.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fileio::{put_f32s, put_u32, read_bytes, write_bytes, ByteReader};
use crate::scene::SceneCube;
use crate::tensor::{reflect_index, Tensor};

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric `n×n` matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors as rows.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(a.len(), n * n);
    let mut a = a.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_TOL.max(frob * 1e-15);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&j| (0..n).map(|k| v[k * n + j]).collect()).collect();
    (values, vectors)
}

/// Principal axes of a `[C,H,W]` cube, pixels as samples and channels as features.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// All `C` covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// The retained `k_eff` unit components, one row per component.
    pub components: Vec<Vec<f64>>,
    /// Set when some channel has zero variance.
    pub degenerate: bool,
}

impl Pca {
    pub fn fit(x: &Tensor, k: usize) -> Result<Pca> {
        let [c, h, w] = x.shape()[..] else {
            return Err(Error::InvalidArg(format!("pca expects [C,H,W], got {:?}", x.shape())));
        };
        if k == 0 {
            return Err(Error::InvalidArg("pca needs k >= 1".into()));
        }
        let n = h * w;
        let d = x.data();
        let mean: Vec<f64> = (0..c)
            .map(|ch| d[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64)
            .collect();
        let centered: Vec<Vec<f64>> = (0..c)
            .map(|ch| d[ch * n..(ch + 1) * n].iter().map(|&v| v as f64 - mean[ch]).collect())
            .collect();
        let mut cov = vec![0.0f64; c * c];
        for i in 0..c {
            for j in i..c {
                let s = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                cov[i * c + j] = s;
                cov[j * c + i] = s;
            }
        }
        let degenerate = (0..c).any(|i| cov[i * c + i] < 1e-12);
        let (eigenvalues, mut vectors) = symmetric_eigen(&cov, c);
        for v in &mut vectors {
            let lead = v
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        vectors.truncate(k.min(c));
        Ok(Pca {
            mean,
            eigenvalues,
            components: vectors,
            degenerate,
        })
    }

    /// Fraction of total variance carried by each retained component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        self.eigenvalues[..self.components.len()]
            .iter()
            .map(|v| if total > 0.0 { v.max(0.0) / total } else { 0.0 })
            .collect()
    }

    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.mean.len();
        if x.rank() != 3 || x.shape()[0] != c {
            return Err(Error::shape("pca transform", x.shape(), &[c]));
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let n = h * w;
        let k = self.components.len();
        let d = x.data();
        let mut out = vec![0.0f32; k * n];
        let mut acc = vec![0.0f64; n];
        for (j, comp) in self.components.iter().enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ch in 0..c {
                let (wgt, mu) = (comp[ch], self.mean[ch]);
                for (a, &v) in acc.iter_mut().zip(&d[ch * n..(ch + 1) * n]) {
                    *a += wgt * (v as f64 - mu);
                }
            }
            for (o, a) in out[j * n..(j + 1) * n].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        Tensor::new(&[k, h, w], out)
    }

    pub fn inverse_transform(&self, y: &Tensor) -> Result<Tensor> {
        let k = self.components.len();
        if y.rank() != 3 || y.shape()[0] != k {
            return Err(Error::shape("pca inverse", y.shape(), &[k]));
        }
        let (h, w) = (y.shape()[1], y.shape()[2]);
        let n = h * w;
        let c = self.mean.len();
        let mut out = vec![0.0f32; c * n];
        for ch in 0..c {
            for p in 0..n {
                let mut s = self.mean[ch];
                for (j, comp) in self.components.iter().enumerate() {
                    s += comp[ch] * y.data()[j * n + p] as f64;
                }
                out[ch * n + p] = s as f32;
            }
        }
        Tensor::new(&[c, h, w], out)
    }
}

/// Reduce a `[C,H,W]` cube to its leading `k` principal components.
///
/// Cubes with `C <= k` are returned unchanged.
pub fn pca_reduce(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::InvalidArg(format!("pca expects [C,H,W], got {:?}", x.shape())));
    }
    if x.shape()[0] <= k {
        return Ok(x.clone());
    }
    let pca = Pca::fit(x, k)?;
    if pca.degenerate {
        log::warn!("pca: at least one channel has zero variance");
    }
    pca.transform(x)
}

/// Stack reduced original channels with reduced reconstructed channels, original
/// first. Without a reconstruction the original block is repeated.
pub fn concat_diffusion(orig: &Tensor, diff: Option<&Tensor>) -> Result<Tensor> {
    let diff = diff.unwrap_or(orig);
    if orig.rank() != 3 || diff.rank() != 3 || orig.shape()[1..] != diff.shape()[1..] {
        return Err(Error::shape("concat_diffusion", orig.shape(), diff.shape()));
    }
    let mut data = Vec::with_capacity(orig.numel() + diff.numel());
    data.extend_from_slice(orig.data());
    data.extend_from_slice(diff.data());
    let shape = [orig.shape()[0] + diff.shape()[0], orig.shape()[1], orig.shape()[2]];
    Tensor::new(&shape, data)
}

/// Both modalities of a scene after preprocessing, on the scene grid.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub m1: Tensor,
    pub m2: Tensor,
}

/// Per-modality PCA of original and reconstructed data, then channel stacking.
/// With `components = None` the raw modalities pass through untouched.
pub fn prepare_scene(
    scene: &SceneCube,
    components: Option<usize>,
    aux_m1: Option<&Tensor>,
    aux_m2: Option<&Tensor>,
) -> Result<PreparedScene> {
    let Some(k) = components else {
        return Ok(PreparedScene {
            m1: scene.hs.clone(),
            m2: scene.lidar.clone(),
        });
    };
    let one = |x: &Tensor, aux: Option<&Tensor>| -> Result<Tensor> {
        let orig = pca_reduce(x, k)?;
        let diff = aux.map(|a| pca_reduce(a, k)).transpose()?;
        concat_diffusion(&orig, diff.as_ref())
    };
    Ok(PreparedScene {
        m1: one(&scene.hs, aux_m1)?,
        m2: one(&scene.lidar, aux_m2)?,
    })
}

/// Crop a `p×p` window of a `[C,H,W]` map centered on `(row, col)`, mirroring at
/// the borders.
pub fn crop_reflect(x: &Tensor, row: usize, col: usize, p: usize) -> Result<Tensor> {
    let [c, h, w] = x.shape()[..] else {
        return Err(Error::InvalidArg(format!("crop expects [C,H,W], got {:?}", x.shape())));
    };
    if p.is_multiple_of(2) {
        return Err(Error::InvalidArg(format!("patch size must be odd, got {p}")));
    }
    if row >= h || col >= w {
        return Err(Error::InvalidArg(format!("center ({row},{col}) outside {h}x{w} grid")));
    }
    let r = (p / 2) as isize;
    let mut out = Vec::with_capacity(c * p * p);
    let d = x.data();
    for ch in 0..c {
        for dy in -r..=r {
            let y = reflect_index(row as isize + dy, h);
            for dx in -r..=r {
                let xx = reflect_index(col as isize + dx, w);
                out.push(d[(ch * h + y) * w + xx]);
            }
        }
    }
    Tensor::new(&[c, p, p], out)
}

/// One patch per modality around a pixel.
pub fn extract_patch(scene: &PreparedScene, center: (usize, usize), p: usize) -> Result<(Tensor, Tensor)> {
    Ok((
        crop_reflect(&scene.m1, center.0, center.1, p)?,
        crop_reflect(&scene.m2, center.0, center.1, p)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub m1: Tensor,
    pub m2: Tensor,
    pub labels: Vec<usize>,
    pub p: usize,
}

impl PatchBatch {
    /// Crop patches around `centers`, in the given order.
    pub fn gather(scene: &PreparedScene, centers: &[(usize, usize)], labels: Vec<usize>, p: usize) -> Result<Self> {
        if centers.is_empty() || centers.len() != labels.len() {
            return Err(Error::InvalidArg(format!(
                "{} centers with {} labels",
                centers.len(),
                labels.len()
            )));
        }
        let (c1, c2) = (scene.m1.shape()[0], scene.m2.shape()[0]);
        let mut d1 = Vec::with_capacity(centers.len() * c1 * p * p);
        let mut d2 = Vec::with_capacity(centers.len() * c2 * p * p);
        for &ctr in centers {
            let (a, b) = extract_patch(scene, ctr, p)?;
            d1.extend_from_slice(a.data());
            d2.extend_from_slice(b.data());
        }
        Ok(PatchBatch {
            m1: Tensor::new(&[centers.len(), c1, p, p], d1)?,
            m2: Tensor::new(&[centers.len(), c2, p, p], d2)?,
            labels,
            p,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub radiation: bool,
    pub gain_range: (f32, f32),
    /// Noise standard deviation as a fraction of the patch's own standard deviation.
    pub noise_frac: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: true,
            vflip: true,
            radiation: true,
            gain_range: (0.9, 1.1),
            noise_frac: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            hflip: false,
            vflip: false,
            radiation: false,
            ..Self::default()
        }
    }
}

fn flip_planes(data: &mut [f32], p: usize, horizontal: bool) {
    for plane in data.chunks_exact_mut(p * p) {
        if horizontal {
            for row in plane.chunks_exact_mut(p) {
                row.reverse();
            }
        } else {
            for y in 0..p / 2 {
                let (top, bottom) = plane.split_at_mut((p - 1 - y) * p);
                top[y * p..(y + 1) * p].swap_with_slice(&mut bottom[..p]);
            }
        }
    }
}

/// Flip the selected samples of both modalities. Each flip is an involution.
pub fn apply_flips(batch: &mut PatchBatch, horizontal: &[bool], vertical: &[bool]) {
    let p = batch.p;
    for t in [&mut batch.m1, &mut batch.m2] {
        let per = t.numel() / t.shape()[0];
        for (i, sample) in t.data_mut().chunks_exact_mut(per).enumerate() {
            if horizontal.get(i).copied().unwrap_or(false) {
                flip_planes(sample, p, true);
            }
            if vertical.get(i).copied().unwrap_or(false) {
                flip_planes(sample, p, false);
            }
        }
    }
}

/// Random flips (shared by both modalities of a sample) and per-patch gain plus
/// Gaussian noise, all drawn from `seed`.
pub fn augment(batch: &PatchBatch, seed: u64, cfg: &AugmentConfig) -> PatchBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    let n = batch.len();
    let mut hmask = vec![false; n];
    let mut vmask = vec![false; n];
    for i in 0..n {
        if cfg.hflip {
            hmask[i] = rng.gen_bool(0.5);
        }
        if cfg.vflip {
            vmask[i] = rng.gen_bool(0.5);
        }
    }
    apply_flips(&mut out, &hmask, &vmask);
    if cfg.radiation {
        let (lo, hi) = cfg.gain_range;
        for t in [&mut out.m1, &mut out.m2] {
            let per = t.numel() / t.shape()[0];
            for sample in t.data_mut().chunks_exact_mut(per) {
                let gain = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                let mean = sample.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
                let var = sample.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
                let sigma = cfg.noise_frac as f64 * var.sqrt();
                let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
                for v in sample.iter_mut() {
                    *v = gain * *v + noise.sample(&mut rng) as f32;
                }
            }
        }
    }
    out
}

const AUX_MAGIC: &[u8; 8] = b"RSMGA1\0\0";

pub fn encode_aux(x: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = x.shape()[..] else {
        return Err(Error::InvalidArg(format!(
            "aux features must be [C,H,W], got {:?}",
            x.shape()
        )));
    };
    let mut buf = Vec::with_capacity(20 + 4 * x.numel());
    buf.extend_from_slice(AUX_MAGIC);
    for v in [c, h, w] {
        put_u32(&mut buf, v as u32);
    }
    put_f32s(&mut buf, x.data());
    Ok(buf)
}

/// Parse an RSMG1-AUX buffer; `grid` is the expected `(H, W)` when known.
pub fn decode_aux(bytes: &[u8], grid: Option<(usize, usize)>, what: &str) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes, what);
    if r.take(8)? != AUX_MAGIC {
        return Err(Error::BadMagic(what.to_string()));
    }
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if let Some(expected) = grid {
        if expected != (h, w) {
            return Err(Error::GridMismatch {
                expected,
                found: (h, w),
            });
        }
    }
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Data(format!("{what}: zero extent {c}x{h}x{w}")));
    }
    let data = r.f32s(c * h * w)?;
    Tensor::new(&[c, h, w], data)
}

pub fn write_diffusion_features(path: &Path, x: &Tensor) -> Result<()> {
    write_bytes(path, &encode_aux(x)?)
}

pub fn load_diffusion_features(path: &Path, grid: Option<(usize, usize)>) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    decode_aux(&bytes, grid, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_cube(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0];
        let (vals, vecs) = symmetric_eigen(&a, 3);
        for (l, v) in vals.iter().zip(&vecs) {
            for i in 0..3 {
                let av: f64 = (0..3).map(|j| a[i * 3 + j] * v[j]).sum();
                assert!((av - l * v[i]).abs() < 1e-9);
            }
        }
        assert!(vals.windows(2).all(|p| p[0] >= p[1]));
        assert!((vals.iter().sum::<f64>() - 8.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_channels_need_one_component() {
        let base = rand_cube(1, 6, 6, 1);
        let mut data = base.data().to_vec();
        data.extend(base.data().iter().map(|v| 3.0 * v));
        let x = Tensor::new(&[2, 6, 6], data).unwrap();
        let pca = Pca::fit(&x, 1).unwrap();
        assert!((pca.explained_variance_ratio()[0] - 1.0).abs() < 1e-9);
        let recon = pca.inverse_transform(&pca.transform(&x).unwrap()).unwrap();
        assert!(recon.max_abs_diff(&x) <= 1e-4);
    }

    #[test]
    fn full_rank_projection_is_a_rotation() {
        let x = rand_cube(4, 5, 5, 2);
        let pca = Pca::fit(&x, 9).unwrap();
        assert_eq!(pca.components.len(), 4);
        let recon = pca.inverse_transform(&pca.transform(&x).unwrap()).unwrap();
        assert!(recon.max_abs_diff(&x) <= 1e-4);
        for (i, a) in pca.components.iter().enumerate() {
            for (j, b) in pca.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn small_cubes_pass_through_reduce() {
        let x = rand_cube(2, 4, 4, 3);
        assert_eq!(pca_reduce(&x, 30).unwrap(), x);
        assert_eq!(pca_reduce(&rand_cube(6, 4, 4, 4), 3).unwrap().shape(), &[3, 4, 4]);
    }

    #[test]
    fn sign_convention_makes_largest_loading_positive() {
        let x = rand_cube(5, 6, 6, 5);
        let pca = Pca::fit(&x, 5).unwrap();
        for v in &pca.components {
            let lead = v
                .iter()
                .cloned()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
        let neg = x.map(|v| -v);
        let pn = Pca::fit(&neg, 5).unwrap();
        assert_eq!(pca.components.len(), pn.components.len());
    }

    #[test]
    fn zero_variance_channel_is_flagged() {
        let mut x = rand_cube(3, 4, 4, 6);
        for v in &mut x.data_mut()[16..32] {
            *v = 2.0;
        }
        let pca = Pca::fit(&x, 2).unwrap();
        assert!(pca.degenerate);
        assert!(pca_reduce(&x, 2).unwrap().all_finite());
    }

    #[test]
    fn concat_diffusion_contract() {
        let a = rand_cube(30, 4, 4, 7);
        let b = rand_cube(30, 4, 4, 8);
        assert_eq!(concat_diffusion(&a, Some(&b)).unwrap().shape(), &[60, 4, 4]);
        let dup = concat_diffusion(&a, None).unwrap();
        let half = 30 * 16;
        assert_eq!(&dup.data()[..half], &dup.data()[half..]);
        let c = rand_cube(30, 5, 4, 9);
        assert!(matches!(
            concat_diffusion(&a, Some(&c)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn crop_exact_fit_returns_whole_image() {
        let x = rand_cube(2, 11, 11, 10);
        assert_eq!(crop_reflect(&x, 5, 5, 11).unwrap(), x);
    }

    #[test]
    fn crop_reflects_at_corner() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = crop_reflect(&x, 0, 0, 3).unwrap();
        // rows -1,0,1 -> 1,0,1 ; cols likewise
        let src = [[1.0, 2.0], [3.0, 4.0]];
        let idx = [1usize, 0, 1];
        let expect: Vec<f32> = idx.iter().flat_map(|&r| idx.iter().map(move |&c| src[r][c])).collect();
        assert_eq!(p.data(), &expect[..]);
        assert!(matches!(crop_reflect(&x, 0, 0, 4), Err(Error::InvalidArg(_))));
        assert!(matches!(crop_reflect(&x, 2, 0, 3), Err(Error::InvalidArg(_))));
    }

    fn batch() -> PatchBatch {
        let scene = PreparedScene {
            m1: rand_cube(3, 12, 12, 11),
            m2: rand_cube(1, 12, 12, 12),
        };
        PatchBatch::gather(&scene, &[(2, 2), (5, 6), (9, 8)], vec![0, 1, 2], 5).unwrap()
    }

    #[test]
    fn augment_identity_when_disabled() {
        let b = batch();
        assert_eq!(augment(&b, 3, &AugmentConfig::none()), b);
    }

    #[test]
    fn flips_are_involutions() {
        let b = batch();
        let mut f = b.clone();
        let h = [true, false, true];
        let v = [false, true, true];
        apply_flips(&mut f, &h, &[]);
        assert_ne!(f, b);
        apply_flips(&mut f, &h, &[]);
        assert_eq!(f, b);
        apply_flips(&mut f, &[], &v);
        apply_flips(&mut f, &[], &v);
        assert_eq!(f, b);
    }

    #[test]
    fn vertical_flip_reverses_rows() {
        let mut b = batch();
        let orig = b.clone();
        apply_flips(&mut b, &[], &[true, true, true]);
        assert_eq!(b.m1.get(&[1, 2, 0, 3]), orig.m1.get(&[1, 2, 4, 3]));
        assert_eq!(b.m2.get(&[0, 0, 1, 1]), orig.m2.get(&[0, 0, 3, 1]));
    }

    #[test]
    fn augment_is_seeded_and_label_preserving() {
        let b = batch();
        let cfg = AugmentConfig::default();
        let a1 = augment(&b, 42, &cfg);
        let a2 = augment(&b, 42, &cfg);
        assert_eq!(a1, a2);
        assert_eq!(a1.labels, b.labels);
        assert_eq!(a1.m1.shape(), b.m1.shape());
        assert_ne!(augment(&b, 43, &cfg), a1);
    }

    #[test]
    fn aux_round_trip_and_errors() {
        let x = rand_cube(16, 32, 32, 13);
        let bytes = encode_aux(&x).unwrap();
        assert_eq!(decode_aux(&bytes, Some((32, 32)), "t").unwrap(), x);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_aux(&bad, None, "t"), Err(Error::BadMagic(_))));
        assert!(matches!(
            decode_aux(&bytes, Some((31, 32)), "t"),
            Err(Error::GridMismatch { .. })
        ));
        assert!(matches!(
            decode_aux(&bytes[..bytes.len() - 1], None, "t"),
            Err(Error::TruncatedFile(_))
        ));
    }
}

//! Synthetic two-domain scenes: smooth blobs of trees, roads and buildings,
//! observed as a reflectance-like cube and an elevation-like raster.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scene::{Domain, SceneCube};
use crate::tensor::{reflect_index, Tensor};

pub const TREES: usize = 0;
pub const ROADS: usize = 1;
pub const BUILDINGS: usize = 2;

/// How the target scene departs from the source generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftSpec {
    /// Std of the per-band multiplicative gain around 1.
    pub spectral_gain: f32,
    /// Std of the per-band additive offset, in reflectance units.
    pub spectral_offset: f32,
    /// Scale factor on the blob size.
    pub morphology: f32,
    /// Extra Gaussian noise std added to every band.
    pub noise_sigma: f32,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec {
            spectral_gain: 0.0,
            spectral_offset: 0.0,
            morphology: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.spectral_gain == 0.0 && self.spectral_offset == 0.0 && self.morphology == 1.0 && self.noise_sigma == 0.0
    }
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            spectral_gain: 0.25,
            spectral_offset: 0.04,
            morphology: 1.5,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gain={},offset={},morph={},noise={},seed={}",
            self.spectral_gain, self.spectral_offset, self.morphology, self.noise_sigma, self.seed
        )
    }
}

/// `identity`, `default`, or comma-separated `key=value` overrides of the default
/// shift with keys `gain`, `offset`, `morph`, `noise`, `seed`.
impl FromStr for ShiftSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "identity" | "none" => return Ok(ShiftSpec::identity()),
            "default" | "" => return Ok(ShiftSpec::default()),
            _ => {}
        }
        let mut spec = ShiftSpec::default();
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("shift item {part:?} is not key=value")))?;
            let bad = |e: &dyn fmt::Display| Error::Config(format!("shift {k}: {e}"));
            let num = |v: &str| v.trim().parse::<f32>().map_err(|e| bad(&e));
            match k.trim() {
                "gain" => spec.spectral_gain = num(v)?,
                "offset" => spec.spectral_offset = num(v)?,
                "morph" => spec.morphology = num(v)?,
                "noise" => spec.noise_sigma = num(v)?,
                "seed" => spec.seed = v.trim().parse().map_err(|e| bad(&e))?,
                other => return Err(Error::Config(format!("unknown shift key {other:?}"))),
            }
        }
        if spec.spectral_gain < 0.0 || spec.spectral_offset < 0.0 || spec.noise_sigma < 0.0 || spec.morphology <= 0.0 {
            return Err(Error::Config(format!("shift out of range: {spec}")));
        }
        Ok(spec)
    }
}

/// Scene dimensions for [`synth_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSize {
    pub h: usize,
    pub w: usize,
    pub bands: usize,
}

impl SynthSize {
    pub fn desk() -> Self {
        SynthSize {
            h: 96,
            w: 96,
            bands: 32,
        }
    }
}

/// Blur radius (std, pixels) of the class fields at morphology 1.
const BLOB_SIGMA: f32 = 4.0;
/// Every class keeps at least this share of pixels.
const MIN_SHARE: f64 = 0.08;
const BASE_NOISE: f32 = 0.01;
const LIDAR_NOISE: f32 = 0.1;

struct Layout {
    labels: Vec<usize>,
    /// Roof height of each building pixel, zero elsewhere.
    roof: Vec<f32>,
}

/// Separable Gaussian blur of an `h×w` field with reflected borders.
fn blur(field: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-r..=r)
        .map(|d| (-(d as f32).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let pass = |src: &[f32], along_rows: bool| -> Vec<f32> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, d) in (-r..=r).enumerate() {
                    let (yy, xx) = if along_rows {
                        (y, reflect_index(x as isize + d, w))
                    } else {
                        (reflect_index(y as isize + d, h), x)
                    };
                    acc += kernel[k] * src[yy * w + xx];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// A blurred white-noise field rescaled to zero mean and unit std.
fn smooth_field(h: usize, w: usize, sigma: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let noise: Vec<f32> = (0..h * w).map(|_| normal(rng)).collect();
    let mut f = blur(&noise, h, w, sigma);
    let n = f.len() as f32;
    let mean = f.iter().sum::<f32>() / n;
    let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n).sqrt().max(1e-6);
    f.iter_mut().for_each(|v| *v = (*v - mean) / std);
    f
}

/// Class blobs from the argmax of one smooth field per class. Biases are nudged
/// until every class holds at least [`MIN_SHARE`] of the pixels.
fn layout(h: usize, w: usize, morph: f32, rng: &mut ChaCha8Rng) -> Layout {
    let sigma = BLOB_SIGMA * morph;
    let fields: Vec<Vec<f32>> = (0..3).map(|_| smooth_field(h, w, sigma, rng)).collect();
    let mut bias = [0.0f32; 3];
    let labels = loop {
        let labels: Vec<usize> = (0..h * w)
            .map(|p| {
                (0..3)
                    .max_by(|&a, &b| (fields[a][p] + bias[a]).total_cmp(&(fields[b][p] + bias[b])))
                    .unwrap()
            })
            .collect();
        let share = |c: usize| labels.iter().filter(|&&l| l == c).count() as f64 / labels.len() as f64;
        match (0..3).find(|&c| share(c) < MIN_SHARE) {
            Some(c) => bias[c] += 0.05,
            None => break labels,
        }
    };
    let height = smooth_field(h, w, 2.0 * sigma, rng);
    let roof = labels
        .iter()
        .zip(&height)
        .map(|(&l, &z)| {
            if l == BUILDINGS {
                8.5 + 2.0 * z.clamp(-1.5, 1.5)
            } else {
                0.0
            }
        })
        .collect();
    Layout { labels, roof }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean reflectance of a pure pixel of `class` at normalized wavelength `l`.
fn signature(class: usize, l: f32) -> f32 {
    match class {
        TREES => 0.04 + 0.06 * (-((l - 0.25) / 0.06).powi(2)).exp() + 0.42 * sigmoid((l - 0.5) / 0.03),
        ROADS => 0.12 + 0.08 * l,
        _ => 0.20 + 0.08 * l + 0.05 * (-((l - 0.7) / 0.1).powi(2)).exp(),
    }
}

/// 3×3 box-blurred one-hot maps: per-pixel class fractions `[classes][h*w]`.
fn abundances(labels: &[usize], h: usize, w: usize, classes: usize) -> Vec<Vec<f32>> {
    let mut out = vec![vec![0.0; h * w]; classes];
    for r in 0..h {
        for c in 0..w {
            let mut n = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    out[labels[rr as usize * w + cc as usize]][r * w + c] += 1.0;
                    n += 1.0;
                }
            }
            for a in out.iter_mut() {
                a[r * w + c] /= n;
            }
        }
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

fn render(size: SynthSize, morph: f32, extra_noise: f32, rng: &mut ChaCha8Rng, domain: Domain) -> Result<SceneCube> {
    let SynthSize { h, w, bands } = size;
    let lay = layout(h, w, morph, rng);
    let ab = abundances(&lay.labels, h, w, 3);
    let mut hs = vec![0.0; bands * h * w];
    let sig: Vec<[f32; 3]> = (0..bands)
        .map(|b| {
            let l = b as f32 / (bands - 1) as f32;
            [signature(0, l), signature(1, l), signature(2, l)]
        })
        .collect();
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let mut lidar = vec![0.0; h * w];
    for p in 0..h * w {
        let bright = 1.0 + 0.05 * normal(rng);
        for b in 0..bands {
            let pure: f32 = (0..3).map(|k| ab[k][p] * sig[b][k]).sum();
            hs[b * h * w + p] = pure * bright + (BASE_NOISE + extra_noise) * normal(rng);
        }
        let (r, c) = ((p / w) as f32, (p % w) as f32);
        let ground = 0.8 * ((r + c) / 40.0 + phase).sin();
        let canopy = (6.0 + 2.0 * normal(rng)).max(1.0);
        let top = match lay.labels[p] {
            TREES => canopy,
            ROADS => 0.0,
            _ => lay.roof[p],
        };
        lidar[p] = ground + top + LIDAR_NOISE * normal(rng);
    }
    let labels = lay.labels.iter().map(|&l| l as i32).collect();
    SceneCube::new(
        Tensor::new(&[bands, h, w], hs)?,
        Tensor::new(&[1, h, w], lidar)?,
        labels,
        3,
        domain,
    )
}

/// Source and target scenes with three classes (trees, roads, buildings). The
/// target uses an independent layout and the spectral, morphological and noise
/// changes in `shift`.
pub fn synth_dataset(size: SynthSize, classes: usize, shift: &ShiftSpec, seed: u64) -> Result<(SceneCube, SceneCube)> {
    if size.h < 32 || size.w < 32 {
        return Err(Error::InvalidArg(format!(
            "scene {}x{} smaller than 32x32",
            size.h, size.w
        )));
    }
    if size.bands < 4 {
        return Err(Error::InvalidArg(format!("{} bands, need at least 4", size.bands)));
    }
    if classes != 3 {
        return Err(Error::InvalidArg(format!(
            "the generator has 3 classes, asked for {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = render(size, 1.0, 0.0, &mut rng, Domain::Source)?;
    let mut target = render(size, shift.morphology, shift.noise_sigma, &mut rng, Domain::Target)?;
    let mut srng = ChaCha8Rng::seed_from_u64(shift.seed ^ seed.rotate_left(32));
    let hw = size.h * size.w;
    let data = target.hs.data_mut();
    for b in 0..size.bands {
        let gain = 1.0 + shift.spectral_gain * normal(&mut srng);
        let offset = shift.spectral_offset * normal(&mut srng);
        for v in &mut data[b * hw..(b + 1) * hw] {
            *v = *v * gain + offset;
        }
    }
    Ok((source, target))
}

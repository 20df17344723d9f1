//! Single-level orthonormal 2D Haar analysis and synthesis.
//!
//! For every non-overlapping 2×2 block `(a b; c d)`:
//!
//! ```text
//! ll = (a + b + c + d) / 2      a = (ll + hl + lh + hh) / 2
//! hl = (a + b - c - d) / 2      b = (ll + hl - lh - hh) / 2
//! lh = (a - b + c - d) / 2      c = (ll - hl + lh - hh) / 2
//! hh = (a - b - c + d) / 2      d = (ll - hl - lh + hh) / 2
//! ```
//!
//! The 4×4 block matrix is symmetric and orthonormal, so synthesis is both the
//! inverse and the adjoint of analysis. The tape uses that to backpropagate one
//! through the other.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four subbands of one analysis step. All four share one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet<T> {
    pub ll: T,
    pub hl: T,
    pub lh: T,
    pub hh: T,
}

impl<T> SubbandSet<T> {
    pub fn as_array(&self) -> [&T; 4] {
        [&self.ll, &self.hl, &self.lh, &self.hh]
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> SubbandSet<U> {
        SubbandSet {
            ll: f(self.ll),
            hl: f(self.hl),
            lh: f(self.lh),
            hh: f(self.hh),
        }
    }
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidArg(format!(
            "wavelet transform expects [N,C,H,W], got {shape:?}"
        ))),
    }
}

/// Analysis into a channel-packed `[N, 4C, H/2, W/2]` buffer laid out as `LL | HL | LH | HH`.
pub(crate) fn analysis_packed(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (h2, w2) = (h / 2, w / 2);
    let plane = h2 * w2;
    let mut out = vec![0.0f32; n * 4 * c * plane];
    for s in 0..n {
        for ch in 0..c {
            let src = &x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            let base = s * 4 * c * plane;
            for i in 0..h2 {
                for j in 0..w2 {
                    let a = src[2 * i * w + 2 * j];
                    let b = src[2 * i * w + 2 * j + 1];
                    let cc = src[(2 * i + 1) * w + 2 * j];
                    let d = src[(2 * i + 1) * w + 2 * j + 1];
                    let o = i * w2 + j;
                    out[base + ch * plane + o] = 0.5 * (a + b + cc + d);
                    out[base + (c + ch) * plane + o] = 0.5 * (a + b - cc - d);
                    out[base + (2 * c + ch) * plane + o] = 0.5 * (a - b + cc - d);
                    out[base + (3 * c + ch) * plane + o] = 0.5 * (a - b - cc + d);
                }
            }
        }
    }
    out
}

/// Synthesis from the packed layout produced by [`analysis_packed`]; `c` is the
/// per-subband channel count and `(h2, w2)` the subband extent.
pub(crate) fn synthesis_packed(p: &[f32], n: usize, c: usize, h2: usize, w2: usize) -> Vec<f32> {
    let (h, w) = (2 * h2, 2 * w2);
    let plane = h2 * w2;
    let mut out = vec![0.0f32; n * c * h * w];
    for s in 0..n {
        for ch in 0..c {
            let base = s * 4 * c * plane;
            let dst = &mut out[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    let o = i * w2 + j;
                    let ll = p[base + ch * plane + o];
                    let hl = p[base + (c + ch) * plane + o];
                    let lh = p[base + (2 * c + ch) * plane + o];
                    let hh = p[base + (3 * c + ch) * plane + o];
                    dst[2 * i * w + 2 * j] = 0.5 * (ll + hl + lh + hh);
                    dst[2 * i * w + 2 * j + 1] = 0.5 * (ll + hl - lh - hh);
                    dst[(2 * i + 1) * w + 2 * j] = 0.5 * (ll - hl + lh - hh);
                    dst[(2 * i + 1) * w + 2 * j + 1] = 0.5 * (ll - hl - lh + hh);
                }
            }
        }
    }
    out
}

/// One-level Haar analysis of an `[N,C,H,W]` tensor. `H` and `W` must be even.
pub fn dwt2(x: &Tensor) -> Result<SubbandSet<Tensor>> {
    let (n, c, h, w) = dims4(x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddExtent { h, w });
    }
    let packed = Tensor::from_parts(vec![n, 4 * c, h / 2, w / 2], analysis_packed(x.data(), n, c, h, w));
    Ok(SubbandSet {
        ll: packed.narrow_channels(0, c)?,
        hl: packed.narrow_channels(c, c)?,
        lh: packed.narrow_channels(2 * c, c)?,
        hh: packed.narrow_channels(3 * c, c)?,
    })
}

fn check_subbands(shapes: [&[usize]; 4]) -> Result<()> {
    for s in &shapes[1..] {
        if *s != shapes[0] {
            return Err(Error::shape("idwt2", shapes[0], s));
        }
    }
    Ok(())
}

/// Exact inverse of [`dwt2`].
pub fn idwt2(s: &SubbandSet<Tensor>) -> Result<Tensor> {
    check_subbands([s.ll.shape(), s.hl.shape(), s.lh.shape(), s.hh.shape()])?;
    let (n, c, h2, w2) = dims4(s.ll.shape())?;
    let plane = h2 * w2;
    let mut packed = Vec::with_capacity(n * 4 * c * plane);
    for i in 0..n {
        for band in s.as_array() {
            packed.extend_from_slice(&band.data()[i * c * plane..(i + 1) * c * plane]);
        }
    }
    Ok(Tensor::from_parts(
        vec![n, c, 2 * h2, 2 * w2],
        synthesis_packed(&packed, n, c, h2, w2),
    ))
}

/// Differentiable analysis on a tape.
pub fn dwt2_var(tape: &mut Tape, x: Var) -> Result<SubbandSet<Var>> {
    let packed = tape.haar_analysis(x)?;
    let c = tape.shape(packed)[1] / 4;
    Ok(SubbandSet {
        ll: tape.narrow(packed, 1, 0, c)?,
        hl: tape.narrow(packed, 1, c, c)?,
        lh: tape.narrow(packed, 1, 2 * c, c)?,
        hh: tape.narrow(packed, 1, 3 * c, c)?,
    })
}

/// Differentiable synthesis on a tape.
pub fn idwt2_var(tape: &mut Tape, s: &SubbandSet<Var>) -> Result<Var> {
    check_subbands([tape.shape(s.ll), tape.shape(s.hl), tape.shape(s.lh), tape.shape(s.hh)])?;
    let packed = tape.concat(&[s.ll, s.hl, s.lh, s.hh], 1)?;
    tape.haar_synthesis(packed)
}

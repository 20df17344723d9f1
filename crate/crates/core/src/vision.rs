//! Spatial-frequency image encoder: a grouped residual convolution stem followed
//! by two stages, each summing a wavelet-attention mixer and a conv/attention
//! mixer. The baseline variant swaps the stem for a plain residual block and drops
//! the wavelet mixer.

use crate::autodiff::{PadMode, Var};
use crate::error::{Error, Result};
use crate::nn::{from_tokens, norm_channels, to_tokens, Conv, Init, Mlp, MultiHeadAttention, Norm};
use crate::params::Session;
use crate::wavelet::{dwt2_var, idwt2_var, SubbandSet};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub c_in: usize,
    pub c_model: usize,
    pub heads_spatial: usize,
    /// Grouped residual stem; otherwise a 1×1 projection plus one residual block.
    pub frgcm: bool,
    /// Wavelet mixer branch in each stage.
    pub wavelet: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_model == 0 || self.heads_spatial == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if !self.c_model.is_multiple_of(4) {
            return Err(Error::ChunkError {
                channels: self.c_model,
                parts: 4,
            });
        }
        if !self.c_model.is_multiple_of(self.heads_spatial) {
            return Err(Error::Config(format!(
                "c_model {} not divisible by {} heads",
                self.c_model, self.heads_spatial
            )));
        }
        if self.frgcm && !self.c_model.is_multiple_of(2) {
            return Err(Error::Config("grouped stem needs an even width".into()));
        }
        Ok(())
    }
}

/// Stage-1 and stage-2 feature maps.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    pub f1: Var,
    pub f2: Var,
}

/// Fully residual grouping convolution module.
///
/// `u = proj(x)`; `u` splits into two halves, each passing through two 3×3
/// convolutions. The first-layer outputs of both groups are summed, then the
/// second-layer outputs are added on top, and the running sum goes through an
/// interaction 3×3 convolution. The two group outputs and the interaction output
/// are concatenated, fused by a zero-initialized 1×1 convolution, and added to `u`.
#[derive(Clone, Debug)]
pub struct Frgcm {
    pub proj: Conv,
    pub g1: [Conv; 2],
    pub g2: [Conv; 2],
    pub interact: Conv,
    pub fuse: Conv,
}

impl Frgcm {
    pub fn new(init: &mut Init<'_>, name: &str, c_in: usize, c: usize) -> Self {
        let h = c / 2;
        init.scope(name, |i| Frgcm {
            proj: i.conv("proj", c_in, c, 1, 1),
            g1: [i.conv("g1a", h, h, 3, 1), i.conv("g1b", h, h, 3, 1)],
            g2: [i.conv("g2a", h, h, 3, 1), i.conv("g2b", h, h, 3, 1)],
            interact: i.conv("interact", h, h, 3, 1),
            fuse: i.conv_zero("fuse", 3 * h, c, 1, 1),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let u = self.proj.forward(s, x)?;
        let c = s.shape(u)[1];
        let h = c / 2;
        let x1 = s.narrow(u, 1, 0, h)?;
        let x2 = s.narrow(u, 1, h, h)?;
        let a1 = self.g1[0].forward(s, x1)?;
        let a1 = s.gelu(a1)?;
        let b1 = self.g1[1].forward(s, a1)?;
        let a2 = self.g2[0].forward(s, x2)?;
        let a2 = s.gelu(a2)?;
        let b2 = self.g2[1].forward(s, a2)?;
        let p = s.add(a1, a2)?;
        let p = s.add(p, b1)?;
        let p = s.add(p, b2)?;
        let i = self.interact.forward(s, p)?;
        let i = s.gelu(i)?;
        let cat = s.concat(&[b1, b2, i], 1)?;
        let y = self.fuse.forward(s, cat)?;
        s.add(u, y)
    }
}

/// `x + conv(gelu(conv(x)))` with the second convolution zero-initialized.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
}

impl ResBlock {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize) -> Self {
        init.scope(name, |i| ResBlock {
            c1: i.conv("c1", c, c, 3, 1),
            c2: i.conv_zero("c2", c, c, 3, 1),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.c1.forward(s, x)?;
        let h = s.gelu(h)?;
        let h = self.c2.forward(s, h)?;
        s.add(x, h)
    }
}

/// Self-attention run independently inside each Haar subband.
///
/// Per subband a 1×1 convolution expands `C -> 4C`, split into query, key, value
/// and a local content path. Attention output and content path are concatenated
/// and pooled back to `C` channels by a zero-initialized 1×1 convolution; the
/// inverse transform recombines the four subbands.
#[derive(Clone, Debug)]
pub struct Mhwsa {
    pub expand: [Conv; 4],
    pub pool: [Conv; 4],
}

impl Mhwsa {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize) -> Self {
        init.scope(name, |i| Mhwsa {
            expand: ["ll", "hl", "lh", "hh"].map(|b| i.conv(&format!("{b}.expand"), c, 4 * c, 1, 1)),
            pool: ["ll", "hl", "lh", "hh"].map(|b| i.conv_zero(&format!("{b}.pool"), 2 * c, c, 1, 1)),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, z: Var) -> Result<Var> {
        let c = s.shape(z)[1];
        if !c.is_multiple_of(4) {
            return Err(Error::ChunkError { channels: c, parts: 4 });
        }
        let bands = dwt2_var(s, z)?;
        let [ll, hl, lh, hh] = [bands.ll, bands.hl, bands.lh, bands.hh];
        let mut out = Vec::with_capacity(4);
        for (k, band) in [ll, hl, lh, hh].into_iter().enumerate() {
            out.push(self.band(s, k, band)?);
        }
        idwt2_var(
            s,
            &SubbandSet {
                ll: out[0],
                hl: out[1],
                lh: out[2],
                hh: out[3],
            },
        )
    }

    fn band(&self, s: &mut Session<'_>, k: usize, f: Var) -> Result<Var> {
        let [_, c, h, w] = s.shape(f)[..] else { unreachable!() };
        let e = self.expand[k].forward(s, f)?;
        let q = s.narrow(e, 1, 0, c)?;
        let kk = s.narrow(e, 1, c, c)?;
        let v = s.narrow(e, 1, 2 * c, c)?;
        let local = s.narrow(e, 1, 3 * c, c)?;
        let a = attend(s, q, kk, v)?;
        let a = from_tokens(s, a, h, w)?;
        let cat = s.concat(&[a, local], 1)?;
        self.pool[k].forward(s, cat)
    }
}

/// `softmax(Q Kᵀ / √C) V` over the spatial positions of `[N,C,h,w]` maps;
/// returns `[N,h·w,C]` tokens.
fn attend(s: &mut Session<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
    let c = s.shape(q)[1];
    let qt = to_tokens(s, q)?;
    let kt = to_tokens(s, k)?;
    let vt = to_tokens(s, v)?;
    s.attention(qt, kt, vt, 1.0 / (c as f32).sqrt(), None)
}

/// Pre-norm block with a 2× GELU MLP applied over channel tokens.
fn mlp_residual(s: &mut Session<'_>, norm: &Norm, mlp: &Mlp, z: Var) -> Result<Var> {
    let (h, w) = (s.shape(z)[2], s.shape(z)[3]);
    let t = to_tokens(s, z)?;
    let n = norm.forward(s, t)?;
    let m = mlp.forward(s, n)?;
    let m = from_tokens(s, m, h, w)?;
    s.add(z, m)
}

/// `z + MHWSA(LN z)`, then `z' + MLP(LN z')`.
#[derive(Clone, Debug)]
pub struct WctMixer {
    pub norm1: Norm,
    pub attn: Mhwsa,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl WctMixer {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize) -> Self {
        init.scope(name, |i| WctMixer {
            norm1: i.norm("norm1", c),
            attn: Mhwsa::new(i, "mhwsa", c),
            norm2: i.norm("norm2", c),
            mlp: Mlp::new(i, "mlp", c, 2 * c),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, z: Var) -> Result<Var> {
        let n = norm_channels(s, &self.norm1, z)?;
        let a = self.attn.forward(s, n)?;
        let z = s.add(z, a)?;
        mlp_residual(s, &self.norm2, &self.mlp, z)
    }
}

/// `z + conv3(LN z) + MHSA(LN z)`, then `z' + MLP(LN z')`.
#[derive(Clone, Debug)]
pub struct CtMixer {
    pub norm1: Norm,
    pub local: Conv,
    pub attn: MultiHeadAttention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl CtMixer {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize, heads: usize) -> Result<Self> {
        init.scope(name, |i| {
            Ok(CtMixer {
                norm1: i.norm("norm1", c),
                local: i.conv_zero("local", c, c, 3, 1),
                attn: MultiHeadAttention::new(i, "attn", c, heads)?,
                norm2: i.norm("norm2", c),
                mlp: Mlp::new(i, "mlp", c, 2 * c),
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, z: Var) -> Result<Var> {
        let (h, w) = (s.shape(z)[2], s.shape(z)[3]);
        let t = to_tokens(s, z)?;
        let nt = self.norm1.forward(s, t)?;
        let g = self.attn.forward(s, nt, None)?;
        let g = from_tokens(s, g, h, w)?;
        let n = from_tokens(s, nt, h, w)?;
        let l = self.local.forward(s, n)?;
        let z = s.add(z, l)?;
        let z = s.add(z, g)?;
        mlp_residual(s, &self.norm2, &self.mlp, z)
    }
}

#[derive(Clone, Debug)]
pub enum Stem {
    Grouped(Frgcm),
    Plain { proj: Conv, block: ResBlock },
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub wavelet: Option<WctMixer>,
    pub spatial: CtMixer,
}

impl Stage {
    fn forward(&self, s: &mut Session<'_>, z: Var) -> Result<Var> {
        let b = self.spatial.forward(s, z)?;
        match &self.wavelet {
            Some(w) => {
                let a = w.forward(s, z)?;
                s.add(a, b)
            }
            None => Ok(b),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sfie {
    pub cfg: EncoderConfig,
    pub stem: Stem,
    pub stages: [Stage; 2],
}

impl Sfie {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.c_model;
        init.scope(name, |i| {
            let stem = if cfg.frgcm {
                Stem::Grouped(Frgcm::new(i, "frgcm", cfg.c_in, c))
            } else {
                Stem::Plain {
                    proj: i.conv("stem", cfg.c_in, c, 1, 1),
                    block: ResBlock::new(i, "stem_res", c),
                }
            };
            let mut stage = |name: &str| -> Result<Stage> {
                i.scope(name, |j| {
                    Ok(Stage {
                        wavelet: cfg.wavelet.then(|| WctMixer::new(j, "wct", c)),
                        spatial: CtMixer::new(j, "ct", c, cfg.heads_spatial)?,
                    })
                })
            };
            let stages = [stage("stage1")?, stage("stage2")?];
            Ok(Sfie {
                cfg: cfg.clone(),
                stem,
                stages,
            })
        })
    }

    /// Odd spatial extents are reflect-padded by one row and column before the stem.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<StageFeatures> {
        let [_, c_in, h, w] = s.shape(x)[..] else {
            return Err(Error::InvalidArg(format!(
                "encoder expects [N,C,H,W], got {:?}",
                s.shape(x)
            )));
        };
        if c_in != self.cfg.c_in {
            return Err(Error::shape("encoder input", s.shape(x), &[self.cfg.c_in]));
        }
        let x = if h % 2 == 1 || w % 2 == 1 {
            s.pad2d(x, [0, h % 2, 0, w % 2], PadMode::Reflect)?
        } else {
            x
        };
        let z = match &self.stem {
            Stem::Grouped(f) => f.forward(s, x)?,
            Stem::Plain { proj, block } => {
                let u = proj.forward(s, x)?;
                block.forward(s, u)?
            }
        };
        let f1 = self.stages[0].forward(s, z)?;
        let (h1, w1) = (s.shape(f1)[2], s.shape(f1)[3]);
        if h1 % 4 != 0 || w1 % 4 != 0 {
            return Err(Error::OddExtent { h: h1 / 2, w: w1 / 2 });
        }
        let d = s.avg_pool2(f1)?;
        let f2 = self.stages[1].forward(s, d)?;
        Ok(StageFeatures { f1, f2 })
    }
}

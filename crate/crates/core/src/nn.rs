//! Parameterized layers shared by the encoders.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{PadMode, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, xavier_uniform, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Registers parameters under a dotted name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut inner = Init {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut inner)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.add(full, value)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let w = xavier_uniform(&[d_in, d_out], d_in, d_out, self.rng);
        self.linear_with(name, w)
    }

    /// Linear layer with all-zero weights, used for residual output projections.
    pub fn linear_zero(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        self.linear_with(name, Tensor::zeros(&[d_in, d_out]))
    }

    /// Linear layer without a bias term.
    pub fn linear_no_bias(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let w = xavier_uniform(&[d_in, d_out], d_in, d_out, self.rng);
        Linear {
            w: self.add(&format!("{name}.w"), w),
            b: None,
        }
    }

    fn linear_with(&mut self, name: &str, w: Tensor) -> Linear {
        let d_out = w.shape()[1];
        let w = self.add(&format!("{name}.w"), w);
        let b = self.add(&format!("{name}.b"), Tensor::zeros(&[d_out]));
        Linear { w, b: Some(b) }
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, groups: usize) -> Conv {
        let fan_in = c_in / groups * k * k;
        let w = kaiming_uniform(&[c_out, c_in / groups, k, k], fan_in, self.rng);
        self.conv_with(name, w, groups)
    }

    pub fn conv_zero(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, groups: usize) -> Conv {
        self.conv_with(name, Tensor::zeros(&[c_out, c_in / groups, k, k]), groups)
    }

    pub fn conv_with(&mut self, name: &str, w: Tensor, groups: usize) -> Conv {
        let c_out = w.shape()[0];
        let k = w.shape()[2];
        let w = self.add(&format!("{name}.w"), w);
        let b = self.add(&format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv {
            w,
            b,
            k,
            groups,
            mode: PadMode::Zero,
        }
    }

    pub fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(&format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: self.add(&format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }
}

/// `y = x · W + b` over the last axis; `W` is stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = s.shape(x).to_vec();
        let d_in = *shape.last().unwrap();
        let w = s.param(self.w);
        let d_out = s.shape(w)[1];
        if s.shape(w)[0] != d_in {
            return Err(Error::shape("linear", &shape, s.shape(w)));
        }
        let rows = shape.iter().product::<usize>() / d_in;
        let x2 = if shape.len() == 2 {
            x
        } else {
            s.reshape(x, &[rows, d_in])?
        };
        let mut y = s.matmul(x2, w)?;
        if let Some(b) = self.b {
            let b = s.param(b);
            y = s.add(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        s.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub groups: usize,
    pub mode: PadMode,
}

impl Conv {
    pub fn with_mode(mut self, mode: PadMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = s.param(self.b);
        s.conv2d(x, w, Some(b), 1, self.mode, self.groups)
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f32 = 1e-5;

impl Norm {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.layer_norm(x, g, b, LN_EPS)
    }
}

/// `[N,C,H,W] -> [N,H·W,C]`.
pub fn to_tokens(s: &mut Session<'_>, x: Var) -> Result<Var> {
    let [n, c, h, w] = s.shape(x)[..] else {
        return Err(Error::InvalidArg("to_tokens expects [N,C,H,W]".into()));
    };
    let flat = s.reshape(x, &[n, c, h * w])?;
    s.transpose_last2(flat)
}

/// `[N,H·W,C] -> [N,C,H,W]`.
pub fn from_tokens(s: &mut Session<'_>, t: Var, h: usize, w: usize) -> Result<Var> {
    let [n, hw, c] = s.shape(t)[..] else {
        return Err(Error::InvalidArg("from_tokens expects [N,T,C]".into()));
    };
    if hw != h * w {
        return Err(Error::shape("from_tokens", &[n, hw, c], &[n, h * w, c]));
    }
    let tt = s.transpose_last2(t)?;
    s.reshape(tt, &[n, c, h, w])
}

/// Layer norm across channels of a feature map.
pub fn norm_channels(s: &mut Session<'_>, norm: &Norm, x: Var) -> Result<Var> {
    let (h, w) = (s.shape(x)[2], s.shape(x)[3]);
    let t = to_tokens(s, x)?;
    let t = norm.forward(s, t)?;
    from_tokens(s, t, h, w)
}

/// Standard multi-head scaled dot-product self-attention over `[B,T,D]` tokens.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        init.scope(name, |i| {
            Ok(MultiHeadAttention {
                qkv: i.linear("qkv", d, 3 * d),
                out: i.linear_zero("out", d, d),
                heads,
            })
        })
    }

    /// `mask` is added to the `[T,T]` scores before the softmax.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, mask: Option<Var>) -> Result<Var> {
        let [b, t, d] = s.shape(x)[..] else {
            return Err(Error::InvalidArg("attention expects [B,T,D]".into()));
        };
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(s, x)?;
        let mut split = Vec::with_capacity(3);
        for part in 0..3 {
            let p = s.narrow(qkv, 2, part * d, d)?;
            let p = s.reshape(p, &[b, t, h, dh])?;
            let p = s.permute(p, &[0, 2, 1, 3])?;
            split.push(s.reshape(p, &[b * h, t, dh])?);
        }
        let ctx = s.attention(split[0], split[1], split[2], 1.0 / (dh as f32).sqrt(), mask)?;
        let ctx = s.reshape(ctx, &[b, h, t, dh])?;
        let ctx = s.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.reshape(ctx, &[b, t, d])?;
        self.out.forward(s, ctx)
    }
}

/// Two-layer GELU MLP with a zero-initialized second layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, hidden: usize) -> Self {
        init.scope(name, |i| Mlp {
            fc1: i.linear("fc1", d, hidden),
            fc2: i.linear_zero("fc2", hidden, d),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.gelu(h)?;
        self.fc2.forward(s, h)
    }
}

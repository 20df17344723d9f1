use super::{Op, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt_set, reflect_index, strides, Tensor};
use crate::wavelet;

/// Border handling for convolution and explicit padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// How the right operand of a binary op maps onto the left operand's elements.
#[derive(Clone, Debug)]
pub(crate) enum Bcast {
    Same,
    Scalar,
    /// The right operand covers one contiguous run of axes: `(i / inner) % size`.
    Block {
        inner: usize,
        size: usize,
    },
    Map(Vec<u32>),
}

impl Bcast {
    fn new(lhs: &[usize], rhs: &[usize], op: &'static str) -> Result<Bcast> {
        if lhs == rhs {
            return Ok(Bcast::Same);
        }
        if rhs.iter().product::<usize>() == 1 {
            return Ok(Bcast::Scalar);
        }
        if rhs.len() > lhs.len() {
            return Err(Error::shape(op, lhs, rhs));
        }
        let offset = lhs.len() - rhs.len();
        let mut rstr = vec![0usize; lhs.len()];
        let rs = strides(rhs);
        for (j, &d) in rhs.iter().enumerate() {
            let l = lhs[offset + j];
            if d == l {
                rstr[offset + j] = rs[j];
            } else if d != 1 {
                return Err(Error::shape(op, lhs, rhs));
            }
        }
        let live: Vec<usize> = (0..lhs.len()).filter(|&j| rstr[j] != 0).collect();
        let (first, last) = (live[0], live[live.len() - 1]);
        if live.len() == last - first + 1 {
            return Ok(Bcast::Block {
                inner: lhs[last + 1..].iter().product(),
                size: rhs.iter().product(),
            });
        }
        let n: usize = lhs.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; lhs.len()];
        let mut r = 0usize;
        for _ in 0..n {
            map.push(r as u32);
            for ax in (0..lhs.len()).rev() {
                idx[ax] += 1;
                r += rstr[ax];
                if idx[ax] < lhs[ax] {
                    break;
                }
                r -= rstr[ax] * lhs[ax];
                idx[ax] = 0;
            }
        }
        Ok(Bcast::Map(map))
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Block { inner, size } => (i / inner) % size,
            Bcast::Map(m) => m[i] as usize,
        }
    }
}

/// Precomputed gather table for a 2D convolution.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub groups: usize,
    /// `table[kidx * P + o]`: source pixel within an input plane, or -1 for zero padding.
    pub table: Vec<i32>,
}

impl ConvGeom {
    pub(crate) fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    pub(crate) fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    pub(crate) fn plane_out(&self) -> usize {
        self.ho * self.wo
    }
    pub(crate) fn is_pointwise(&self) -> bool {
        self.k == 1 && self.ho == self.h && self.wo == self.w
    }

    /// Fill `cols: [cin_g*k*k, P]` from the `cin_g` input planes of one group.
    pub(crate) fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let kk = self.k * self.k;
        let p = self.plane_out();
        let hw = self.h * self.w;
        for c in 0..self.cin_g() {
            let plane = &x[c * hw..(c + 1) * hw];
            for kidx in 0..kk {
                let row = &mut cols[(c * kk + kidx) * p..(c * kk + kidx + 1) * p];
                let tab = &self.table[kidx * p..(kidx + 1) * p];
                for (dst, &src) in row.iter_mut().zip(tab) {
                    *dst = if src < 0 { 0.0 } else { plane[src as usize] };
                }
            }
        }
    }

    pub(crate) fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let kk = self.k * self.k;
        let p = self.plane_out();
        let hw = self.h * self.w;
        for c in 0..self.cin_g() {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for kidx in 0..kk {
                let row = &cols[(c * kk + kidx) * p..(c * kk + kidx + 1) * p];
                let tab = &self.table[kidx * p..(kidx + 1) * p];
                for (&g, &src) in row.iter().zip(tab) {
                    if src >= 0 {
                        plane[src as usize] += g;
                    }
                }
            }
        }
    }
}

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f32::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let in_str = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_str: Vec<usize> = axes.iter().map(|&a| in_str[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if n == 0 || rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    let last = out_shape[rank - 1];
    let step = src_str[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n / last {
        if step == 1 {
            out.extend_from_slice(&data[src..src + last]);
        } else {
            out.extend((0..last).map(|j| data[src + j * step]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            src += src_str[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_str[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// `(outer, extent, inner)` split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap();
    (shape.iter().product::<usize>() / d, d)
}

impl Tape {
    fn grad_flag(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        mk: impl FnOnce(usize, usize, Bcast) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let av = &self.nodes[ia].value;
        let bv = &self.nodes[ib].value;
        let bc = Bcast::new(av.shape(), bv.shape(), name)?;
        let bd = bv.data();
        let out: Vec<f32> = av.data().iter().enumerate().map(|(i, &x)| f(x, bd[bc.at(i)])).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(t, mk(ia, ib, bc), rg))
    }

    /// `a + b`; `b` may broadcast into `a` (scalar, or right-aligned size-1 axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.nodes[ia].value.map(|x| x * s);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(t, Op::Scale(ia, s), rg))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, s: f32) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.nodes[ia].value.map(|x| x + s);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(t, Op::Offset(ia), rg))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let t = match kind {
            Unary::Relu => v.map(|x| x.max(0.0)),
            Unary::Gelu => v.map(gelu),
            Unary::Sigmoid => v.map(|x| 1.0 / (1.0 + (-x).exp())),
            Unary::Sqrt => v.map(|x| x.max(0.0).sqrt()),
            Unary::Square => v.map(|x| x * x),
            Unary::Exp => v.map(f32::exp),
        };
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(t, Op::Unary(ia, kind), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }
    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    /// `[M,K] · [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(
            m,
            k,
            n,
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            &mut out,
        );
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(ia, ib), rg))
    }

    /// Batched `[B,M,K] · [B,K,N] -> [B,M,N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        for i in 0..bs {
            gemm_nn(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(vec![bs, m, n], out), Op::Bmm(ia, ib), rg))
    }

    /// `softmax(scale · Q Kᵀ + mask) V` for `q: [B,T,D]`, `k: [B,S,D]`,
    /// `v: [B,S,E]` and an optional `[T,S]` additive mask shared by the batch.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f32, mask: Option<Var>) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let im = mask.map(|m| self.check(m)).transpose()?;
        let (sq, sk, sv) = (
            self.nodes[iq].value.shape(),
            self.nodes[ik].value.shape(),
            self.nodes[iv].value.shape(),
        );
        if sq.len() != 3
            || sk.len() != 3
            || sv.len() != 3
            || sq[0] != sk[0]
            || sk[0] != sv[0]
            || sq[2] != sk[2]
            || sk[1] != sv[1]
        {
            return Err(Error::shape("attention", sq, sk));
        }
        let (bs, t, d, sl, e) = (sq[0], sq[1], sq[2], sk[1], sv[2]);
        if let Some(im) = im {
            let sm = self.nodes[im].value.shape();
            if sm != [t, sl] {
                return Err(Error::shape("attention mask", sm, &[t, sl]));
            }
        }
        let mut ids = vec![iq, ik, iv];
        ids.extend(im);
        let rg = self.grad_flag(&ids);
        let (qd, kd, vd) = (
            self.nodes[iq].value.data(),
            self.nodes[ik].value.data(),
            self.nodes[iv].value.data(),
        );
        let md = im.map(|m| self.nodes[m].value.data());
        let mut out = vec![0.0; bs * t * e];
        let mut probs = if rg { vec![0.0; bs * t * sl] } else { Vec::new() };
        let mut buf = vec![0.0; t * sl];
        for b in 0..bs {
            gemm_nt_set(
                t,
                d,
                sl,
                &qd[b * t * d..(b + 1) * t * d],
                &kd[b * sl * d..(b + 1) * sl * d],
                &mut buf,
            );
            match md {
                Some(m) => buf.iter_mut().zip(m).for_each(|(x, &m)| *x = *x * scale + m),
                None => buf.iter_mut().for_each(|x| *x *= scale),
            }
            for row in buf.chunks_mut(sl) {
                softmax_row(row);
            }
            gemm_nn(
                t,
                sl,
                e,
                &buf,
                &vd[b * sl * e..(b + 1) * sl * e],
                &mut out[b * t * e..(b + 1) * t * e],
            );
            if rg {
                probs[b * t * sl..(b + 1) * t * sl].copy_from_slice(&buf);
            }
        }
        let op = Op::Attention {
            q: iq,
            k: ik,
            v: iv,
            mask: im,
            scale,
            probs,
        };
        Ok(self.push(Tensor::from_parts(vec![bs, t, e], out), op, rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].value.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::InvalidArg(format!("bad permutation {axes:?} for {shape:?}")));
        }
        let (data, out_shape) = permute_data(self.nodes[ia].value.data(), shape, axes);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(ia, axes.to_vec()), rg))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::InvalidArg("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.nodes[ia].value.reshape(shape)?;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(t, Op::Reshape(ia), rg))
    }

    /// Cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin/groups,k,k]`, "same"
    /// padding `(k-1)/2`, optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        mode: PadMode,
        groups: usize,
    ) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let xs = self.nodes[ix].value.shape().to_vec();
        let ws = self.nodes[iw].value.shape().to_vec();
        let [n, cin, h, wd] = xs[..] else {
            return Err(Error::InvalidArg(format!("conv2d input must be [N,C,H,W], got {xs:?}")));
        };
        let [cout, cin_g, k, k2] = ws[..] else {
            return Err(Error::InvalidArg(format!(
                "conv2d weight must be [Cout,Cin,k,k], got {ws:?}"
            )));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::InvalidArg(format!(
                "conv2d kernel must be square and odd, got {k}x{k2}"
            )));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::InvalidArg("conv2d stride and groups must be >= 1".into()));
        }
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [cout] {
                return Err(Error::shape("conv2d bias", &[cout], self.nodes[ib].value.shape()));
            }
        }
        let pad = (k - 1) / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut table = Vec::with_capacity(k * k * ho * wo);
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ixx = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && iy < h as isize && ixx >= 0 && ixx < wd as isize;
                        let src = if inside {
                            (iy as usize * wd + ixx as usize) as i32
                        } else {
                            match mode {
                                PadMode::Zero => -1,
                                PadMode::Reflect => (reflect_index(iy, h) * wd + reflect_index(ixx, wd)) as i32,
                            }
                        };
                        table.push(src);
                    }
                }
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            ho,
            wo,
            groups,
            table,
        };
        let out = conv_forward(
            &geom,
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|b| self.nodes[b].value.data()),
        );
        let mut ids = vec![ix, iw];
        ids.extend(ib);
        let rg = self.grad_flag(&ids);
        Ok(self.push(
            Tensor::from_parts(vec![n, cout, ho, wo], out),
            Op::Conv2d {
                x: ix,
                w: iw,
                bias: ib,
                geom,
            },
            rg,
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let (_, d) = rows_of(v.shape());
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(t, Op::Softmax(ia), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let (_, d) = rows_of(v.shape());
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f32>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(t, Op::LogSoftmax(ia), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let v = &self.nodes[ix].value;
        let (rows, d) = rows_of(v.shape());
        for p in [ig, ib] {
            if self.nodes[p].value.shape() != [d] {
                return Err(Error::shape("layer_norm", v.shape(), self.nodes[p].value.shape()));
            }
        }
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let xh = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.grad_flag(&[ix, ig, ib]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Rows scaled to unit L2 norm over the last axis. Rows with norm below `1e-8`
    /// map to the zero vector and pass no gradient.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let (rows, d) = rows_of(v.shape());
        let mut norms = vec![0.0; rows];
        let mut out = v.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let nrm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt() as f32;
            norms[r] = nrm;
            if nrm < ZERO_NORM {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= nrm);
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(t, Op::L2Normalize { x: ia, norms }, rg))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().map(|&x| x as f64).sum();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(Tensor::scalar(s as f32), Op::SumAll(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f32)
    }

    /// Sum along `axis`, keeping it as a size-1 axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if axis >= v.rank() {
            return Err(Error::InvalidArg(format!(
                "axis {axis} out of range for {:?}",
                v.shape()
            )));
        }
        let (outer, d, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let data = v.data();
        for o in 0..outer {
            for j in 0..d {
                let src = &data[(o * d + j) * inner..(o * d + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis(ia, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let d = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::InvalidArg(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / d as f32)
    }

    /// Maximum along `axis`, keeping it as a size-1 axis. Ties resolve to the first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if axis >= v.rank() {
            return Err(Error::InvalidArg(format!(
                "axis {axis} out of range for {:?}",
                v.shape()
            )));
        }
        let (outer, d, inner) = split_axis(v.shape(), axis);
        let data = v.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * d * inner + i;
                for j in 1..d {
                    let idx = (o * d + j) * inner + i;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = data[best];
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxAxis { x: ia, argmax }, rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return Err(Error::InvalidArg(format!(
                "narrow axis {axis} range {start}..{} invalid for {:?}",
                start + len,
                v.shape()
            )));
        }
        let (outer, d, inner) = split_axis(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Narrow { x: ia, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ids = xs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[*ids
            .first()
            .ok_or_else(|| Error::InvalidArg("concat of nothing".into()))?]
        .value
        .shape()
        .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArg(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let v = &self.nodes[i].value;
                let d = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.grad_flag(&ids);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { xs: ids, axis }, rg))
    }

    /// Pads the last two axes of `[N,C,H,W]` by `[top, bottom, left, right]`.
    pub fn pad2d(&mut self, a: Var, pads: [usize; 4], mode: PadMode) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let [n, c, h, w] = v.shape()[..] else {
            return Err(Error::InvalidArg(format!(
                "pad2d expects [N,C,H,W], got {:?}",
                v.shape()
            )));
        };
        let (ho, wo) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &v.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    if let Some(s) = pad_source(y, x, h, w, pads, mode) {
                        dst[y * wo + x] = src[s];
                    }
                }
            }
        }
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::Pad { x: ia, pads, mode },
            rg,
        ))
    }

    /// 2×2 average pooling with stride 2 on `[N,C,H,W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let [n, c, h, w] = v.shape()[..] else {
            return Err(Error::InvalidArg(format!(
                "avg_pool2 expects [N,C,H,W], got {:?}",
                v.shape()
            )));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddExtent { h, w });
        }
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &v.data()[p * h * w..(p + 1) * h * w];
            for y in 0..h2 {
                for x in 0..w2 {
                    out[p * h2 * w2 + y * w2 + x] = 0.25
                        * (src[2 * y * w + 2 * x]
                            + src[2 * y * w + 2 * x + 1]
                            + src[(2 * y + 1) * w + 2 * x]
                            + src[(2 * y + 1) * w + 2 * x + 1]);
                }
            }
        }
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(Tensor::from_parts(vec![n, c, h2, w2], out), Op::AvgPool2(ia), rg))
    }

    /// Haar analysis into the channel-packed `[N, 4C, H/2, W/2]` layout (LL|HL|LH|HH).
    pub fn haar_analysis(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let [n, c, h, w] = v.shape()[..] else {
            return Err(Error::InvalidArg(format!(
                "dwt2 expects [N,C,H,W], got {:?}",
                v.shape()
            )));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddExtent { h, w });
        }
        let out = wavelet::analysis_packed(v.data(), n, c, h, w);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(
            Tensor::from_parts(vec![n, 4 * c, h / 2, w / 2], out),
            Op::HaarAnalysis(ia),
            rg,
        ))
    }

    /// Inverse of [`Tape::haar_analysis`].
    pub fn haar_synthesis(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let [n, c4, h2, w2] = v.shape()[..] else {
            return Err(Error::InvalidArg(format!(
                "idwt2 expects [N,4C,h,w], got {:?}",
                v.shape()
            )));
        };
        if c4 % 4 != 0 {
            return Err(Error::ChunkError { channels: c4, parts: 4 });
        }
        let out = wavelet::synthesis_packed(v.data(), n, c4 / 4, h2, w2);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(
            Tensor::from_parts(vec![n, c4 / 4, 2 * h2, 2 * w2], out),
            Op::HaarSynthesis(ia),
            rg,
        ))
    }

    /// Rows `ids` of a `[V, D]` table, producing `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let v = &self.nodes[it].value;
        let [rows, d] = v.shape()[..] else {
            return Err(Error::InvalidArg(format!(
                "gather_rows expects [V,D], got {:?}",
                v.shape()
            )));
        };
        if ids.is_empty() {
            return Err(Error::InvalidArg("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArg(format!("row {bad} out of range for {rows} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[it].requires_grad;
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::GatherRows {
                table: it,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }
}

pub(crate) const ZERO_NORM: f32 = 1e-8;

/// `exp(x)` for `x <= 0`, written without branches or libm calls so loops over
/// it vectorize. Relative error stays below 3e-7; inputs below -87 flush to
/// about 1e-38.
#[inline(always)]
pub(crate) fn exp_nonpos(x: f32) -> f32 {
    const SHIFTER: f32 = 12_582_912.0;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let x = x.max(-87.0);
    let t = x * std::f32::consts::LOG2_E + SHIFTER;
    let n = t - SHIFTER;
    let k = (t.to_bits() as i32).wrapping_sub(SHIFTER.to_bits() as i32);
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    p * f32::from_bits(((k + 127) as u32) << 23)
}

pub(crate) fn softmax_row(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    row.iter_mut().for_each(|x| *x = exp_nonpos(*x - m));
    let s: f32 = row.iter().sum();
    let inv = 1.0 / s;
    row.iter_mut().for_each(|x| *x *= inv);
}

pub(crate) fn pad_source(y: usize, x: usize, h: usize, w: usize, pads: [usize; 4], mode: PadMode) -> Option<usize> {
    let sy = y as isize - pads[0] as isize;
    let sx = x as isize - pads[2] as isize;
    let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
    if inside {
        return Some(sy as usize * w + sx as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => Some(reflect_index(sy, h) * w + reflect_index(sx, w)),
    }
}

pub(crate) fn conv_forward(geom: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (cin_g, cout_g) = (geom.cin_g(), geom.cout_g());
    let kk = geom.k * geom.k;
    let p = geom.plane_out();
    let hw = geom.h * geom.w;
    let mut out = vec![0.0; geom.n * geom.cout * p];
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; cin_g * kk * p]
    };
    for n in 0..geom.n {
        for g in 0..geom.groups {
            let xg = &x[(n * geom.cin + g * cin_g) * hw..(n * geom.cin + (g + 1) * cin_g) * hw];
            let wg = &w[g * cout_g * cin_g * kk..(g + 1) * cout_g * cin_g * kk];
            let og = &mut out[(n * geom.cout + g * cout_g) * p..(n * geom.cout + (g + 1) * cout_g) * p];
            if let Some(b) = bias {
                for (oc, row) in og.chunks_mut(p).enumerate() {
                    row.fill(b[g * cout_g + oc]);
                }
            }
            if geom.is_pointwise() {
                gemm_nn(cout_g, cin_g, p, wg, xg, og);
            } else {
                geom.im2col(xg, &mut cols);
                gemm_nn(cout_g, cin_g * kk, p, wg, &cols, og);
            }
        }
    }
    out
}

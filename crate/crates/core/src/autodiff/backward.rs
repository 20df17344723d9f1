use super::ops::{gelu_grad, pad_source, permute_data, split_axis, ZERO_NORM};
use super::{Node, Op, Unary};
use crate::tensor::{gemm_nn, gemm_nt, gemm_nt_set, gemm_tn};
use crate::wavelet;

pub(super) fn inputs_of(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::Matmul(a, b) | Op::Bmm(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::Offset(a)
        | Op::Unary(a, _)
        | Op::Permute(a, _)
        | Op::Reshape(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::SumAll(a)
        | Op::SumAxis(a, _)
        | Op::AvgPool2(a)
        | Op::HaarAnalysis(a)
        | Op::HaarSynthesis(a) => vec![*a],
        Op::Conv2d { x, w, bias, .. } => {
            let mut v = vec![*x, *w];
            v.extend(bias);
            v
        }
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::L2Normalize { x, .. } | Op::MaxAxis { x, .. } | Op::Narrow { x, .. } | Op::Pad { x, .. } => {
            vec![*x]
        }
        Op::Concat { xs, .. } => xs.clone(),
        Op::Attention { q, k, v, mask, .. } => {
            let mut ids = vec![*q, *k, *v];
            ids.extend(mask);
            ids
        }
        Op::GatherRows { table, .. } => vec![*table],
    }
}

fn slot<'a>(work: &'a mut [Option<Vec<f32>>], nodes: &[Node], i: usize) -> Option<&'a mut Vec<f32>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let n = nodes[i].value.numel();
    Some(work[i].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(work: &mut [Option<Vec<f32>>], nodes: &[Node], i: usize, g: &[f32]) {
    if let Some(acc) = slot(work, nodes, i) {
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

/// Push the gradient `g` of node `i` onto its inputs.
pub(super) fn propagate(nodes: &[Node], i: usize, g: &[f32], work: &mut [Option<Vec<f32>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            add_into(work, nodes, *a, g);
            if let Some(gb) = slot(work, nodes, *b) {
                for (k, &gv) in g.iter().enumerate() {
                    gb[bc.at(k)] += sign * gv;
                }
            }
        }
        Op::Mul(a, b, bc) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = slot(work, nodes, *a) {
                for (k, &gv) in g.iter().enumerate() {
                    ga[k] += gv * bv[bc.at(k)];
                }
            }
            if let Some(gb) = slot(work, nodes, *b) {
                for (k, &gv) in g.iter().enumerate() {
                    gb[bc.at(k)] += gv * av[k];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(work, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &gv)| *x += s * gv);
            }
        }
        Op::Offset(a) | Op::Reshape(a) => add_into(work, nodes, *a, g),
        Op::Unary(a, kind) => {
            let x = nodes[*a].value.data();
            let y = out.data();
            if let Some(ga) = slot(work, nodes, *a) {
                for k in 0..g.len() {
                    let d = match kind {
                        Unary::Relu => {
                            if x[k] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Gelu => gelu_grad(x[k]),
                        Unary::Sigmoid => y[k] * (1.0 - y[k]),
                        Unary::Sqrt => {
                            if y[k] > 0.0 {
                                0.5 / y[k]
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * x[k],
                        Unary::Exp => y[k],
                    };
                    ga[k] += g[k] * d;
                }
            }
        }
        Op::Matmul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = slot(work, nodes, *a) {
                gemm_nt(m, n, k, g, bv, ga);
            }
            if let Some(gb) = slot(work, nodes, *b) {
                gemm_tn(k, m, n, av, g, gb);
            }
        }
        Op::Bmm(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = slot(work, nodes, *a) {
                for t in 0..bs {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g[t * m * n..(t + 1) * m * n],
                        &bv[t * k * n..(t + 1) * k * n],
                        &mut ga[t * m * k..(t + 1) * m * k],
                    );
                }
            }
            if let Some(gb) = slot(work, nodes, *b) {
                for t in 0..bs {
                    gemm_tn(
                        k,
                        m,
                        n,
                        &av[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        &mut gb[t * k * n..(t + 1) * k * n],
                    );
                }
            }
        }
        Op::Permute(a, axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inv[ax] = i;
            }
            let (back, _) = permute_data(g, out.shape(), &inv);
            add_into(work, nodes, *a, &back);
        }
        Op::Conv2d { x, w, bias, geom } => {
            let (cin_g, cout_g) = (geom.cin_g(), geom.cout_g());
            let kk = geom.k * geom.k;
            let p = geom.plane_out();
            let hw = geom.h * geom.w;
            let xv = nodes[*x].value.data();
            let wv = nodes[*w].value.data();
            if let Some(b) = bias {
                if let Some(gb) = slot(work, nodes, *b) {
                    for n in 0..geom.n {
                        for oc in 0..geom.cout {
                            let row = &g[(n * geom.cout + oc) * p..(n * geom.cout + oc + 1) * p];
                            gb[oc] += row.iter().sum::<f32>();
                        }
                    }
                }
            }
            let need_w = nodes[*w].requires_grad;
            let need_x = nodes[*x].requires_grad;
            let mut cols = vec![0.0; cin_g * kk * p];
            let mut dcols = vec![0.0; cin_g * kk * p];
            let mut gw_acc = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
            let mut gx_acc = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
            for n in 0..geom.n {
                for gi in 0..geom.groups {
                    let xoff = (n * geom.cin + gi * cin_g) * hw;
                    let xg = &xv[xoff..xoff + cin_g * hw];
                    let woff = gi * cout_g * cin_g * kk;
                    let wg = &wv[woff..woff + cout_g * cin_g * kk];
                    let goff = (n * geom.cout + gi * cout_g) * p;
                    let gg = &g[goff..goff + cout_g * p];
                    if geom.is_pointwise() {
                        if need_w {
                            gemm_nt(cout_g, p, cin_g, gg, xg, &mut gw_acc[woff..woff + cout_g * cin_g]);
                        }
                        if need_x {
                            gemm_tn(cin_g, cout_g, p, wg, gg, &mut gx_acc[xoff..xoff + cin_g * hw]);
                        }
                        continue;
                    }
                    if need_w {
                        geom.im2col(xg, &mut cols);
                        gemm_nt(
                            cout_g,
                            p,
                            cin_g * kk,
                            gg,
                            &cols,
                            &mut gw_acc[woff..woff + cout_g * cin_g * kk],
                        );
                    }
                    if need_x {
                        dcols.fill(0.0);
                        gemm_tn(cin_g * kk, cout_g, p, wg, gg, &mut dcols);
                        geom.col2im(&dcols, &mut gx_acc[xoff..xoff + cin_g * hw]);
                    }
                }
            }
            if need_w {
                add_into(work, nodes, *w, &gw_acc);
            }
            if need_x {
                add_into(work, nodes, *x, &gx_acc);
            }
        }
        Op::Softmax(a) => {
            let d = *out.shape().last().unwrap();
            if let Some(ga) = slot(work, nodes, *a) {
                for ((y, gr), dst) in out.data().chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dst[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            mask,
            scale,
            probs,
        } => {
            let (sq, sv) = (nodes[*q].value.shape(), nodes[*v].value.shape());
            let (bs, t, d, sl, e) = (sq[0], sq[1], sq[2], sv[1], sv[2]);
            let (qd, kd, vd) = (nodes[*q].value.data(), nodes[*k].value.data(), nodes[*v].value.data());
            let mut gq = vec![0.0; bs * t * d];
            let mut gk = vec![0.0; bs * sl * d];
            let mut gv = vec![0.0; bs * sl * e];
            let mut gm = vec![0.0; t * sl];
            let mut ds = vec![0.0; t * sl];
            for b in 0..bs {
                let p = &probs[b * t * sl..(b + 1) * t * sl];
                let gb = &g[b * t * e..(b + 1) * t * e];
                gemm_tn(sl, t, e, p, gb, &mut gv[b * sl * e..(b + 1) * sl * e]);
                gemm_nt_set(t, e, sl, gb, &vd[b * sl * e..(b + 1) * sl * e], &mut ds);
                for (dr, pr) in ds.chunks_mut(sl).zip(p.chunks(sl)) {
                    let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    dr.iter_mut().zip(pr).for_each(|(x, &y)| *x = y * (*x - dot));
                }
                gm.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
                ds.iter_mut().for_each(|x| *x *= scale);
                gemm_nn(
                    t,
                    sl,
                    d,
                    &ds,
                    &kd[b * sl * d..(b + 1) * sl * d],
                    &mut gq[b * t * d..(b + 1) * t * d],
                );
                gemm_tn(
                    sl,
                    t,
                    d,
                    &ds,
                    &qd[b * t * d..(b + 1) * t * d],
                    &mut gk[b * sl * d..(b + 1) * sl * d],
                );
            }
            let mut parts = vec![(*q, gq), (*k, gk), (*v, gv)];
            parts.extend(mask.map(|m| (m, gm)));
            for (i, gi) in parts {
                if let Some(dst) = slot(work, nodes, i) {
                    dst.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::LogSoftmax(a) => {
            let d = *out.shape().last().unwrap();
            if let Some(ga) = slot(work, nodes, *a) {
                for ((y, gr), dst) in out.data().chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                    let gs: f32 = gr.iter().sum();
                    for j in 0..d {
                        dst[j] += gr[j] - y[j].exp() * gs;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *out.shape().last().unwrap();
            let gam = nodes[*gamma].value.data();
            if let Some(gg) = slot(work, nodes, *gamma) {
                for (xh, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xh[j];
                    }
                }
            }
            if let Some(gb) = slot(work, nodes, *beta) {
                for gr in g.chunks(d) {
                    for j in 0..d {
                        gb[j] += gr[j];
                    }
                }
            }
            if let Some(gx) = slot(work, nodes, *x) {
                for (r, ((xh, gr), dst)) in xhat.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mut m1 = 0.0f32;
                    let mut m2 = 0.0f32;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= d as f32;
                    m2 /= d as f32;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        dst[j] += rstd[r] * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            let d = *out.shape().last().unwrap();
            if let Some(gx) = slot(work, nodes, *x) {
                for (r, ((y, gr), dst)) in out.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    if norms[r] < ZERO_NORM {
                        continue;
                    }
                    let dot: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dst[j] += (gr[j] - y[j] * dot) / norms[r];
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = slot(work, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::SumAxis(a, axis) => {
            let (outer, d, inner) = split_axis(nodes[*a].value.shape(), *axis);
            if let Some(ga) = slot(work, nodes, *a) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..d {
                        let dst = &mut ga[(o * d + j) * inner..(o * d + j + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        Op::MaxAxis { x, argmax, .. } => {
            if let Some(gx) = slot(work, nodes, *x) {
                for (k, &src) in argmax.iter().enumerate() {
                    gx[src] += g[k];
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, d, inner) = split_axis(nodes[*x].value.shape(), *axis);
            let len = out.shape()[*axis];
            if let Some(gx) = slot(work, nodes, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * d + start) * inner..(o * d + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut off = 0;
            for &xi in xs {
                let d = nodes[xi].value.shape()[*axis];
                if let Some(gx) = slot(work, nodes, xi) {
                    for o in 0..outer {
                        let src = &g[(o * total + off) * inner..(o * total + off + d) * inner];
                        let dst = &mut gx[o * d * inner..(o + 1) * d * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                off += d;
            }
        }
        Op::Pad { x, pads, mode } => {
            let s = nodes[*x].value.shape();
            let (h, w) = (s[2], s[3]);
            let (ho, wo) = (out.shape()[2], out.shape()[3]);
            let planes = s[0] * s[1];
            if let Some(gx) = slot(work, nodes, *x) {
                for p in 0..planes {
                    for y in 0..ho {
                        for xx in 0..wo {
                            if let Some(src) = pad_source(y, xx, h, w, *pads, *mode) {
                                gx[p * h * w + src] += g[p * ho * wo + y * wo + xx];
                            }
                        }
                    }
                }
            }
        }
        Op::AvgPool2(a) => {
            let s = nodes[*a].value.shape();
            let (h, w) = (s[2], s[3]);
            let (h2, w2) = (h / 2, w / 2);
            if let Some(ga) = slot(work, nodes, *a) {
                for p in 0..s[0] * s[1] {
                    for y in 0..h {
                        for x in 0..w {
                            ga[p * h * w + y * w + x] += 0.25 * g[p * h2 * w2 + (y / 2) * w2 + x / 2];
                        }
                    }
                }
            }
        }
        Op::HaarAnalysis(a) => {
            let s = out.shape();
            let back = wavelet::synthesis_packed(g, s[0], s[1] / 4, s[2], s[3]);
            add_into(work, nodes, *a, &back);
        }
        Op::HaarSynthesis(a) => {
            let s = out.shape();
            let back = wavelet::analysis_packed(g, s[0], s[1], s[2], s[3]);
            add_into(work, nodes, *a, &back);
        }
        Op::GatherRows { table, ids } => {
            let d = out.shape()[1];
            if let Some(gt) = slot(work, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

//! Multiscale spatial and wavelet-domain alignment losses.
//!
//! Each modality's two stage maps are projected into a shared embedding space in
//! three domains (spatial, LL, LH). Vision embeddings are pulled toward the text
//! embedding of their class and the two modalities are pulled toward each other.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;
use crate::text::TextMode;
use crate::vision::StageFeatures;
use crate::wavelet::dwt2_var;

pub const DOMAINS: [FeatureDomain; 3] = [FeatureDomain::Spatial, FeatureDomain::Ll, FeatureDomain::Lh];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureDomain {
    Spatial,
    Ll,
    Lh,
}

impl fmt::Display for FeatureDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureDomain::Spatial => "spatial",
            FeatureDomain::Ll => "ll",
            FeatureDomain::Lh => "lh",
        })
    }
}

/// Unit-row embeddings `[N, d_emb]` of one modality, indexed `[scale][domain]`.
#[derive(Clone, Copy, Debug)]
pub struct ModalityEmbeddings {
    pub e: [[Var; 3]; 2],
}

impl ModalityEmbeddings {
    pub fn get(&self, scale: usize, domain: FeatureDomain) -> Var {
        self.e[scale][domain as usize]
    }
}

/// One bias-free linear head per (scale, domain), shared by both modalities.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    heads: [[Linear; 3]; 2],
}

fn global_avg_pool(t: &mut Tape, x: Var) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(Error::InvalidArg(format!("expected [N,C,H,W], got {shape:?}")));
    };
    let flat = t.reshape(x, &[n, c, h * w])?;
    let m = t.mean_axis(flat, 2)?;
    t.reshape(m, &[n, c])
}

impl ProjectionHeads {
    pub fn new(init: &mut Init<'_>, name: &str, c_model: usize, d_emb: usize) -> Self {
        init.scope(name, |i| {
            let mut mk = |s: usize| DOMAINS.map(|d| i.linear_no_bias(&format!("s{}_{d}", s + 1), c_model, d_emb));
            let s1 = mk(0);
            let s2 = mk(1);
            ProjectionHeads { heads: [s1, s2] }
        })
    }

    /// Pooled, projected and normalized embeddings of both stage maps.
    pub fn project(&self, s: &mut Session<'_>, feats: &StageFeatures) -> Result<ModalityEmbeddings> {
        let mut e = [[None; 3]; 2];
        for (scale, f) in [feats.f1, feats.f2].into_iter().enumerate() {
            let sub = dwt2_var(s, f)?;
            let pooled = [f, sub.ll, sub.lh];
            for (k, &x) in pooled.iter().enumerate() {
                let g = global_avg_pool(s, x)?;
                let y = self.heads[scale][k].forward(s, g)?;
                e[scale][k] = Some(s.l2_normalize(y)?);
            }
        }
        Ok(ModalityEmbeddings {
            e: e.map(|row| row.map(Option::unwrap)),
        })
    }
}

/// Learnable inverse temperature stored as a log, capped at `LOGIT_SCALE_MAX`.
#[derive(Clone, Copy, Debug)]
pub struct LogitScale {
    pub id: ParamId,
}

pub const LOGIT_SCALE_MAX: f32 = 100.0;

impl LogitScale {
    pub fn new(init: &mut Init<'_>, name: &str) -> Self {
        LogitScale {
            id: init.add(name, Tensor::scalar((1.0f32 / 0.07).ln())),
        }
    }

    /// `exp(log_tau_inv)` as a `[1]` var. Above the cap the value is held at the cap
    /// and passes no gradient.
    pub fn forward(&self, s: &mut Session<'_>) -> Result<Var> {
        let cap = LOGIT_SCALE_MAX.ln();
        let log = if s.store().get(self.id).data()[0] > cap {
            s.constant(Tensor::scalar(cap))
        } else {
            s.param(self.id)
        };
        s.exp(log)
    }

    /// Pull the stored value back under the cap after an optimizer step.
    pub fn clamp(&self, store: &mut ParamStore) {
        let v = &mut store.get_mut(self.id).data_mut()[0];
        *v = v.min(LOGIT_SCALE_MAX.ln());
    }
}

fn nonzero_rows(t: &Tensor) -> Vec<bool> {
    let d = *t.shape().last().unwrap_or(&1);
    t.data().chunks(d.max(1)).map(|r| r.iter().any(|&x| x != 0.0)).collect()
}

fn check_pair(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape(op, sa, sb));
    }
    Ok(sa[0])
}

/// Mean cross-entropy of `logits: [N,K]` against per-row target distributions.
fn soft_cross_entropy(tape: &mut Tape, logits: Var, target: Tensor) -> Result<Var> {
    let n = tape.shape(logits)[0];
    let lp = tape.log_softmax(logits)?;
    let target = tape.constant(target);
    let prod = tape.mul(lp, target)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / n as f32)
}

/// Mean cross-entropy of `logits: [N,K]` against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [n, k] = shape[..] else {
        return Err(Error::InvalidArg(format!("cross_entropy expects [N,K], got {shape:?}")));
    };
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArg(format!("label {bad} outside {k} classes")));
    }
    let onehot = Tensor::from_fn(&[n, k], |i| if labels[i / k] == i % k { 1.0 } else { 0.0 });
    soft_cross_entropy(tape, logits, onehot)
}

/// Symmetric multi-positive InfoNCE on precomputed `logits: [N,N]`, where entry
/// `(i,j)` scores vision row `i` against text row `j`. Rows sharing a class are all
/// positives of each other, each with equal target mass.
pub fn contrastive_loss_from_logits(tape: &mut Tape, logits: Var, classes: &[usize]) -> Result<Var> {
    let n = classes.len();
    if tape.shape(logits) != [n, n] {
        return Err(Error::shape("contrastive_loss", tape.shape(logits), &[n, n]));
    }
    let count = |c: usize| classes.iter().filter(|&&x| x == c).count() as f32;
    let target = Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        if classes[i] == classes[j] {
            1.0 / count(classes[i])
        } else {
            0.0
        }
    });
    let rows = soft_cross_entropy(tape, logits, target.clone())?;
    let lt = tape.transpose_last2(logits)?;
    let cols = soft_cross_entropy(tape, lt, target)?;
    let both = tape.add(rows, cols)?;
    tape.scale(both, 0.5)
}

/// Contrastive loss between unit rows `v` and `t`, both `[N,d]`, with `t` holding
/// the text embedding of each sample's class. Zero rows in either input drop out;
/// if nothing remains the loss is a constant zero.
pub fn contrastive_loss(tape: &mut Tape, v: Var, t: Var, classes: &[usize], scale: Var) -> Result<Var> {
    let n = check_pair("contrastive_loss", tape, v, t)?;
    if classes.len() != n {
        return Err(Error::shape("contrastive_loss", &[n], &[classes.len()]));
    }
    let (nv, nt) = (nonzero_rows(tape.value(v)), nonzero_rows(tape.value(t)));
    let keep: Vec<usize> = (0..n).filter(|&i| nv[i] && nt[i]).collect();
    if keep.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (v, t) = if keep.len() == n {
        (v, t)
    } else {
        (tape.gather_rows(v, &keep)?, tape.gather_rows(t, &keep)?)
    };
    let classes: Vec<usize> = keep.iter().map(|&i| classes[i]).collect();
    let tt = tape.transpose_last2(t)?;
    let sim = tape.matmul(v, tt)?;
    let logits = tape.mul(sim, scale)?;
    contrastive_loss_from_logits(tape, logits, &classes)
}

/// Mean of `1 - cos` over paired unit rows. Pairs where either row is zero drop out.
pub fn vv_cosine_loss(tape: &mut Tape, e1: Var, e2: Var) -> Result<Var> {
    let n = check_pair("vv_cosine_loss", tape, e1, e2)?;
    let (a, b) = (nonzero_rows(tape.value(e1)), nonzero_rows(tape.value(e2)));
    let keep: Vec<usize> = (0..n).filter(|&i| a[i] && b[i]).collect();
    if keep.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (e1, e2) = if keep.len() == n {
        (e1, e2)
    } else {
        (tape.gather_rows(e1, &keep)?, tape.gather_rows(e2, &keep)?)
    };
    let prod = tape.mul(e1, e2)?;
    let cos = tape.sum_axis(prod, 1)?;
    let m = tape.mean(cos)?;
    let neg = tape.scale(m, -1.0)?;
    tape.offset(neg, 1.0)
}

/// Class text embeddings `[K, d_emb]` per scope; absent scopes are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct TextEmbeddings {
    pub shared: Option<Var>,
    pub specific: Option<[Var; 2]>,
}

impl TextEmbeddings {
    /// Split the encoder output for [`crate::text::build_class_texts`] under `mode`,
    /// which is laid out class-major.
    pub fn split(tape: &mut Tape, all: Var, classes: usize, mode: TextMode) -> Result<Self> {
        let per = match mode {
            TextMode::None => return Ok(TextEmbeddings::default()),
            TextMode::Shared => 1,
            TextMode::Specific => 2,
            TextMode::SharedSpecific => 3,
        };
        if tape.shape(all)[0] != classes * per {
            return Err(Error::shape("text embeddings", tape.shape(all), &[classes * per]));
        }
        let mut pick = |slot: usize| tape.gather_rows(all, &(0..classes).map(|k| k * per + slot).collect::<Vec<_>>());
        Ok(match mode {
            TextMode::None => unreachable!(),
            TextMode::Shared => TextEmbeddings {
                shared: Some(pick(0)?),
                specific: None,
            },
            TextMode::Specific => TextEmbeddings {
                shared: None,
                specific: Some([pick(0)?, pick(1)?]),
            },
            TextMode::SharedSpecific => TextEmbeddings {
                shared: Some(pick(0)?),
                specific: Some([pick(1)?, pick(2)?]),
            },
        })
    }
}

/// Which alignment terms enter the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignConfig {
    pub vision_text: bool,
    pub vision_vision: bool,
    pub domains: [bool; 3],
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            vision_text: true,
            vision_vision: true,
            domains: [true; 3],
        }
    }
}

impl AlignConfig {
    /// Classification loss only.
    pub fn off() -> Self {
        AlignConfig {
            vision_text: false,
            vision_vision: false,
            domains: [false; 3],
        }
    }
}

/// Named loss components; their sum is the total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub terms: Vec<(String, f32)>,
}

impl LossBreakdown {
    pub fn sum(&self) -> f64 {
        self.terms.iter().map(|(_, v)| *v as f64).sum()
    }

    pub fn get(&self, name: &str) -> Option<f32> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Unit-weight sum of both classifiers' cross-entropy, every enabled vision-text
/// contrastive term and every enabled vision-vision cosine term.
pub fn total_loss(
    tape: &mut Tape,
    emb: &[ModalityEmbeddings; 2],
    text: &TextEmbeddings,
    cls_logits: [Var; 2],
    labels: &[usize],
    scale: Var,
    cfg: &AlignConfig,
) -> Result<(Var, LossBreakdown)> {
    let mut parts: Vec<(String, Var)> = Vec::new();
    for (m, &logits) in cls_logits.iter().enumerate() {
        parts.push((format!("ce/m{}", m + 1), cross_entropy(tape, logits, labels)?));
    }
    for scale_ix in 0..2 {
        for d in DOMAINS {
            if !cfg.domains[d as usize] {
                continue;
            }
            if cfg.vision_text {
                for (m, e) in emb.iter().enumerate() {
                    let v = e.get(scale_ix, d);
                    let scopes = [("specific", text.specific.map(|s| s[m])), ("shared", text.shared)];
                    for (tag, table) in scopes {
                        let Some(table) = table else { continue };
                        let t = tape.gather_rows(table, labels)?;
                        let l = contrastive_loss(tape, v, t, labels, scale)?;
                        parts.push((format!("vt/m{}/s{}/{d}/{tag}", m + 1, scale_ix + 1), l));
                    }
                }
            }
            if cfg.vision_vision {
                let l = vv_cosine_loss(tape, emb[0].get(scale_ix, d), emb[1].get(scale_ix, d))?;
                parts.push((format!("vv/s{}/{d}", scale_ix + 1), l));
            }
        }
    }
    let mut total = parts[0].1;
    for &(_, v) in &parts[1..] {
        total = tape.add(total, v)?;
    }
    let terms = parts.into_iter().map(|(n, v)| (n, tape.value(v).data()[0])).collect();
    Ok((total, LossBreakdown { terms }))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&[n, d], &mut rng);
        let mut data = t.data().to_vec();
        for r in data.chunks_mut(d) {
            let s = r.iter().map(|x| x * x).sum::<f32>().sqrt();
            r.iter_mut().for_each(|x| *x /= s);
        }
        Tensor::new(&[n, d], data).unwrap()
    }

    #[test]
    fn constant_map_projects_to_ll_direction_and_zero_lh() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = ProjectionHeads::new(&mut Init::new(&mut store, &mut rng), "heads", 3, 5);
        let level = [0.5f32, -1.0, 2.0];
        let map = Tensor::from_fn(&[1, 3, 4, 4], |i| level[i / 16]);
        let mut s = Session::new(&store, false);
        let f = s.constant(map);
        let e = heads.project(&mut s, &StageFeatures { f1: f, f2: f }).unwrap();
        for scale in 0..2 {
            let w = store.get(heads.heads[scale][1].w);
            let raw: Vec<f64> = (0..5)
                .map(|j| (0..3).map(|i| 2.0 * level[i] as f64 * w.get(&[i, j]) as f64).sum())
                .collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ll = s.value(e.get(scale, FeatureDomain::Ll));
            for (got, want) in ll.data().iter().zip(&raw) {
                assert!((*got as f64 - want / norm).abs() <= 1e-5);
            }
            assert!(s
                .value(e.get(scale, FeatureDomain::Lh))
                .data()
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn uniform_embeddings_give_ln_n() {
        for n in [2usize, 4, 8] {
            let mut tape = Tape::new();
            let row = unit_rows(1, 6, 1);
            let all = Tensor::new(&[n, 6], row.data().repeat(n)).unwrap();
            let v = tape.constant(all.clone());
            let t = tape.constant(all);
            let scale = tape.constant(Tensor::scalar(1.0 / 0.07));
            let classes: Vec<usize> = (0..n).collect();
            let l = contrastive_loss(&mut tape, v, t, &classes, scale).unwrap();
            let got = tape.value(l).data()[0] as f64;
            assert!((got - (n as f64).ln()).abs() <= 1e-6, "n={n}: {got}");
        }
    }

    #[test]
    fn hand_logits_match_closed_form() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap());
        let l = contrastive_loss_from_logits(&mut tape, logits, &[0, 1]).unwrap();
        let expect = (1.0f64 + (-2.0f64).exp()).ln();
        assert!((tape.value(l).data()[0] as f64 - expect).abs() <= 1e-6);
    }

    #[test]
    fn separable_limit_goes_to_zero() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let scale = tape.constant(Tensor::scalar(100.0));
        let l = contrastive_loss(&mut tape, e, e, &[0, 1], scale).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);
    }

    #[test]
    fn zero_rows_drop_out() {
        let mut tape = Tape::new();
        let mut data = unit_rows(3, 4, 2).data().to_vec();
        data[8..12].fill(0.0);
        let v = tape.constant(Tensor::new(&[3, 4], data.clone()).unwrap());
        let t = tape.constant(unit_rows(3, 4, 3));
        let scale = tape.constant(Tensor::scalar(5.0));
        let full = contrastive_loss(&mut tape, v, t, &[0, 1, 2], scale).unwrap();
        let v2 = tape.constant(Tensor::new(&[2, 4], data[..8].to_vec()).unwrap());
        let t2 = tape.constant(Tensor::new(&[2, 4], tape.value(t).data()[..8].to_vec()).unwrap());
        let sub = contrastive_loss(&mut tape, v2, t2, &[0, 1], scale).unwrap();
        assert_eq!(tape.value(full).data(), tape.value(sub).data());
    }

    #[test]
    fn vv_cosine_cases() {
        let mut tape = Tape::new();
        let a = unit_rows(5, 4, 4);
        let e1 = tape.constant(a.clone());
        let e2 = tape.constant(a.map(|x| -x));
        let same = vv_cosine_loss(&mut tape, e1, e1).unwrap();
        let anti = vv_cosine_loss(&mut tape, e1, e2).unwrap();
        assert!(tape.value(same).data()[0].abs() < 1e-6);
        assert!((tape.value(anti).data()[0] - 2.0).abs() < 1e-6);
        let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.constant(Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let orth = vv_cosine_loss(&mut tape, x, y).unwrap();
        assert_eq!(tape.value(orth).data()[0], 1.0);
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let l = cross_entropy(&mut tape, logits, &[2]).unwrap();
        let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((tape.value(l).data()[0] as f64 - (lse - 3.0)).abs() < 1e-6);
        assert!(cross_entropy(&mut tape, logits, &[3]).is_err());
    }

    #[test]
    fn logit_scale_is_capped() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ls = LogitScale::new(&mut Init::new(&mut store, &mut rng), "logit_scale");
        {
            let mut s = Session::new(&store, true);
            let v = ls.forward(&mut s).unwrap();
            assert!((s.value(v).data()[0] - 1.0 / 0.07).abs() < 1e-3);
        }
        store.get_mut(ls.id).data_mut()[0] = 10.0;
        let mut s = Session::new(&store, true);
        let v = ls.forward(&mut s).unwrap();
        assert!((s.value(v).data()[0] - LOGIT_SCALE_MAX).abs() < 1e-3);
        drop(s);
        ls.clamp(&mut store);
        assert!(store.get(ls.id).data()[0] <= LOGIT_SCALE_MAX.ln());
    }
}

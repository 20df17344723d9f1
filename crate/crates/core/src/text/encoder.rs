//! Small causal transformer over BPE tokens, pooled at the EOS position.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Mlp, MultiHeadAttention, Norm};
use crate::params::{ParamId, Session};
use crate::tensor::Tensor;

use super::bpe::CONTEXT_LEN;

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_emb: usize,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize, d_emb: usize) -> Self {
        TextEncoderConfig {
            vocab_size,
            width: 128,
            heads: 4,
            layers: 2,
            d_emb,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    attn: MultiHeadAttention,
    norm2: Norm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
    proj: Linear,
}

const MASKED: f32 = -1e9;

impl TextEncoder {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &TextEncoderConfig) -> Result<Self> {
        let d = cfg.width;
        init.scope(name, |i| {
            let tok = Tensor::randn(&[cfg.vocab_size, d], i.rng).map(|v| 0.02 * v);
            let pos = Tensor::randn(&[CONTEXT_LEN, d], i.rng).map(|v| 0.01 * v);
            let tok = i.add("tok", tok);
            let pos = i.add("pos", pos);
            let blocks = (0..cfg.layers)
                .map(|l| {
                    i.scope(&format!("block{l}"), |b| {
                        Ok(Block {
                            norm1: b.norm("norm1", d),
                            attn: MultiHeadAttention::new(b, "attn", d, cfg.heads)?,
                            norm2: b.norm("norm2", d),
                            mlp: Mlp::new(b, "mlp", d, 4 * d),
                        })
                    })
                })
                .collect::<Result<_>>()?;
            Ok(TextEncoder {
                cfg: cfg.clone(),
                tok,
                pos,
                blocks,
                norm: i.norm("norm", d),
                proj: i.linear("proj", d, cfg.d_emb),
            })
        })
    }

    /// Unit-norm embeddings `[B, d_emb]`, one per sequence. Each sequence is read up
    /// to and including its last token, which is expected to be EOS.
    pub fn forward(&self, s: &mut Session<'_>, seqs: &[Vec<usize>]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::InvalidArg("no sequences to encode".into()));
        }
        for q in seqs {
            if q.is_empty() {
                return Err(Error::InvalidArg("empty token sequence".into()));
            }
            if q.len() > CONTEXT_LEN {
                return Err(Error::ContextOverflow {
                    len: q.len(),
                    max: CONTEXT_LEN,
                });
            }
            if let Some(&bad) = q.iter().find(|&&t| t >= self.cfg.vocab_size) {
                return Err(Error::InvalidArg(format!("token id {bad} outside vocabulary")));
            }
        }
        let b = seqs.len();
        let t = seqs.iter().map(Vec::len).max().unwrap();
        let d = self.cfg.width;
        let ids: Vec<usize> = seqs
            .iter()
            .flat_map(|q| q.iter().copied().chain(std::iter::repeat_n(0, t - q.len())))
            .collect();
        let tok = s.param(self.tok);
        let x = s.gather_rows(tok, &ids)?;
        let x = s.reshape(x, &[b, t, d])?;
        let pos = s.param(self.pos);
        let pos = s.narrow(pos, 0, 0, t)?;
        let mut x = s.add(x, pos)?;
        let mask = Tensor::from_fn(&[t, t], |i| if i % t > i / t { MASKED } else { 0.0 });
        let mask = s.constant(mask);
        for blk in &self.blocks {
            let n = blk.norm1.forward(s, x)?;
            let a = blk.attn.forward(s, n, Some(mask))?;
            x = s.add(x, a)?;
            let n = blk.norm2.forward(s, x)?;
            let m = blk.mlp.forward(s, n)?;
            x = s.add(x, m)?;
        }
        let x = self.norm.forward(s, x)?;
        let flat = s.reshape(x, &[b * t, d])?;
        let rows: Vec<usize> = seqs.iter().enumerate().map(|(i, q)| i * t + q.len() - 1).collect();
        let pooled = s.gather_rows(flat, &rows)?;
        let e = self.proj.forward(s, pooled)?;
        s.l2_normalize(e)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::ParamStore;
    use crate::text::BpeVocab;

    fn small() -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TextEncoderConfig {
            vocab_size: 300,
            width: 16,
            heads: 4,
            layers: 2,
            d_emb: 8,
        };
        let enc = TextEncoder::new(&mut Init::new(&mut store, &mut rng), "tte", &cfg).unwrap();
        for v in store.values_mut() {
            let n = Tensor::uniform(v.shape(), -0.3, 0.3, &mut rng);
            *v = Tensor::new(v.shape(), v.data().iter().zip(n.data()).map(|(a, b)| a + b).collect()).unwrap();
        }
        (store, enc)
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let (store, enc) = small();
        let mut s = Session::new(&store, false);
        let e = enc
            .forward(&mut s, &[vec![298, 5, 299], vec![298, 1, 2, 3, 4, 299]])
            .unwrap();
        for row in s.value(e).data().chunks(8) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn tokens_after_eos_do_not_matter() {
        let (store, enc) = small();
        let mut s = Session::new(&store, false);
        let a = enc.forward(&mut s, &[vec![298, 7, 9, 299]]).unwrap();
        let b = enc
            .forward(&mut s, &[vec![298, 7, 9, 299], vec![298, 7, 9, 299, 11, 12, 13]])
            .unwrap();
        let row0 = s.value(a).data().to_vec();
        let out = s.value(b).data().to_vec();
        assert_eq!(&out[..8], &row0[..]);
    }

    #[test]
    fn padding_after_eos_is_ignored_by_pooling() {
        let (store, enc) = small();
        let mut s = Session::new(&store, false);
        let a = enc.forward(&mut s, &[vec![298, 7, 9, 299]]).unwrap();
        let base = s.value(a).data().to_vec();
        // the batch pads the short sequence to the longest length
        let b = enc
            .forward(&mut s, &[vec![298, 1, 2, 3, 4, 5, 6, 299], vec![298, 7, 9, 299]])
            .unwrap();
        let got = &s.value(b).data()[8..];
        for (x, y) in got.iter().zip(&base) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn context_overflow() {
        let (store, enc) = small();
        let mut s = Session::new(&store, false);
        let long = vec![1usize; CONTEXT_LEN + 1];
        assert!(matches!(
            enc.forward(&mut s, &[long]),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn catalog_texts_fit_default_vocab() {
        let v = BpeVocab::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TextEncoderConfig::new(v.vocab_size(), 16);
        let enc = TextEncoder::new(&mut Init::new(&mut store, &mut rng), "tte", &cfg).unwrap();
        let seqs: Vec<Vec<usize>> = crate::text::build_class_texts(&Default::default(), Default::default())
            .iter()
            .map(|t| v.encode(&t.text))
            .collect();
        let mut s = Session::new(&store, false);
        let e = enc.forward(&mut s, &seqs).unwrap();
        assert_eq!(s.shape(e), &[9, 16]);
    }
}

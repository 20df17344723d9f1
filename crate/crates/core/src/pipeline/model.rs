//! The full two-modality network assembled from a [`RunConfig`], and its on-disk form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{
    total_loss, AlignConfig, LogitScale, LossBreakdown, ModalityEmbeddings, ProjectionHeads, TextEmbeddings,
};
use crate::autodiff::{PadMode, Var};
use crate::disentangle::{Mwdis, MwdisConfig, ResampleConfig};
use crate::error::{Error, Result};
use crate::fileio::{read_text, write_bytes};
use crate::nn::{Init, Linear};
use crate::params::{ParamStore, Session};
use crate::text::{build_class_texts, BpeVocab, TextCatalog, TextEncoder, TextEncoderConfig, TextMode};
use crate::vision::{EncoderConfig, Sfie};

use super::config::{ClassifierInput, RunConfig};

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub run: RunConfig,
    pub c_m1: usize,
    pub c_m2: usize,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForwardMode {
    /// Resampling in MWDis is live with the given seed.
    Train {
        seed: u64,
    },
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub emb: [ModalityEmbeddings; 2],
    /// Class scores `[N, K]` from each modality's classifier.
    pub scores: [Var; 2],
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    mwdis: Option<Mwdis>,
    encoders: [Sfie; 2],
    heads: ProjectionHeads,
    classifiers: [Linear; 2],
    text: Option<(TextEncoder, Vec<Vec<usize>>)>,
    logit_scale: Option<LogitScale>,
}

impl Model {
    /// Build the model and register freshly initialized parameters in `store`.
    pub fn new(store: &mut ParamStore, spec: ModelSpec, seed: u64) -> Result<Self> {
        let run = &spec.run;
        run.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(store, &mut rng);
        let mwdis = run.mwdis.then(|| Mwdis::new(&mut init, "mwdis", spec.c_m1, spec.c_m2));
        let enc = |init: &mut Init<'_>, name: &str, c_in: usize| {
            let cfg = EncoderConfig {
                c_in,
                c_model: run.c_model,
                heads_spatial: run.heads,
                frgcm: run.sfie,
                wavelet: run.sfie,
            };
            Sfie::new(init, name, &cfg)
        };
        let encoders = [
            enc(&mut init, "enc_m1", spec.c_m1)?,
            enc(&mut init, "enc_m2", spec.c_m2)?,
        ];
        let heads = ProjectionHeads::new(&mut init, "heads", run.c_model, run.d_emb);
        let d_cls = match run.classifier_input {
            ClassifierInput::Concat => 2 * run.d_emb,
            _ => run.d_emb,
        };
        let classifiers = [
            init.linear("cls_m1", d_cls, spec.classes),
            init.linear("cls_m2", d_cls, spec.classes),
        ];
        let use_text = run.msffa && run.text_mode != TextMode::None;
        let text = if use_text {
            let vocab = BpeVocab::default();
            let catalog = TextCatalog::default();
            if catalog.entries.len() != spec.classes {
                return Err(Error::Config(format!(
                    "text catalog describes {} classes, data has {}",
                    catalog.entries.len(),
                    spec.classes
                )));
            }
            let seqs = build_class_texts(&catalog, run.text_mode)
                .iter()
                .map(|t| vocab.encode(&t.text))
                .collect();
            let cfg = TextEncoderConfig {
                width: run.text_width,
                ..TextEncoderConfig::new(vocab.vocab_size(), run.d_emb)
            };
            Some((TextEncoder::new(&mut init, "text", &cfg)?, seqs))
        } else {
            None
        };
        let logit_scale = run.msffa.then(|| LogitScale::new(&mut init, "logit_scale"));
        Ok(Model {
            spec,
            mwdis,
            encoders,
            heads,
            classifiers,
            text,
            logit_scale,
        })
    }

    pub fn logit_scale(&self) -> Option<LogitScale> {
        self.logit_scale
    }

    /// Embeddings and class scores for patch inputs `[N,C,p,p]`.
    pub fn forward(&self, s: &mut Session<'_>, x1: Var, x2: Var, mode: ForwardMode) -> Result<Forward> {
        let (mut x1, mut x2) = (x1, x2);
        if let Some(mw) = &self.mwdis {
            let alpha = match mode {
                ForwardMode::Train { .. } => Some(self.spec.run.alpha),
                ForwardMode::Eval => self.spec.run.mwdis_at_test.then_some(0.0),
            };
            if let Some(alpha) = alpha {
                let seed = match mode {
                    ForwardMode::Train { seed } => seed,
                    ForwardMode::Eval => 0,
                };
                let (h, w) = (s.shape(x1)[2], s.shape(x1)[3]);
                let pads = [0, h % 2, 0, w % 2];
                if pads != [0; 4] {
                    x1 = s.pad2d(x1, pads, PadMode::Reflect)?;
                    x2 = s.pad2d(x2, pads, PadMode::Reflect)?;
                }
                let cfg = MwdisConfig {
                    resample: ResampleConfig::new(alpha, seed)?,
                    attn_bypass: None,
                };
                (x1, x2) = mw.forward(s, x1, x2, &cfg)?;
            }
        }
        let mut emb = Vec::with_capacity(2);
        for (enc, x) in self.encoders.iter().zip([x1, x2]) {
            let f = enc.forward(s, x)?;
            emb.push(self.heads.project(s, &f)?);
        }
        let emb = [emb[0], emb[1]];
        let mut scores = Vec::with_capacity(2);
        for (cls, e) in self.classifiers.iter().zip(&emb) {
            let input = match self.spec.run.classifier_input {
                ClassifierInput::Scale1 => e.e[0][0],
                ClassifierInput::Scale2 => e.e[1][0],
                ClassifierInput::Concat => s.concat(&[e.e[0][0], e.e[1][0]], 1)?,
            };
            scores.push(cls.forward(s, input)?);
        }
        Ok(Forward {
            emb,
            scores: [scores[0], scores[1]],
        })
    }

    /// Total training loss for one forward pass. Without the alignment module this
    /// is the classifiers' cross-entropy alone.
    pub fn loss(&self, s: &mut Session<'_>, fwd: &Forward, labels: &[usize]) -> Result<(Var, LossBreakdown)> {
        let run = &self.spec.run;
        let text = match &self.text {
            Some((enc, seqs)) => {
                let all = enc.forward(s, seqs)?;
                TextEmbeddings::split(s, all, self.spec.classes, run.text_mode)?
            }
            None => TextEmbeddings::default(),
        };
        let (cfg, scale) = match self.logit_scale {
            Some(ls) => (
                AlignConfig {
                    vision_text: self.text.is_some(),
                    ..AlignConfig::default()
                },
                ls.forward(s)?,
            ),
            None => (AlignConfig::off(), s.constant(crate::tensor::Tensor::scalar(1.0))),
        };
        total_loss(s, &fwd.emb, &text, fwd.scores, labels, scale, &cfg)
    }

    /// Write `config.txt`, `model.txt` and `weights.bin` into `dir`.
    pub fn save(&self, store: &ParamStore, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_bytes(&dir.join("config.txt"), self.spec.run.to_config_string().as_bytes())?;
        let mut m = String::new();
        writeln!(m, "c_m1 = {}", self.spec.c_m1).unwrap();
        writeln!(m, "c_m2 = {}", self.spec.c_m2).unwrap();
        writeln!(m, "classes = {}", self.spec.classes).unwrap();
        write_bytes(&dir.join("model.txt"), m.as_bytes())?;
        store.save(&dir.join("weights.bin"))
    }

    pub fn load(dir: &Path) -> Result<(Model, ParamStore)> {
        let run = RunConfig::load(&dir.join("config.txt"))?;
        let text = read_text(&dir.join("model.txt"))?;
        let mut dims = [None; 3];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("model.txt: bad line {line:?}")))?;
            let slot = match k.trim() {
                "c_m1" => 0,
                "c_m2" => 1,
                "classes" => 2,
                other => return Err(Error::Data(format!("model.txt: unknown key {other:?}"))),
            };
            dims[slot] = Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Data(format!("model.txt {k}: {e}")))?,
            );
        }
        let [Some(c_m1), Some(c_m2), Some(classes)] = dims else {
            return Err(Error::Data("model.txt is missing a dimension".into()));
        };
        let spec = ModelSpec {
            run,
            c_m1,
            c_m2,
            classes,
        };
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, spec, 0)?;
        store.load_into(&dir.join("weights.bin"))?;
        Ok((model, store))
    }
}

//! Training on the source scene and evaluation on an unseen scene.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::LossBreakdown;
use crate::augment::{augment, load_diffusion_features, prepare_scene, AugmentConfig, PatchBatch, PreparedScene};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, AdamState};
use crate::params::{ParamStore, Session};
use crate::scene::{read_scene, Domain, SceneCube};
use crate::tensor::Tensor;

use super::config::{RunConfig, Sampling};
use super::metrics::Metrics;
use super::model::{ForwardMode, Model, ModelSpec};

/// Auxiliary reconstructed channels for each modality, if available.
#[derive(Clone, Debug, Default)]
pub struct AuxFeatures {
    pub hs: Option<Tensor>,
    pub lidar: Option<Tensor>,
}

impl AuxFeatures {
    pub fn load(hs: Option<&std::path::Path>, lidar: Option<&std::path::Path>, grid: (usize, usize)) -> Result<Self> {
        Ok(AuxFeatures {
            hs: hs.map(|p| load_diffusion_features(p, Some(grid))).transpose()?,
            lidar: lidar.map(|p| load_diffusion_features(p, Some(grid))).transpose()?,
        })
    }
}

/// Scene preprocessing as configured: per-modality PCA plus reconstructed
/// channels, or the raw modalities, then [`standardize_modality`] on each.
pub fn preprocess(cfg: &RunConfig, scene: &SceneCube, aux: &AuxFeatures) -> Result<PreparedScene> {
    let k = cfg.dtaug.then_some(cfg.pca_components);
    let p = prepare_scene(scene, k, aux.hs.as_ref(), aux.lidar.as_ref())?;
    Ok(PreparedScene {
        m1: standardize_modality(&p.m1),
        m2: standardize_modality(&p.m2),
    })
}

/// Shift and scale a whole `[C,H,W]` modality by one scalar mean and std taken
/// over all of its values, so relative band levels are kept. A constant input
/// is only centered.
pub fn standardize_modality(x: &Tensor) -> Tensor {
    let n = x.numel().max(1) as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var.sqrt() < 1e-12 { 1.0 } else { 1.0 / var.sqrt() };
    x.map(|v| ((v as f64 - mean) * inv) as f32)
}

/// Labeled pixels used for training. Stratified sampling takes
/// `ceil(fraction · n_c)` pixels of every class; uniform sampling takes
/// `round(fraction · n)` pixels overall. At least one pixel is always taken.
pub fn sample_training_pixels(
    scene: &SceneCube,
    fraction: f64,
    sampling: Sampling,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = scene.labeled_pixels();
    if pixels.is_empty() {
        return Err(Error::Data("scene has no labeled pixels".into()));
    }
    Ok(match sampling {
        Sampling::Uniform => {
            let mut all = pixels;
            all.shuffle(&mut rng);
            let n = ((fraction * all.len() as f64).round() as usize).clamp(1, all.len());
            all.truncate(n);
            all
        }
        Sampling::Stratified => {
            let mut out = Vec::new();
            for k in 0..scene.classes {
                let mut of_k: Vec<_> = pixels
                    .iter()
                    .copied()
                    .filter(|&(r, c)| scene.label(r, c) == k as i32)
                    .collect();
                if of_k.is_empty() {
                    continue;
                }
                of_k.shuffle(&mut rng);
                let n = ((fraction * of_k.len() as f64).ceil() as usize).clamp(1, of_k.len());
                out.extend_from_slice(&of_k[..n]);
            }
            out
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
    pub breakdown: LossBreakdown,
}

pub struct TrainedModel {
    pub model: Model,
    pub store: ParamStore,
    pub trace: Vec<StepLog>,
}

impl TrainedModel {
    /// Mean loss of each epoch, in order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.trace.last().map_or(0, |s| s.epoch + 1);
        (0..epochs)
            .map(|e| {
                let xs: Vec<f64> = self
                    .trace
                    .iter()
                    .filter(|s| s.epoch == e)
                    .map(|s| s.loss as f64)
                    .collect();
                xs.iter().sum::<f64>() / xs.len() as f64
            })
            .collect()
    }
}

/// Train one model on an in-memory source scene.
pub fn train_on_scene(cfg: &RunConfig, scene: &SceneCube, aux: &AuxFeatures, seed: u64) -> Result<TrainedModel> {
    cfg.validate()?;
    let prepared = preprocess(cfg, scene, aux)?;
    let spec = ModelSpec {
        run: cfg.clone(),
        c_m1: prepared.m1.shape()[0],
        c_m2: prepared.m2.shape()[0],
        classes: scene.classes,
    };
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, spec, seed ^ 0x5eed_0001)?;
    let samples = sample_training_pixels(scene, cfg.train_fraction, cfg.sampling, seed)?;
    let aug_cfg = if cfg.dtaug {
        AugmentConfig::default()
    } else {
        AugmentConfig::none()
    };
    let steps_per_epoch = samples.len().div_ceil(cfg.batch);
    let total = cfg.epochs * steps_per_epoch;
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    let mut trace = Vec::with_capacity(total);
    let mut order = samples;
    let mut t = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let (aug_seed, mw_seed): (u64, u64) = (rng.gen(), rng.gen());
            let labels: Vec<usize> = chunk.iter().map(|&(r, c)| scene.label(r, c) as usize).collect();
            let batch = PatchBatch::gather(&prepared, chunk, labels, cfg.patch)?;
            let batch = augment(&batch, aug_seed, &aug_cfg);
            let lr = cosine_lr(t, total, cfg.lr, cfg.lr_min)?;
            let (loss, breakdown, grads) = {
                let mut s = Session::new(&store, true);
                let x1 = s.constant(batch.m1);
                let x2 = s.constant(batch.m2);
                let fwd = model.forward(&mut s, x1, x2, ForwardMode::Train { seed: mw_seed })?;
                let (loss, breakdown) = model.loss(&mut s, &fwd, &batch.labels)?;
                s.backward(loss)?;
                (s.value(loss).data()[0], breakdown, s.param_grads())
            };
            if !loss.is_finite() {
                return Err(Error::Data(format!("loss became {loss} at step {t}")));
            }
            adam.lr = lr;
            adam.update_store(&mut store, &grads)?;
            if let Some(ls) = model.logit_scale() {
                ls.clamp(&mut store);
            }
            log::debug!("epoch {epoch} step {t} lr {lr:.2e} loss {loss:.4}");
            trace.push(StepLog {
                epoch,
                step: t,
                lr,
                loss,
                breakdown,
            });
            t += 1;
        }
    }
    Ok(TrainedModel { model, store, trace })
}

/// Train `cfg.runs` models with seeds `cfg.seed, cfg.seed + 1, …`. Only the
/// source scene and its auxiliary files are read.
pub fn train(cfg: &RunConfig) -> Result<Vec<TrainedModel>> {
    let path = cfg
        .source
        .as_ref()
        .ok_or_else(|| Error::Config("no source scene configured".into()))?;
    let scene = read_scene(path, Domain::Source)?;
    let aux = AuxFeatures::load(
        cfg.source_aux_hs.as_deref(),
        cfg.source_aux_lidar.as_deref(),
        (scene.height(), scene.width()),
    )?;
    (0..cfg.runs as u64)
        .map(|r| train_on_scene(cfg, &scene, &aux, cfg.seed + r))
        .collect()
}

/// Elementwise maximum of two `[N,K]` score matrices, then the arg max of each row.
/// Ties go to the lowest class index.
pub fn predict_max_score(s1: &Tensor, s2: &Tensor) -> Result<Vec<usize>> {
    if s1.shape() != s2.shape() || s1.rank() != 2 {
        return Err(Error::shape("predict_max_score", s1.shape(), s2.shape()));
    }
    let k = s1.shape()[1];
    Ok(s1
        .data()
        .chunks(k)
        .zip(s2.data().chunks(k))
        .map(|(a, b)| {
            let mut best = 0;
            let mut top = f32::NEG_INFINITY;
            for (j, (&x, &y)) in a.iter().zip(b).enumerate() {
                let m = x.max(y);
                if m > top {
                    top = m;
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Predicted class of every listed pixel of a preprocessed scene.
pub fn predict_pixels(
    model: &Model,
    store: &ParamStore,
    scene: &PreparedScene,
    pixels: &[(usize, usize)],
) -> Result<Vec<usize>> {
    let run = &model.spec.run;
    let mut out = Vec::with_capacity(pixels.len());
    for chunk in pixels.chunks(run.eval_batch) {
        let batch = PatchBatch::gather(scene, chunk, vec![0; chunk.len()], run.patch)?;
        let mut s = Session::new(store, false);
        let x1 = s.constant(batch.m1);
        let x2 = s.constant(batch.m2);
        let fwd = model.forward(&mut s, x1, x2, ForwardMode::Eval)?;
        out.extend(predict_max_score(s.value(fwd.scores[0]), s.value(fwd.scores[1]))?);
    }
    Ok(out)
}

/// Accuracy over every labeled pixel of `scene`.
pub fn evaluate(model: &Model, store: &ParamStore, scene: &SceneCube, aux: &AuxFeatures) -> Result<Metrics> {
    let pixels = scene.labeled_pixels();
    if pixels.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if scene.classes != model.spec.classes {
        return Err(Error::Data(format!(
            "scene has {} classes, model predicts {}",
            scene.classes, model.spec.classes
        )));
    }
    let prepared = preprocess(&model.spec.run, scene, aux)?;
    let (c1, c2) = (prepared.m1.shape()[0], prepared.m2.shape()[0]);
    if (c1, c2) != (model.spec.c_m1, model.spec.c_m2) {
        return Err(Error::shape(
            "model input",
            &[model.spec.c_m1, model.spec.c_m2],
            &[c1, c2],
        ));
    }
    let pred = predict_pixels(model, store, &prepared, &pixels)?;
    let truth: Vec<usize> = pixels.iter().map(|&(r, c)| scene.label(r, c) as usize).collect();
    Metrics::from_predictions(scene.classes, &truth, &pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_modality_uses_one_scalar_pair() {
        let x = Tensor::new(&[2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = standardize_modality(&x);
        let want = [-3.0, -1.0, 1.0, 3.0].map(|v: f64| v / 5.0f64.sqrt());
        for (a, b) in y.data().iter().zip(want) {
            assert!((*a as f64 - b).abs() <= 1e-6);
        }
        let flat = standardize_modality(&Tensor::full(&[1, 2, 2], 4.0));
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_score_examples() {
        let s1 = Tensor::new(&[2, 3], vec![5.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let s2 = Tensor::new(&[2, 3], vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(predict_max_score(&s1, &s2).unwrap(), vec![0, 0]);
        let s3 = Tensor::new(&[1, 3], vec![0.0, 0.0, 2.0]).unwrap();
        let s4 = Tensor::new(&[1, 3], vec![0.0, 3.0, 0.0]).unwrap();
        assert_eq!(predict_max_score(&s3, &s4).unwrap(), vec![1]);
        assert!(predict_max_score(&s1, &s3).is_err());
    }

    #[test]
    fn stratified_sampling_covers_every_class() {
        let hs = Tensor::zeros(&[2, 10, 10]);
        let lidar = Tensor::zeros(&[1, 10, 10]);
        let labels: Vec<i32> = (0..100)
            .map(|i| {
                if i < 90 {
                    0
                } else if i < 98 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let scene = SceneCube::new(hs, lidar, labels, 3, Domain::Source).unwrap();
        let s = sample_training_pixels(&scene, 0.1, Sampling::Stratified, 1).unwrap();
        let count = |k| s.iter().filter(|&&(r, c)| scene.label(r, c) == k).count();
        assert_eq!((count(0), count(1), count(2)), (9, 1, 1));
        let u = sample_training_pixels(&scene, 0.1, Sampling::Uniform, 1).unwrap();
        assert_eq!(u.len(), 10);
        assert_eq!(s, sample_training_pixels(&scene, 0.1, Sampling::Stratified, 1).unwrap());
    }
}

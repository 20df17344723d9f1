//! End-to-end workflow: synthetic data, configuration, training, prediction,
//! evaluation and map output.

pub mod config;
pub mod metrics;
pub mod model;
pub mod ppm;
pub mod synth;
pub mod train;

pub use config::{Ablation, ClassifierInput, Preset, RunConfig, Sampling};
pub use metrics::{format_report, mean_std, Confusion, ExactMetrics, Metrics};
pub use model::{Forward, ForwardMode, Model, ModelSpec};
pub use ppm::{encode_classification_map, write_classification_map, CLASS_COLORS, UNLABELED_COLOR};
pub use synth::{synth_dataset, ShiftSpec, SynthSize};
pub use train::{
    evaluate, predict_max_score, predict_pixels, preprocess, sample_training_pixels, standardize_modality, train,
    train_on_scene, AuxFeatures, StepLog, TrainedModel,
};

//! Cross-scene multimodal remote-sensing classification built from scratch:
//! a small reverse-mode autodiff engine, Haar wavelet analysis, wavelet-domain
//! feature disentanglement across modalities, spatial-frequency vision encoders,
//! a BPE text encoder, and multiscale contrastive vision-text alignment.

pub mod align;
pub mod augment;
pub mod autodiff;
pub mod disentangle;
pub mod error;
pub mod fileio;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod scene;
pub mod selftest;
pub mod tensor;
pub mod text;
pub mod vision;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;

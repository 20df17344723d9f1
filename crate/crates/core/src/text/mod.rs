//! Class-description texts, their tokenizer, and the text encoder.

mod bpe;
mod catalog;
mod encoder;

pub use bpe::{byte_alphabet, merges_to_string, normalize, train_merges, BpeVocab, CONTEXT_LEN, VOCAB_CAPACITY};
pub use catalog::{build_class_texts, ClassText, Scope, TextCatalog, TextMode, CLASS_NAMES};
pub use encoder::{TextEncoder, TextEncoderConfig};

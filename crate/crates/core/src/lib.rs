//! Desk-scale textless vision-language transformer.
//!
//! Raw video frames and audio spectrograms are cut into patches, embedded,
//! and processed by one modality-agnostic transformer encoder. Pretraining
//! combines vision-audio matching with masked autoencoding; finetuning adds
//! small task heads over the `[CLS]` state.

pub mod audio;
pub mod cli;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod selfcheck;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};

//! Classifier-side toolkit for detection-free human-object interaction
//! (HOI) recognition.
//!
//! * [`taxonomy`]: verb × object class structure, prompts, few-shot bands.
//! * [`embeddings`]: unit-norm class vectors, synthetic or loaded from file.
//! * [`classifier`]: the linear head with scaled logits.
//! * [`losses`]: LSE-Sign and the BCE / weighted BCE / focal baselines.
//! * [`data`]: long-tailed multi-label generator and the oversampler.
//! * [`train`]: schedule, optimizers, head-only training loop.
//! * [`eval`]: AP, mAP with few-shot bands, IoU and pair matching.
//! * [`attention`]: box masks and CLS-restricted attention.
//! * [`experiment`]: seeded sweeps and report emission.

pub mod attention;
pub mod classifier;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod experiment;
mod linalg;
pub mod losses;
pub mod taxonomy;
pub mod train;

pub use error::{Error, Result};

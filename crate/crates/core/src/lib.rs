//! Domain-adaptive masked-language-model retraining for abusive-language detection.
//!
//! The pipeline runs corpus extraction, vocabulary training, MLM retraining,
//! classifier fine-tuning and evaluation. Every stage is seeded and deterministic.

pub mod corpus;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod metrics;
pub mod mlm;
pub mod model;
pub mod preprocess;
pub mod synthetic;
pub mod tasks;
pub mod tokenizer;

pub use error::{Error, Result};

//! Representation-level counterfactual calibration for zero-shot
//! vision-language classifiers.
//!
//! Token effects are split into object and background estimates, the
//! background's direct effect is subtracted from the zero-shot logits, and
//! the object estimate is re-scored against sampled alternative contexts.

pub mod bench;
pub mod cfe;
pub mod error;
pub mod estimate;
pub mod metrics;
pub mod pool;
pub mod registry;
pub mod sources;
pub mod synth;
pub mod tde;
pub mod token_effects;
pub mod types;
pub mod vector;

pub use error::{CfError, Result};
pub use registry::Strategies;
pub use tde::{run_image, Calibrator, PredictionRecord};
pub use types::{CalibrationConfig, ClassDictionary, ContextPool, SourceKind, TokenEffectRecord, TopKSource};
pub use vector::{EmbeddingVector, Matrix};

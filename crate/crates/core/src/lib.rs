//! Knowledge distillation of small transformer students in data-scarce
//! domains, with training data drawn from a stationary edit distribution and
//! filtered by a policy-gradient selector.
//!
//! The crate is layered bottom-up:
//!
//! * [`numerics`]: `f64` tensors and tape-based reverse-mode AD.
//! * [`text`]: vocabulary, encoding, JSONL datasets, synthetic tasks.
//! * [`model`]: mini transformer encoder with classifier, regressor and
//!   masked-LM heads.
//! * [`distill`]: attention, hidden-state and dark-knowledge losses.
//! * [`augment`]: the edit-distance sampling distribution and its scoring.
//! * [`selector`]: the keep/drop policy and its REINFORCE update.
//! * [`trainer`]: the full training pipeline and its baselines.
//! * [`eval`]: task metrics.
//! * [`harness`]: run configuration, artifact layout and experiment matrix.

mod error;

pub mod augment;
pub mod distill;
pub mod eval;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod selector;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};

//! Collision-risk prediction for end-to-end driving planners.
//!
//! The crate bundles everything needed to study loss-prediction style
//! collision classifiers on cached planner queries:
//!
//! - [`scenario`]: deterministic synthetic safety-critical scenes with a
//!   geometric collision oracle and surrogate plan/motion query embeddings.
//! - [`dataset`]: the manifest + raw float32 blob on-disk format.
//! - [`gmm`]: the rule-based chained Gaussian-mixture risk score.
//! - [`model`]: the cross-attention classifier and the plan-only MLP, with
//!   hand-written reverse-mode gradients and checkpoints.
//! - [`training`]: focal loss, bagging over undersampled negatives, mixup,
//!   Adam and ensemble prediction.
//! - [`metrics`]: AUROC, average precision, precision at recall, curves.
//! - [`balance`]: the run-count integer program used to balance simulated
//!   datasets, with an exact branch-and-bound solver.
//! - [`bench`]: the end-to-end comparison driver.

pub mod balance;
pub mod bench;
pub mod dataset;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scenario;
pub mod training;

pub use error::{Error, ErrorClass, Result};

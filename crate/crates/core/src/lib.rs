//! Feature-space class-incremental learning with distribution-level memory.
//!
//! Old classes are summarised as per-class Gaussian mixtures whose component
//! count is picked by a silhouette criterion. The mixtures can be degraded to
//! cheaper summaries (per-dimension std, scalar std) and are replayed as
//! pseudo-features while an incremental linear classifier learns new classes.
//! Mixup between new features and pseudo-features sharpens the old/new
//! boundary, and the confusion index measures how well that works.
//!
//! Module map:
//!
//! * [`feature_store`]: embeddings I/O, synthetic feature spaces, task streams
//! * [`gmm`]: Gaussian densities, EM fitting and sampling
//! * [`kmeans`]: farthest-point seeded Lloyd iterations
//! * [`silhouette`]: squared-distance silhouette and adaptive component count
//! * [`memory`]: class memories, degradation, replay, footprint accounting
//! * [`mmd`]: unbiased kernel MMD
//! * [`classifier`]: linear classifier, composite loss, stage training
//! * [`baselines`]: prior / d-std memories and the no-replay fine-tune
//! * [`metrics`]: accuracies, confusion index, run summaries
//! * [`experiment`]: config-driven runs, sweeps and report comparison

pub mod baselines;
pub mod classifier;
pub mod error;
pub mod experiment;
pub mod feature_store;
pub mod gmm;
pub mod kmeans;
pub mod memory;
pub mod metrics;
pub mod mmd;
pub mod rng;
pub mod silhouette;

mod binio;
mod linalg;

pub use error::{Error, Result};

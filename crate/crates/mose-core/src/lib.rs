//! Mixture-of-stochastic-experts segmentation with an optimal-transport loss.
//!
//! The crate provides, end to end:
//!
//! * [`ad`] — a minimal reverse-mode autodiff tape over dense `f64` tensors;
//! * [`model`] — the MoSE network: shared encoder, expert-specific Gaussian
//!   priors, a noise-fusion decoder and a gating module, with both the
//!   standard-sampling and the weighted compact output representations;
//! * [`solver`] — coupling solvers for the inner transport problem: the
//!   relaxed greedy solver, the nearest-prediction fast path, an exact
//!   transportation simplex, Hungarian matching, and the KL marginal penalty;
//! * [`loss`] / [`train`] — pairwise costs, assembly of the relaxed
//!   objective, soft-gradient smoothing, annealing schedules and the
//!   training loop;
//! * [`metrics`] — generalized energy distance, matched IoU, expected
//!   calibration error, mode-ratio / flip-ratio and diversity diagnostics;
//! * [`data`] — synthetic multimodal segmentation datasets whose label
//!   distributions are known exactly, plus their on-disk container;
//! * [`checkpoint`] — bit-exact model serialization.

pub mod ad;
pub mod error;
pub mod solver;

pub use error::{AdError, CheckpointError, DataError, ModelError, SolverError, TrainError};

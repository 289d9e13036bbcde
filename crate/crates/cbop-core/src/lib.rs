//! Offline model-based RL with conservative Bayesian value targets.
//!
//! The crate is organized around the data flow of the training loop:
//!
//! * [`funcapprox`] — dense networks with hand-rolled forward/backward passes
//!   and Adam, all in `f64` with a fixed summation order so results are
//!   reproducible bit-for-bit.
//! * [`envdata`] — three small control environments, scripted behavior
//!   policies, and a columnar binary dataset format.
//! * [`dynamics`] — a probabilistic ensemble of transition/reward models with
//!   elite selection on held-out likelihood.
//! * [`qensemble`] — an ensemble of Q-networks with target copies, soft
//!   updates, and a gradient-diversity penalty.
//! * [`bayesmve`] — h-step value expansion over the model ensemble and the
//!   precision-weighted fusion of per-horizon return distributions into a
//!   single target estimate.
//! * [`agent`] — pretraining (behavior cloning, fitted Q evaluation), the
//!   main training loop, evaluation, diagnostics, and checkpointing.

pub mod agent;
pub mod bayesmve;
pub mod dynamics;
pub mod envdata;
pub mod error;
pub mod funcapprox;
pub mod mat;
pub mod qensemble;
pub mod rng;

pub use error::{CbopError, FormatError, Result};
pub use mat::Mat;

//! Desk-scale RLHF laboratory.
//!
//! Everything runs on a synthetic keyword-coverage task small enough to train
//! in seconds on a CPU, while keeping the moving parts of an RLHF pipeline:
//!
//! - [`synthdata`]: prompts, scripted demonstrators, and a length-biased
//!   synthetic annotator producing preference pairs.
//! - [`rm`]: reward models over hand-designed response features, either a
//!   single head or two weight-normalized heads (quality + length) trained
//!   with correlation and orthogonality regularizers.
//! - [`policy`]: a featurized softmax token policy with behavior-cloning
//!   initialization and reward shaping (KL, clipping, length penalty).
//! - [`rl`]: PPO with GAE and ReMax (REINFORCE with a greedy baseline).
//! - [`eval`]: an order-swapped programmable judge, win scores, correlation
//!   reports, and Pareto-front extraction.
//!
//! All randomness derives from a single top-level seed through named
//! sub-streams (see [`rng`]), so every pipeline stage is reproducible.

pub mod config;
pub mod error;
pub mod eval;
pub mod optim;
pub mod policy;
pub mod rl;
pub mod rm;
pub mod rng;
pub mod stats;
pub mod synthdata;

pub use error::{Error, Result};

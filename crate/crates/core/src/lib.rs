//! Desk-scale laboratory for reinforcement learning with verifiable rewards.
//!
//! The crate pairs a faithful GRPO implementation with synthetic verifiable
//! tasks and explicit autoregressive categorical policies, so every quantity
//! the optimizer touches (log-probabilities, exact per-token KL, advantages)
//! can be checked against brute-force oracles. Around the optimizer sit the
//! weak-supervision regimes (scarce data, corrupted labels, majority-vote and
//! self-certainty proxy rewards) and the diagnostics used to read a run:
//! saturation step, pre/post-saturation gains, avg@k/pass@k, semantic
//! diversity, reasoning faithfulness and inter-judge agreement.
//!
//! Data-parallel inner loops (group sampling, difficulty probing, evaluation)
//! run on rayon when the `parallel` feature is enabled and fall back to plain
//! iterators otherwise. Every random draw comes from a stream derived from
//! `(seed, domain, indices)`, so both paths produce bit-identical results.

pub mod analytics;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod grpo;
pub mod judge;
pub mod policy;
pub mod records;
pub mod rewards;
pub mod rng;
pub mod runlog;
pub mod task_env;

pub use error::{Error, Result};

//! Multi-pattern rollout, verifier-guided pattern selection and suffix-masked
//! group policy optimization, end to end on a tiny autoregressive policy over
//! synthetic verifiable tasks.
//!
//! Module map:
//! * [`env`]: task generators, verifier, warm-start corpus
//! * [`policy`]: decoder-only transformer with exact gradients
//! * [`rollout`]: multi-pattern group sampling and scoring
//! * [`selection`]: pattern accuracy, optimal-pattern choice, suffix masks
//! * [`objective`]: advantages, clipped surrogate, KL penalty, updates
//! * [`harness`]: training driver, evaluation, analytics, ablations, checkpoints

pub mod env;
pub mod harness;
pub mod error;
pub mod optim;
pub mod pattern;
pub mod policy;
pub mod objective;
pub mod rollout;
pub mod selection;
pub mod seed;

pub use error::{Error, Result};

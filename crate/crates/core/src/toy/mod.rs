//! Desk-scale decoupled actor/policy RL testbed.
//!
//! A bigram policy learns a sequence task from rollouts produced by a
//! separate actor (a unigram by default). Schemes differ only in how the
//! policy gradient treats the mismatch between actor and policy.

mod model;
mod task;
mod train;

pub use model::{ModelKind, TabularModel};
pub use task::{RewardRule, ToyTask};
pub use train::*;

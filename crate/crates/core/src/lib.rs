//! Offline-to-online reinforcement learning with Q-conditioned state-entropy
//! (QCSE) intrinsic rewards.
//!
//! The crate is organised bottom-up:
//!
//! - [`envs`]: a delayed-reward gridworld and a dense-reward point mass, plus
//!   offline dataset generation and the binary dataset format.
//! - [`approx`]: multilayer perceptrons with hand-written reverse mode and Adam.
//! - [`entropy`]: k-nearest-neighbour machinery, digamma, the KSG-style
//!   conditional entropy reward and the reward modifier.
//! - [`agents`]: SAC, CQL, Cal-QL and AWAC learners over a double-Q critic.
//! - [`tabular`]: exact dynamic programming used to check the soft policy
//!   iteration guarantees and the entropy bound on small MDPs.
//! - [`trainer`]: offline pretraining, online fine-tuning, evaluation and
//!   metric logging.

pub mod agents;
pub mod approx;
pub mod entropy;
pub mod envs;
mod error;
pub mod rng;
pub mod stats;
pub mod tabular;
pub mod trainer;

pub use error::{Error, Result};

//! Count-based anti-exploration for offline reinforcement learning.
//!
//! A conditional multi-codebook VQVAE maps state–action pairs to label
//! sequences, a counting Bloom filter turns those sequences into
//! pseudo-counts, and a twin-critic soft actor-critic learner is trained
//! with a count-scaled penalty on out-of-distribution actions.

pub mod counting;
pub mod env;
pub mod error;
pub mod fcm;
pub mod hash;
pub mod nn;
pub mod penalty;
pub mod rl;
pub mod rng;
pub mod vqvae;

pub use error::{Error, Result};

//! Decentralized multi-agent policy learning with a two-stage curriculum:
//! goal-conditioned single-agent TRPO, then a frozen single-agent policy plus a
//! trainable interaction modifier. Includes the centralized-critic TRPO
//! baseline, the lane-change and robot-navigation simulators and the
//! evaluation protocols (success, first arrival, Fréchet compromise, mixed
//! pairings).

pub mod envs;
pub mod error;
pub mod cliio;
pub mod evalr;
pub mod nnet;
pub mod trainer;
pub mod trpo;

pub use error::{Error, Result};

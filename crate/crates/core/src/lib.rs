//! Inverse attention agents for continuous multi-agent particle worlds.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: reverse-mode gradients, dense layers, attention, Adam.
//! * [`engine`]: the seedable 2-D particle world and its five scenarios.
//! * [`gradfield`]: score networks trained by denoising score matching and the
//!   goal representation built from them.
//! * [`agents`]: self-attention policy, inverse attention network, weight-update head.
//! * [`training`]: PPO with GAE and the three-phase inverse attention pipeline.
//! * [`evaluation`]: mix-and-match tournaments, rank accuracy and sweeps.
//! * [`io`]: configuration, checkpoints, metrics and human-play sessions.

pub mod agents;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod gradfield;
pub mod io;
pub mod par;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

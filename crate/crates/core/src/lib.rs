//! Team policy optimization with shared experience and diversity regularization.
//!
//! A team of `K` independently parameterized agents explores copies of the
//! same environment. Their rollouts are merged into one shared training
//! batch (collaborative exploration), and each agent's task gradient is fused
//! with a diversity gradient along the angular bisector of the two so that
//! the team does not collapse onto a single behavior.
//!
//! Layout:
//! - [`numerics`]: parameter vectors, MLPs with exact reverse-mode gradients,
//!   distributions and optimizer steps.
//! - [`envs`]: small built-in environments.
//! - [`rollout`]: trajectory collection, advantages, team batch merge.
//! - [`diversity`]: delayed targets, diversity reward and returns.
//! - [`fusion`]: feasible-direction gradient fusion.
//! - [`onpolicy`]: PPO-based team trainer.
//! - [`offpolicy`]: SAC-based team trainer with shared replay.
//! - [`harness`]: configuration, seeding, metrics, experiment presets.

pub mod diversity;
pub mod envs;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod numerics;
pub mod offpolicy;
pub mod onpolicy;
pub mod rollout;

pub use error::{DiceError, Result};

//! Multi-agent reinforcement-learning simulator of a produce-and-trade
//! coordination economy.
//!
//! Producer agents extract, build, buy and sell resources; a market decider
//! learns to predict which resource each seller brings from the seller's
//! identity code alone. All models are small actor-critic MLPs trained with
//! PPO at the end of every epoch.

pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod nn;
pub mod population;
pub mod ppo;
pub mod rng;

pub use error::{Error, Result};

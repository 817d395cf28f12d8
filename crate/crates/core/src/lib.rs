//! Variance-gated mixture of an imitation expert and a reinforcement-learning
//! expert, with the environments, scripted oracles, replay stores and training
//! loops needed to run it end to end on a laptop.
//!
//! - [`env`]: deterministic 2D manipulation tasks.
//! - [`oracle`]: scripted waypoint policies and the automatic intervention rule.
//! - [`buffers`]: demo / success / replay stores with source-mixed sampling.
//! - [`experts`]: the imitation expert, the actor-critic expert, the discrete
//!   gripper head and the gate that picks between the two experts per step.
//! - [`training`]: losses, offline pretraining, online fine-tuning, evaluation
//!   and ablation arms.

pub mod buffers;
pub mod env;
mod error;
pub mod experts;
pub mod oracle;
pub mod training;

pub use error::{Error, Result};

//! Toy-scale audio-language model with multiple frozen encoders, a
//! window-level Q-Former, prompt-routed expert projection and
//! semantic-aware frame selection, trained end to end on synthetic tasks.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod lm;
pub mod model;
pub mod nn;
pub mod optim;
pub mod qformer;
pub mod saclm;
pub mod tapm;
pub mod train;

pub use config::{Config, ModelConfig, TaskSpec, TrainConfig};
pub use error::{Result, UsamError};

//! Multi-session dialogue generation with a hierarchical history memory.
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`
//! matrices, so the crate has no native dependencies.

pub mod ablation;
pub mod chat;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod train;
pub mod variant;

pub use config::ModelConfig;
pub use error::{HahtError, Result};
pub use model::Model;

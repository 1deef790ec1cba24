//! Cross-only bidirectional hidden-state fusion for two-tower encoders.

pub mod attention;
pub mod autodiff;
pub mod bridge;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

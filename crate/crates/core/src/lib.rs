//! Multi-task classification under category shifts with a learned
//! task/class/instance association graph.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod message_passing;
pub mod model;
pub mod objective;
pub mod training;

pub use error::{Error, Result};

//! Model configuration, parameters and graph construction helpers.

pub mod checkpoint;
mod config;
mod graph;
pub(crate) mod layers;
mod params;

pub use config::ModelConfig;
pub use graph::Graph;
pub use layers::RopeTable;
pub use params::{Param, ParamStore};

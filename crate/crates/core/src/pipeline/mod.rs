//! End-to-end orchestration and the file-facing parts of the system.

pub mod ate;
pub mod config;
pub mod dataset;
mod mc_tables;
pub mod mesh;
pub mod model;
pub mod slam;
pub mod synth;

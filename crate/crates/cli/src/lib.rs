//! Experiment runner for the dual-rate diffusion lab.

pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod plot;

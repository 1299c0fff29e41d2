//! Evaluation and mapping search for reconfigurable DNN accelerators.
//!
//! Models are JSON layer graphs; conv2d and dense layers run on cycle
//! models of a flexible linear array, a sparse GEMM engine, or an
//! output-stationary systolic mesh. Everything else runs on the host.

pub mod accelconfig;
pub mod cli;
pub mod graph;
pub mod mapping;
pub mod runner;
pub mod simulator;
pub mod tensorops;
pub mod tuner;

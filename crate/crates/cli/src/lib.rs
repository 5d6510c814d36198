//! Command-line workflows around the tracker core: synthetic benchmark
//! generation, training, tracking, evaluation, energy reports, solver
//! verification, and the ablation sweep.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod plots;
pub mod runner;
pub mod train;

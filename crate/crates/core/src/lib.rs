//! Bayesian optimization over one-dimensional subspaces through the incumbent,
//! with an asynchronous batch mode and a benchmark harness.

pub mod acquisition;
pub mod gp;
pub mod harness;
pub mod linesearch;
mod optim;
pub mod orchestrator;
pub mod space;

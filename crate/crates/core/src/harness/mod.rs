//! Experiment plumbing: configs, run directories, suites and the gradient
//! check problem.

pub mod config;
pub mod gradcheck;
pub mod output;
pub mod suite;

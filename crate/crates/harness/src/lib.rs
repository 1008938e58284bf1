//! Experiment front end for `sparq-core`: configuration, datasets, the
//! N:M × bit-width × regularizer matrix, reports, and plots.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod plot;

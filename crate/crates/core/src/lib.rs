//! Adaptive sample hiding for SGD training, with comparator strategies and a
//! small dense-model trainer to run them on.

pub mod cli;
pub mod comparators;
pub mod data;
pub mod harness;
pub mod hiding;
pub mod model;
pub mod optim;
pub mod rng;

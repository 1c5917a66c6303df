//! Learned data structures for nearest-neighbor search and frequency
//! estimation, trained end to end, with classical baselines and probes.

pub mod baselines;
pub mod datagen;
pub mod diffsort;
pub mod error;
pub mod eval;
pub mod freqest;
mod layers;
pub mod nn_model;
pub mod presets;
pub mod probes;
pub mod rng;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};

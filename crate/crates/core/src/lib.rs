//! Multi-channel sound source separation: cross-channel spatial transformers
//! feeding a recurrent U-net that estimates complex per-bin filters.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod error;
pub mod datagen;
pub mod dsp;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod runet;
pub mod tnet;
pub mod train;

pub use error::{Error, Result};
pub use dsp::{FilterSet, MultiWave, Spectra};
pub use numerics::{Tape, Tensor, Var};

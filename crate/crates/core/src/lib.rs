//! Adversarial domain adaptation for encoder-decoder monocular depth networks.

pub mod checkpoint;
pub mod datasets;
pub mod discriminators;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod params;
pub mod resources;
pub mod rng;
pub mod types;

pub use error::{Error, Result};

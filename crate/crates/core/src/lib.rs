//! Few-shot, semi-supervised and active learning as message passing on a
//! fully connected graph over the images of an episode.

pub mod active;
pub mod baselines;
pub mod checkpoint;
pub mod embedding;
pub mod episodes;
pub mod error;
pub mod gnn;
pub mod harness;
pub mod model;
pub mod nn;

pub use error::{Error, Result};

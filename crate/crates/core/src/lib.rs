//! Pyramidal flow matching at desk scale.
//!
//! A generative trajectory from noise to data is split into `K` time windows.
//! Window `k` runs at resolution `full / 2^k`; all windows are trained with one
//! flow-matching objective on coupled endpoints, and sampling crosses from one
//! window to the next with a rescale-and-renoise jump that keeps the marginal
//! distribution continuous.
//!
//! Module map:
//!
//! - [`grid`]: latent grids, block-mean `down`, nearest `up`, binary I/O
//! - [`schedule`]: stage windows and the jump-point time link
//! - [`flow`]: coupled endpoints, training samples, loss
//! - [`renoise`]: jump parameters and block-correlated corrective noise
//! - [`sampler`]: stagewise Euler sampling and guidance
//! - [`temporal`]: history pyramids, causal masks, position grids
//! - [`model`]: velocity fields, MLP with reverse mode, Adam, trainers
//! - [`accounting`]: token and attention-cost arithmetic

pub mod accounting;
pub mod error;
pub mod flow;
pub mod grid;
pub mod model;
pub mod renoise;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod temporal;

pub use error::{Error, Result};
pub use grid::{LatentGrid, Shape};
pub use model::field::VelocityField;
pub use rng::RngStream;
pub use schedule::{Stage, StageSchedule};

//! Sub-6GHz-aided mmWave base station and beam selection.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`scene`] lays out base stations, buildings and a user grid.
//! 2. [`channel`] turns each (BS, user) geometry into a single-path
//!    OFDM channel for both bands.
//! 3. [`codebook`] scores every mmW (BS, beam) pair and labels each user
//!    with its rate-optimal choice.
//! 4. [`features`] reduces the sub-6GHz links to a small feature matrix,
//!    and [`dataset`] persists labeled samples.
//! 5. [`model`], [`train`] and [`eval`] fit and score the branched network
//!    that predicts the mmW BS and beam from those features alone.

pub mod channel;
pub mod codebook;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod scene;
pub mod train;

pub use error::{Error, Result};

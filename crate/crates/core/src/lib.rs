//! Unpaired sketch-to-photo translation with a perceptual cycle loss and a
//! discriminator that judges loss-network features instead of pixels.

pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod ops;
pub mod optim;
pub mod train;

pub use error::{Error, Result};

pub mod analysis;
pub mod cli;
pub mod datagen;
pub mod diff;
pub mod error;
pub mod graph;
pub mod model;
pub mod spatial;
pub mod spiking;
pub mod stability;
pub mod temporal;
pub mod training;

pub use error::{Error, Result};

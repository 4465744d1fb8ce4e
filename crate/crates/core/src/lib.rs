pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod features;
pub mod inverter;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod s2s;
pub mod vqvae;

pub use error::{Error, Result};

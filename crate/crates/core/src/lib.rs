//! Desk-scale workbench for stochastic information-bottleneck reconstruction
//! of transmembrane potential sequences from surface potentials.

pub mod apsim;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod rng;
pub mod theory;
pub mod train;
pub mod vib;

pub use error::{CoreError, Result};

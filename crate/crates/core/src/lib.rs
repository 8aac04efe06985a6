pub mod error;
pub mod cmic;
pub mod data;
pub mod dmig;
pub mod features;
pub mod harness;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod omie;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};

//! Dense matrices, reverse-mode differentiation, Adam and seeded randomness.

mod matrix;
mod optim;
mod rng;
mod tape;

pub use matrix::Matrix;
pub use optim::{Adam, AdamConfig, ParamId, ParamStore, Parameter};
pub use rng::{derive_seed, Rng};
pub use tape::{scaled_dot_attention, RowMap, Tape, Trace, Var};

//! Minimal reverse-mode automatic differentiation over dense arrays.

mod array;
mod optim;
mod tape;

pub use array::Array;
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};

//! Reverse-mode differentiable dense linear algebra and the Gumbel-Softmax primitive.

pub mod gumbel;
pub mod linalg;
pub mod tape;

pub use gumbel::{gumbel_softmax, GumbelNoise};
pub use tape::{Gradients, Tape, TapeMatrix, TapeValue};

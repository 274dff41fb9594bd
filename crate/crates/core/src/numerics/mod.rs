//! Dense linear algebra and deterministic randomness used by every other
//! module. Pure functions over immutable inputs except for `Rng`.

mod dense;
mod rng;

pub use dense::{softmax_temp, Matrix, Vector};
pub use rng::{derive_seed, Rng};

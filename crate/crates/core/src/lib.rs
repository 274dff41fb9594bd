//! Few-shot prompt classification with entropic optimal transport.
//!
//! The math substrate (`numerics`, `ot`) is generic over the scalar type via
//! [`Scalar`]; the pipeline modules pin `f64` through the aliases below, since
//! the gradient checks demand double precision.

pub mod dataio;
pub mod encoders;
pub mod error;
pub mod head;
pub mod numerics;
pub mod ot;
mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense 64-bit matrix used throughout the pipeline.
pub type Mat = numerics::Matrix<f64>;
/// Dense 64-bit vector.
pub type Vec64 = numerics::Vector<f64>;

pub type DiscreteMeasure = ot::DiscreteMeasure<f64>;
pub type CostMat = ot::CostMat<f64>;
pub type TransportPlan = ot::TransportPlan<f64>;
pub type SinkhornConfig = ot::SinkhornConfig<f64>;
pub type SinkhornResult = ot::SinkhornResult<f64>;

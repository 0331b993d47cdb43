//! History matching for simulators with high-dimensional output fields.
//!
//! The field implausibility over an ell-dimensional output decomposes, for
//! weight `W = sigma_e + sigma_eta`, into a fixed reconstruction error plus a
//! q-dimensional coefficient implausibility, so candidate inputs can be
//! screened with small-matrix work after a one-off factorization of `W`.

pub mod basis;
pub mod gp;
pub mod implausibility;
pub mod io;
pub mod rotation;
pub mod sampling;
pub mod wave;
pub mod cli;
pub mod covariance;
pub mod error;

pub use error::{FieldMatchError, Result};

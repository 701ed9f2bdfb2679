//! Blind fusion of a low-resolution hyperspectral cube with a
//! high-resolution multispectral image through a learned Tucker model.

pub mod autodiff;
pub mod degradation;
pub mod error;
pub mod exec;
pub mod io;
pub mod manifold;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod real;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

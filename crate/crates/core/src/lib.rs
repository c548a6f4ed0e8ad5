//! Source inversion and coefficient estimation for advection-diffusion
//! equations with physics-informed networks and NTK-balanced loss weights.

pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod networks;
pub mod ntk;
pub mod pdemodel;
pub mod synthgen;
pub mod trainopt;

pub use error::{Error, Result};

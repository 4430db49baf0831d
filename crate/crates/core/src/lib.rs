pub mod error;
pub mod estimator;
pub mod fock;
pub mod montecarlo;
pub mod optics;
pub mod protocol;
pub mod quadrature;
pub mod reconstruct;

pub use error::{Error, Result};

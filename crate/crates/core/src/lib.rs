//! Fourier Neural Operator surrogates for ionic membrane models.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff
//! tensor layer with real FFTs, the 1-D FNO, stiff ODE simulation of the
//! FitzHugh-Nagumo and Hodgkin-Huxley models, dataset generation,
//! training and hyperparameter search.

pub mod dataset;
pub mod error;
pub mod fno;
pub mod ionic;
pub mod tensor;
pub mod train;
pub mod tune;

pub use error::{Error, Result};

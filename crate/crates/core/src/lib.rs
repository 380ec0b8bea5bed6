//! Error-aware attention caching and PCA query/key slicing for a toy video
//! diffusion transformer, with MAC accounting and fidelity metrics.

pub mod container;
pub mod dws;
pub mod edcw;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pcas;

pub use error::{Error, Result};

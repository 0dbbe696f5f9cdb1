//! Hierarchical flow matching over truncated unsigned distance volumes.

pub mod autodiff;
mod binio;
pub mod chunked;
pub mod error;
pub mod flow;
pub mod layout;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod toy;
pub mod volume;

pub use error::{Error, Result};

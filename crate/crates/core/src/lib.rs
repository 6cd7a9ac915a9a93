//! Functional dimension and hidden symmetries of ReLU networks.

pub mod construct;
pub mod error;
pub mod experiment;
pub mod fdim;
pub mod geometry;
pub mod grad;
pub mod lp;
pub mod net;
pub mod rank;
pub mod rng;
pub mod symmetry;

pub use error::{Error, Result};
pub use fdim::{estimate_fdim, fdim_upper_bound, FdimEstimate, FdimOptions};
pub use net::{he_init, Architecture, Network, Sign, TernaryLabel, DEFAULT_ZERO_ATOL};

//! Numerical analysis of Sobolev sample-path regularity for centered
//! Gaussian random fields on box domains.
//!
//! Given a covariance kernel `k`, an order `m` and an exponent `p`, the crate
//! decides whether `GP(0, k)` sample paths lie in `W^{m,p}` by computing the
//! equivalent spectral/integral criteria on tensor-product quadrature grids:
//! diagonal traces of the differentiated kernels, Nystrom spectra,
//! differentiated Mercer identities, and nuclear bounds, cross-validated
//! against Monte Carlo Karhunen-Loeve sampling.

pub mod cli;
pub mod error;
pub mod finitediff;
pub mod grid;
pub mod kernels;
pub mod sampler;
pub mod spectral;
pub mod verdict;

pub use error::{Error, Result};

/// Pins the eigensolver to sequential execution. Call once at startup;
/// results are then bit-identical regardless of the worker thread count.
pub fn init_deterministic() {
    faer::set_global_parallelism(faer::Par::Seq);
}

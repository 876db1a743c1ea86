//! Dense linear algebra and seeded randomness shared by every other module.
//!
//! Everything here is 64-bit and implemented in-repo (no LAPACK), so builds
//! are hermetic and results reproduce across machines.

mod cholesky;
mod eigen;
mod matrix;
mod pca;
mod rng;
mod spectral;

pub use cholesky::{cholesky_psd, Cholesky, JitterPolicy};
pub use eigen::{sym_eigendecompose, EigenDecomposition};
pub use matrix::{dot, norm_sq, Matrix};
pub use pca::{pca, Pca};
pub use rng::{stream_id, RngStream};
pub use spectral::spectral_norm;

//! Numerical toolkit for probing isotropy in the contextual embeddings of a
//! small log-linear self-attention forecaster.
//!
//! The crate covers the whole chain: Gaussian-process synthetic series
//! ([`kernelsynth`]), scaling and quantization into a token vocabulary
//! ([`tokenizer`]), a stacked `softmax(ΨΛΨᵀ)Ψ` forecaster with a tied
//! softmax head ([`model`]), embedding-space diagnostics ([`isotropy`]),
//! executable checks of the attention/partition-function results
//! ([`theory`]) and forecast sweeps ([`eval`]).
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Every
//! reduction is folded in a fixed order, so results are bit-identical for
//! any thread count.

pub mod error;
pub mod eval;
pub mod formats;
pub mod isotropy;
pub mod kernelsynth;
pub mod model;
pub mod numerics;
pub mod par;
pub mod theory;
pub mod tokenizer;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngStream};

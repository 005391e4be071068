//! Eigenprune: singular-value surgery on a toy decoder-only transformer.
//!
//! The pipeline decomposes selected weight matrices into per-singular-value
//! rank-one terms, scores each term's effect on task loss with a first-order
//! attribution estimate, freezes the worst-scoring fraction into
//! token-indexed biases, and measures the accuracy change on synthetic
//! arithmetic tasks.

pub mod linalg;
pub mod scalar;

pub use scalar::Scalar;

/// 64-bit working types; the tolerances in the test suite assume these.
pub type Matrix64 = linalg::Matrix<f64>;
pub type SvdFactors64 = linalg::SvdFactors<f64>;
pub type RankOneTerm64 = linalg::RankOneTerm<f64>;

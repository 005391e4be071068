//! Dense real matrices, one-sided Jacobi SVD, and rank-one terms.
//!
//! Everything here is immutable after construction and safe to share across
//! threads; decompositions of distinct matrices can run concurrently.

mod matrix;
mod svd;

pub use matrix::{dot, norm2, LinalgError, Matrix};
pub use svd::{
    orthonormality_defect, rank_one_terms, svd, svd_with_label, RankOneTerm, SvdFactors,
};

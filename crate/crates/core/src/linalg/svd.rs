//! Singular value decomposition by one-sided Jacobi rotations.
//!
//! The matrices in this pipeline are small and dense (at most a few hundred
//! per side), so cyclic one-sided Jacobi is accurate and fast enough: rotate
//! column pairs of a working copy until all columns are mutually orthogonal,
//! then read the singular values off as column norms.

use crate::linalg::matrix::{dot, norm2, LinalgError, Matrix};
use crate::scalar::{real, Scalar};

const MAX_SWEEPS: usize = 60;

/// Thin SVD `A = U·diag(sigma)·Vᵀ` with `r = min(m, n)` columns in U and V.
///
/// `sigma` is non-negative and sorted non-increasing; U and V have
/// orthonormal columns.
#[derive(Debug, Clone)]
pub struct SvdFactors<T: Scalar = f64> {
    pub u: Matrix<T>,
    pub sigma: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> SvdFactors<T> {
    pub fn rank_count(&self) -> usize {
        self.sigma.len()
    }

    /// Re-multiplies `U·diag(sigma)·Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let (m, r) = self.u.shape();
        let n = self.v.rows();
        let mut out = Matrix::zeros(m, n);
        for k in 0..r {
            let s = self.sigma[k];
            if s == T::zero() {
                continue;
            }
            for i in 0..m {
                let uis = self.u[(i, k)] * s;
                for j in 0..n {
                    out[(i, j)] += uis * self.v[(j, k)];
                }
            }
        }
        out
    }
}

/// One rank-one term `E_i = sigma_i · u_i · v_iᵀ` of a decomposition.
/// The terms of a matrix sum back to the matrix itself.
#[derive(Debug, Clone)]
pub struct RankOneTerm<T: Scalar = f64> {
    /// 0-based position in the non-increasing sigma ordering.
    pub index: usize,
    pub sigma: T,
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> RankOneTerm<T> {
    /// `E_i · x = sigma · (v·x) · u`, without forming the dense matrix.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>, LinalgError> {
        if x.len() != self.v.len() {
            return Err(LinalgError::ShapeMismatch {
                op: "apply_term",
                lhs: format!("{}x{}", self.u.len(), self.v.len()),
                rhs: format!("{}", x.len()),
            });
        }
        let c = self.sigma * dot(&self.v, x);
        Ok(self.u.iter().map(|&ui| c * ui).collect())
    }

    /// Dense `sigma · u · vᵀ`.
    pub fn materialize(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.u.len(), self.v.len());
        for (i, &ui) in self.u.iter().enumerate() {
            let s = self.sigma * ui;
            for (j, &vj) in self.v.iter().enumerate() {
                out[(i, j)] = s * vj;
            }
        }
        out
    }
}

/// Decomposes `a` into [`SvdFactors`]. See [`svd_with_label`].
pub fn svd<T: Scalar>(a: &Matrix<T>) -> Result<SvdFactors<T>, LinalgError> {
    let label = format!("{}x{}", a.rows(), a.cols());
    svd_with_label(a, &label)
}

/// Decomposes `a`, tagging any convergence error with `label` so callers can
/// report which model matrix failed.
pub fn svd_with_label<T: Scalar>(
    a: &Matrix<T>,
    label: &str,
) -> Result<SvdFactors<T>, LinalgError> {
    a.validate_finite()?;
    if a.rows() < a.cols() {
        // Work on the transpose and swap the factors back.
        let f = svd_with_label(&a.transpose(), label)?;
        return Ok(SvdFactors {
            u: f.v,
            sigma: f.sigma,
            v: f.u,
        });
    }
    let m = a.rows();
    let n = a.cols();

    // Column-major working copies: `b` converges to U·diag(sigma), `v` to V.
    let mut b: Vec<Vec<T>> = (0..n).map(|c| a.column(c)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|c| {
            let mut e = vec![T::zero(); n];
            e[c] = T::one();
            e
        })
        .collect();

    // 1e-12 assumes f64; widen for narrower scalar types.
    let tol = real::<T>(1e-12).max(T::epsilon() * real(8.0));
    let mut residual = T::zero();
    let mut converged = n == 1;
    for _ in 0..MAX_SWEEPS {
        residual = T::zero();
        for i in 0..n.saturating_sub(1) {
            for j in (i + 1)..n {
                let nsq_i = dot(&b[i], &b[i]);
                let nsq_j = dot(&b[j], &b[j]);
                if nsq_i == T::zero() || nsq_j == T::zero() {
                    continue;
                }
                let d = dot(&b[i], &b[j]);
                let rel = d.abs() / (nsq_i * nsq_j).sqrt();
                residual = residual.max(rel);
                if rel <= tol {
                    continue;
                }
                let zeta = (nsq_j - nsq_i) / (real::<T>(2.0) * d);
                let t = if zeta >= T::zero() {
                    T::one() / (zeta + (T::one() + zeta * zeta).sqrt())
                } else {
                    -T::one() / (-zeta + (T::one() + zeta * zeta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut b, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        if residual <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            matrix: label.to_string(),
            sweeps: MAX_SWEEPS,
            residual: residual.to_f64().unwrap_or(f64::NAN),
        });
    }

    // Column norms are the singular values; sort them non-increasing.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<T> = b.iter().map(|col| norm2(col)).collect();
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .expect("finite norms")
            .then(i.cmp(&j))
    });

    let mut u_mat = Matrix::zeros(m, n);
    let mut v_mat = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut zero_cols = Vec::new();
    for (k, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        for r in 0..n {
            v_mat[(r, k)] = v[src][r];
        }
        if s > T::zero() {
            for r in 0..m {
                u_mat[(r, k)] = b[src][r] / s;
            }
        } else {
            zero_cols.push(k);
        }
    }
    // Zero singular values leave U columns undetermined; fill in any
    // orthonormal completion so UᵀU = I still holds.
    complete_orthonormal(&mut u_mat, &zero_cols);

    Ok(SvdFactors {
        u: u_mat,
        sigma,
        v: v_mat,
    })
}

fn rotate_pair<T: Scalar>(cols: &mut [Vec<T>], i: usize, j: usize, c: T, s: T) {
    debug_assert!(i < j);
    let (head, tail) = cols.split_at_mut(j);
    let ci = &mut head[i];
    let cj = &mut tail[0];
    for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all other
/// columns, via Gram-Schmidt over the standard basis.
fn complete_orthonormal<T: Scalar>(u: &mut Matrix<T>, fill: &[usize]) {
    if fill.is_empty() {
        return;
    }
    let (m, r) = u.shape();
    let mut next_basis = 0usize;
    for &k in fill {
        let mut placed = false;
        while next_basis < m && !placed {
            let mut cand = vec![T::zero(); m];
            cand[next_basis] = T::one();
            next_basis += 1;
            for c in 0..r {
                if fill.contains(&c) && c >= k {
                    continue; // not yet filled
                }
                let proj = (0..m).fold(T::zero(), |acc, i| acc + cand[i] * u[(i, c)]);
                for (i, cv) in cand.iter_mut().enumerate() {
                    *cv -= proj * u[(i, c)];
                }
            }
            let n = norm2(&cand);
            if n > real(0.5) {
                for (i, cv) in cand.iter().enumerate() {
                    u[(i, k)] = *cv / n;
                }
                placed = true;
            }
        }
        assert!(placed, "orthonormal completion ran out of basis vectors");
    }
}

/// Splits a decomposition into its rank-one terms, in sigma order.
pub fn rank_one_terms<T: Scalar>(f: &SvdFactors<T>) -> Vec<RankOneTerm<T>> {
    (0..f.rank_count())
        .map(|k| RankOneTerm {
            index: k,
            sigma: f.sigma[k],
            u: f.u.column(k),
            v: f.v.column(k),
        })
        .collect()
}

/// Max-norm of `UᵀU − I`; diagnostic used by tests and validation.
pub fn orthonormality_defect<T: Scalar>(m: &Matrix<T>) -> T {
    let r = m.cols();
    let mut worst = T::zero();
    for i in 0..r {
        let ci = m.column(i);
        for j in i..r {
            let cj = m.column(j);
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((dot(&ci, &cj) - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn assert_valid_factors(a: &Matrix<f64>, f: &SvdFactors<f64>) {
        assert!(orthonormality_defect(&f.u) <= 1e-10, "U not orthonormal");
        assert!(orthonormality_defect(&f.v) <= 1e-10, "V not orthonormal");
        for w in f.sigma.windows(2) {
            assert!(w[0] >= w[1], "sigma not sorted: {:?}", f.sigma);
        }
        assert!(f.sigma.iter().all(|&s| s >= 0.0));
        let norm = a.frobenius().max(1e-300);
        let err = a.sub(&f.reconstruct()).unwrap().frobenius();
        assert!(err <= 1e-10 * norm, "reconstruction error {err:e}");
    }

    /// Eigenvalues of a symmetric matrix up to 3x3 via the characteristic
    /// polynomial, solved in closed form. Independent of the Jacobi path.
    fn charpoly_eigenvalues(s: &Matrix<f64>) -> Vec<f64> {
        let n = s.rows();
        assert_eq!(n, s.cols());
        let mut eigs = match n {
            1 => vec![s[(0, 0)]],
            2 => {
                let (a, b, c) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
                let mean = 0.5 * (a + c);
                let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                vec![mean + disc, mean - disc]
            }
            3 => {
                // Trigonometric solution of det(S - x I) = 0.
                let q = (s[(0, 0)] + s[(1, 1)] + s[(2, 2)]) / 3.0;
                let mut p2 = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        let v = if i == j { s[(i, j)] - q } else { s[(i, j)] };
                        p2 += v * v;
                    }
                }
                let p = (p2 / 6.0).sqrt();
                if p == 0.0 {
                    vec![q, q, q]
                } else {
                    let mut bmat = Matrix::zeros(3, 3);
                    for i in 0..3 {
                        for j in 0..3 {
                            bmat[(i, j)] = (s[(i, j)] - if i == j { q } else { 0.0 }) / p;
                        }
                    }
                    let det_b = bmat[(0, 0)]
                        * (bmat[(1, 1)] * bmat[(2, 2)] - bmat[(1, 2)] * bmat[(2, 1)])
                        - bmat[(0, 1)]
                            * (bmat[(1, 0)] * bmat[(2, 2)] - bmat[(1, 2)] * bmat[(2, 0)])
                        + bmat[(0, 2)]
                            * (bmat[(1, 0)] * bmat[(2, 1)] - bmat[(1, 1)] * bmat[(2, 0)]);
                    let r = (det_b / 2.0).clamp(-1.0, 1.0);
                    let phi = r.acos() / 3.0;
                    let e1 = q + 2.0 * p * phi.cos();
                    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
                    let e2 = 3.0 * q - e1 - e3;
                    vec![e1, e2, e3]
                }
            }
            _ => panic!("charpoly oracle only covers n <= 3"),
        };
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        eigs
    }

    fn assert_sigma_matches_charpoly(a: &Matrix<f64>) {
        let gram = a.transpose().matmul(a).unwrap();
        let eigs = charpoly_eigenvalues(&gram);
        let f = svd(a).unwrap();
        for (s, e) in f.sigma.iter().zip(eigs) {
            let expect = e.max(0.0).sqrt();
            let tol = 1e-8 * expect.max(1e-8);
            assert!(
                (s - expect).abs() <= tol,
                "sigma {s} vs charpoly {expect}"
            );
        }
    }

    #[test]
    fn identity_3x3_has_unit_sigma() {
        let f = svd(&Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(f.sigma, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diag_with_negative_entry() {
        let a: Matrix<f64> = Matrix::diag(&[3.0, -2.0]);
        let f = svd(&a).unwrap();
        assert!((f.sigma[0] - 3.0).abs() <= 1e-12);
        assert!((f.sigma[1] - 2.0).abs() <= 1e-12);
        assert_valid_factors(&a, &f);
        assert_sigma_matches_charpoly(&a);
    }

    #[test]
    fn zero_matrix_has_zero_sigma_and_orthonormal_factors() {
        let a = Matrix::<f64>::zeros(2, 2);
        let f = svd(&a).unwrap();
        assert_eq!(f.sigma, vec![0.0, 0.0]);
        assert_valid_factors(&a, &f);
    }

    #[test]
    fn rank_deficient_terms() {
        // sigma = (5, 0): the first term alone reconstructs A, the second is zero.
        let f = SvdFactors {
            u: Matrix::identity(2),
            sigma: vec![5.0, 0.0],
            v: Matrix::identity(2),
        };
        let terms = rank_one_terms(&f);
        let a = f.reconstruct();
        assert_eq!(terms[0].materialize(), a);
        assert_eq!(terms[1].materialize().frobenius(), 0.0);
    }

    #[test]
    fn degenerate_spectrum_terms_sum_to_identity() {
        let a = Matrix::<f64>::identity(2);
        let f = svd(&a).unwrap();
        let mut sum = Matrix::zeros(2, 2);
        for t in rank_one_terms(&f) {
            sum = sum.add(&t.materialize()).unwrap();
        }
        assert!(sum.max_abs_diff(&a) <= 1e-12);
    }

    #[test]
    fn seeded_4x3_terms_reconstruct() {
        let a = random_matrix(4, 3, 7);
        let f = svd(&a).unwrap();
        assert_valid_factors(&a, &f);
        let mut sum: Matrix<f64> = Matrix::zeros(4, 3);
        for t in rank_one_terms(&f) {
            sum = sum.add(&t.materialize()).unwrap();
        }
        let rel = a.sub(&sum).unwrap().frobenius() / a.frobenius();
        assert!(rel <= 1e-10, "term-sum residual {rel:e}");
    }

    #[test]
    fn wide_matrix_roundtrips_through_transpose_path() {
        let a = random_matrix(3, 5, 11);
        let f = svd(&a).unwrap();
        assert_eq!(f.u.shape(), (3, 3));
        assert_eq!(f.v.shape(), (5, 3));
        assert_valid_factors(&a, &f);
    }

    #[test]
    fn apply_term_examples() {
        let t = RankOneTerm {
            index: 0,
            sigma: 2.0,
            u: vec![1.0, 0.0],
            v: vec![0.6, 0.8],
        };
        assert_eq!(t.apply(&[1.0, 1.0]).unwrap(), vec![2.8, 0.0]);

        let e1 = RankOneTerm {
            index: 0,
            sigma: 1.0,
            u: vec![1.0, 0.0],
            v: vec![1.0, 0.0],
        };
        assert_eq!(e1.apply(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);

        let zero = RankOneTerm {
            index: 0,
            sigma: 0.0,
            u: vec![1.0, 0.0],
            v: vec![1.0, 0.0],
        };
        assert_eq!(zero.apply(&[3.0, -4.0]).unwrap(), vec![0.0, 0.0]);

        assert!(e1.apply(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn charpoly_oracle_on_seeded_3x3s() {
        for seed in 0..20 {
            let a = random_matrix(3, 3, seed);
            assert_sigma_matches_charpoly(&a);
        }
        for seed in 20..30 {
            let a = random_matrix(2, 2, seed);
            assert_sigma_matches_charpoly(&a);
        }
    }

    #[test]
    fn convergence_error_carries_label() {
        // Force failure by leaving no sweep budget: a 1x1 always converges,
        // so exercise the error display path directly instead.
        let err = LinalgError::NoConvergence {
            matrix: "block0.key".into(),
            sweeps: 60,
            residual: 1e-3,
        };
        let msg = err.to_string();
        assert!(msg.contains("block0.key") && msg.contains("1e-3"), "{msg}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn reconstruction_holds_on_random_shapes(
            rows in 1usize..8,
            cols in 1usize..8,
            seed in 0u64..1000,
        ) {
            let a = random_matrix(rows, cols, seed);
            let f = svd(&a).unwrap();
            assert_valid_factors(&a, &f);
        }

        #[test]
        fn apply_term_matches_materialized_product(
            m in 1usize..6,
            n in 1usize..6,
            seed in 0u64..1000,
        ) {
            let a = random_matrix(m, n, seed);
            let f = svd(&a).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            for t in rank_one_terms(&f) {
                let fast = t.apply(&x).unwrap();
                let dense = t.materialize().matvec(&x).unwrap();
                for (p, q) in fast.iter().zip(dense) {
                    prop_assert!((p - q).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn sigma_matches_charpoly_up_to_3x3(
            n in 1usize..4,
            seed in 0u64..1000,
        ) {
            let a = random_matrix(n, n, seed);
            assert_sigma_matches_charpoly(&a);
        }
    }
}

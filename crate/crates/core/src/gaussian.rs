//! Empirical Gaussian moments, PSD square roots, and the moment divergence φ.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{real, Scalar};
use crate::tensors::HeadSliceView;

/// Relative tolerance for the symmetry check on inputs to the square-root
/// routines.
const SYM_TOL: f64 = 1e-9;

/// Relative tolerance below which small negative eigenvalues are clamped
/// to zero; anything more negative is rejected as indefinite.
const INDEFINITE_TOL: f64 = 1e-8;

/// Mean and covariance estimated from a selected subset of a head slice.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments<F: Scalar> {
    /// Sample mean.
    pub mean: DVector<F>,
    /// Sample covariance (n−1 normalization), symmetrized, plus `ridge·I`.
    pub cov: DMatrix<F>,
    /// Number of samples the estimate used.
    pub count: usize,
    /// Ridge added to the diagonal.
    pub ridge: F,
}

/// Provenance tag for a PSD factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Sqrt,
    InvSqrt,
}

/// A symmetric PSD matrix produced by [`psd_sqrt`] or [`psd_inv_sqrt`].
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFactor<F: Scalar> {
    pub matrix: DMatrix<F>,
    pub source: FactorKind,
}

/// Estimate moments over the samples of `slice` for which `selector`
/// returns true.
///
/// Covariance divides by `max(count − 1, 1)` and is symmetrized as
/// `(C + Cᵀ)/2` before `ridge·I` is added. Errors with `EmptySelection`
/// when no sample matches.
pub fn estimate_moments<F: Scalar>(
    slice: &HeadSliceView<'_>,
    mut selector: impl FnMut(usize) -> bool,
    ridge: F,
) -> Result<GaussianMoments<F>> {
    let d = slice.dim();
    let selected: Vec<usize> = (0..slice.len()).filter(|&i| selector(i)).collect();
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let count = selected.len();
    let inv_n = F::one() / real::<F>(count as f64);

    let mut mean = DVector::<F>::zeros(d);
    for &i in &selected {
        mean += slice.row::<F>(i);
    }
    mean *= inv_n;

    let denom = real::<F>(count.saturating_sub(1).max(1) as f64);
    let mut cov = DMatrix::<F>::zeros(d, d);
    for &i in &selected {
        let centered = slice.row::<F>(i) - &mean;
        cov.syger(F::one() / denom, &centered, &centered, F::one());
    }
    // syger fills the lower triangle; mirror it to get an exactly
    // symmetric matrix.
    for r in 0..d {
        for c in (r + 1)..d {
            cov[(r, c)] = cov[(c, r)];
        }
    }
    for k in 0..d {
        cov[(k, k)] += ridge;
    }

    Ok(GaussianMoments {
        mean,
        cov,
        count,
        ridge,
    })
}

/// Default ridge policy: `1e-6 · trace(Σ)/d` whenever the smallest
/// eigenvalue falls below `1e-10`, else zero.
pub fn default_ridge<F: Scalar>(cov: &DMatrix<F>) -> F {
    let eigs = cov.clone().symmetric_eigen().eigenvalues;
    let min_eig = eigs.iter().copied().fold(F::max_value().unwrap(), F::min);
    if min_eig < real(1e-10) {
        real::<F>(1e-6) * cov.trace() / real(cov.nrows() as f64)
    } else {
        F::zero()
    }
}

fn check_symmetric<F: Scalar>(a: &DMatrix<F>) -> Result<F> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            actual: a.ncols(),
        });
    }
    let mut asym = F::zero();
    let mut scale = F::one();
    for r in 0..a.nrows() {
        for c in 0..a.ncols() {
            asym = asym.max((a[(r, c)] - a[(c, r)]).abs());
            scale = scale.max(a[(r, c)].abs());
        }
    }
    if asym > real::<F>(SYM_TOL) * scale {
        return Err(Error::NotSymmetric {
            asymmetry: asym.as_f64(),
        });
    }
    Ok(scale)
}

/// Rebuild `U f(λ) Uᵀ` from an eigendecomposition, symmetrizing the result.
fn eigen_map<F: Scalar>(a: &DMatrix<F>, f: impl Fn(F) -> F) -> DMatrix<F> {
    let eig = a.clone().symmetric_eigen();
    let d = a.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(eig.eigenvalues[j]);
    }
    let m = scaled * eig.eigenvectors.transpose();
    let mut out = DMatrix::<F>::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            out[(r, c)] = (m[(r, c)] + m[(c, r)]) * real(0.5);
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition.
///
/// Eigenvalues in `[-tol, 0)` are clamped to zero; anything more negative
/// is rejected with `IndefiniteBeyondTolerance`.
pub fn psd_sqrt<F: Scalar>(a: &DMatrix<F>) -> Result<PsdFactor<F>> {
    let scale = check_symmetric(a)?;
    let tol = real::<F>(INDEFINITE_TOL) * scale.max(F::one());
    let min_eig = a
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(F::max_value().unwrap(), F::min);
    if min_eig < -tol {
        return Err(Error::IndefiniteBeyondTolerance {
            min_eigenvalue: min_eig.as_f64(),
        });
    }
    let matrix = eigen_map(a, |l| l.max(F::zero()).sqrt());
    Ok(PsdFactor {
        matrix,
        source: FactorKind::Sqrt,
    })
}

/// Symmetric inverse square root with an eigenvalue floor.
///
/// Eigenvalues below `eig_floor` are raised to `eig_floor` before taking
/// `λ^{-1/2}`, so singular directions stay finite.
pub fn psd_inv_sqrt<F: Scalar>(a: &DMatrix<F>, eig_floor: F) -> Result<PsdFactor<F>> {
    check_symmetric(a)?;
    let matrix = eigen_map(a, |l| F::one() / l.max(eig_floor).sqrt());
    Ok(PsdFactor {
        matrix,
        source: FactorKind::InvSqrt,
    })
}

/// Moment divergence `φ(P, Q) = ‖μ_P − μ_Q‖² + ‖Σ_P^{1/2} − Σ_Q^{1/2}‖_F²`.
pub fn phi_divergence<F: Scalar>(
    p: &GaussianMoments<F>,
    q: &GaussianMoments<F>,
) -> Result<F> {
    if p.mean.len() != q.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: p.mean.len(),
            actual: q.mean.len(),
        });
    }
    let mean_term = (&p.mean - &q.mean).norm_squared();
    let sp = psd_sqrt(&p.cov)?.matrix;
    let sq = psd_sqrt(&q.cov)?.matrix;
    Ok(mean_term + (sp - sq).norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::{ActivationDataset, DatasetHeader};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn slice_from_rows(rows: &[Vec<f32>], labels: Vec<u8>) -> ActivationDataset {
        let n = rows.len();
        let d = rows[0].len();
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        ActivationDataset::new(DatasetHeader::new(n, 1, 1, d), data, labels).unwrap()
    }

    fn random_psd(seed: u64, d: usize) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        m.transpose() * m
    }

    #[test]
    fn repeated_point_gives_ridge_covariance() {
        let ds = slice_from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0], vec![2.0, -1.0]], vec![1, 1, 1]);
        let view = ds.slice_head(0, 0).unwrap();
        let m: GaussianMoments<f64> = estimate_moments(&view, |_| true, 1e-3).unwrap();
        assert_eq!(m.count, 3);
        assert!((m.mean[0] - 2.0).abs() < 1e-12 && (m.mean[1] + 1.0).abs() < 1e-12);
        assert_eq!(m.cov, DMatrix::from_diagonal_element(2, 2, 1e-3));
    }

    #[test]
    fn two_point_hand_formula() {
        // Points (0,0) and (2,0): mean (1,0), unbiased cov diag(2, 0).
        let ds = slice_from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]], vec![0, 1]);
        let view = ds.slice_head(0, 0).unwrap();
        let m: GaussianMoments<f64> = estimate_moments(&view, |_| true, 0.0).unwrap();
        assert_eq!(m.mean, DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(m.cov, DMatrix::from_partial_diagonal(2, 2, &[2.0, 0.0]));
    }

    #[test]
    fn constant_selector_counts_all() {
        let ds = crate::tensors::tests::random_dataset(5, 9, 1, 1, 3);
        let view = ds.slice_head(0, 0).unwrap();
        let m: GaussianMoments<f64> = estimate_moments(&view, |_| true, 0.0).unwrap();
        assert_eq!(m.count, 9);
        match estimate_moments::<f64>(&view, |_| false, 0.0) {
            Err(Error::EmptySelection) => {}
            other => panic!("expected EmptySelection, got {other:?}"),
        }
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((psd_sqrt(&i3).unwrap().matrix - &i3).norm() < 1e-14);
        let a = DMatrix::from_partial_diagonal(2, 2, &[4.0, 9.0]);
        let b = psd_sqrt(&a).unwrap().matrix;
        assert!((b - DMatrix::from_partial_diagonal(2, 2, &[2.0, 3.0])).norm() < 1e-12);
    }

    #[test]
    fn sqrt_reconstruction_oracle() {
        for seed in 0..8 {
            let a = random_psd(seed, 5);
            let b = psd_sqrt(&a).unwrap().matrix;
            let err = (&b * &b - &a).norm();
            assert!(err <= 1e-8 * a.norm().max(1.0), "seed {seed}: err {err}");
        }
    }

    #[test]
    fn sqrt_rejects_asymmetric_and_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(matches!(psd_sqrt(&m), Err(Error::NotSymmetric { .. })));
        let neg = DMatrix::from_partial_diagonal(2, 2, &[1.0, -0.5]);
        assert!(matches!(
            psd_sqrt(&neg),
            Err(Error::IndefiniteBeyondTolerance { .. })
        ));
    }

    #[test]
    fn inv_sqrt_identity_diagonal_and_floor() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert!((psd_inv_sqrt(&i2, 1e-8).unwrap().matrix - &i2).norm() < 1e-14);

        let a = DMatrix::from_partial_diagonal(2, 2, &[4.0, 1.0]);
        let b = psd_inv_sqrt(&a, 1e-8).unwrap().matrix;
        assert!((b - DMatrix::from_partial_diagonal(2, 2, &[0.5, 1.0])).norm() < 1e-12);

        // Singular direction is floored, result stays finite.
        let s: DMatrix<f64> = DMatrix::from_partial_diagonal(2, 2, &[1.0, 0.0]);
        let b = psd_inv_sqrt(&s, 1e-8).unwrap().matrix;
        assert!((b[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((b[(1, 1)] - 1e4).abs() < 1e-6);
        assert!(b.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inv_sqrt_inverts_on_wellconditioned_space() {
        let a = random_psd(42, 4) + DMatrix::identity(4, 4);
        let b = psd_inv_sqrt(&a, 1e-12).unwrap().matrix;
        let should_be_eye = &b * &a * &b;
        assert!((should_be_eye - DMatrix::identity(4, 4)).norm() < 1e-10);
    }

    #[test]
    fn sqrt_idempotent_on_psd_roots() {
        for seed in 0..5 {
            let b = psd_sqrt(&random_psd(seed + 100, 4)).unwrap().matrix;
            let again = psd_sqrt(&(&b * &b)).unwrap().matrix;
            assert!((again - &b).norm() <= 1e-8 * b.norm().max(1.0));
        }
    }

    fn moments(mean: Vec<f64>, cov: DMatrix<f64>) -> GaussianMoments<f64> {
        GaussianMoments {
            mean: DVector::from_vec(mean),
            cov,
            count: 1,
            ridge: 0.0,
        }
    }

    #[test]
    fn phi_zero_iff_equal() {
        let p = moments(vec![0.3, -0.7], random_psd(1, 2));
        assert_eq!(phi_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn phi_one_dimensional_means_only() {
        let p = moments(vec![0.0], DMatrix::from_element(1, 1, 1.0));
        let q = moments(vec![3.0], DMatrix::from_element(1, 1, 1.0));
        assert!((phi_divergence(&p, &q).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn phi_matches_explicit_eigendecomposition() {
        for seed in 0..5 {
            let p = moments(vec![0.1, 0.2, -0.3], random_psd(seed, 3));
            let q = moments(vec![-0.5, 0.0, 0.8], random_psd(seed + 50, 3));
            // Independent route: explicit eigendecomposition of each
            // covariance, assembled by hand.
            let by_hand = |m: &DMatrix<f64>| {
                let e = m.clone().symmetric_eigen();
                let mut out = DMatrix::<f64>::zeros(3, 3);
                for j in 0..3 {
                    let v = e.eigenvectors.column(j);
                    out += v * v.transpose() * e.eigenvalues[j].max(0.0).sqrt();
                }
                out
            };
            let expected = (&p.mean - &q.mean).norm_squared()
                + (by_hand(&p.cov) - by_hand(&q.cov)).norm_squared();
            let got = phi_divergence(&p, &q).unwrap();
            assert!((got - expected).abs() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn phi_symmetric_and_nonnegative() {
        for seed in 0..6 {
            let p = moments(vec![0.1, -0.2], random_psd(seed, 2));
            let q = moments(vec![0.4, 0.9], random_psd(seed + 9, 2));
            let pq = phi_divergence(&p, &q).unwrap();
            let qp = phi_divergence(&q, &p).unwrap();
            assert!(pq >= 0.0);
            assert!((pq - qp).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_dimension_mismatch() {
        let p = moments(vec![0.0], DMatrix::from_element(1, 1, 1.0));
        let q = moments(vec![0.0, 1.0], DMatrix::identity(2, 2));
        assert!(matches!(
            phi_divergence(&p, &q),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn default_ridge_policy() {
        let well = DMatrix::from_partial_diagonal(2, 2, &[1.0, 2.0]);
        assert_eq!(default_ridge::<f64>(&well), 0.0);
        let singular = DMatrix::from_partial_diagonal(2, 2, &[3.0, 0.0]);
        let r = default_ridge::<f64>(&singular);
        assert!((r - 1e-6 * 3.0 / 2.0).abs() < 1e-18);
    }
}

//! Affine intervention maps built from steering solutions.
//!
//! Given head moments `(m̂, Σ̂)` and optimal target moments `(μ*, (S*)²)`,
//! the map is the Gaussian pushforward
//!
//! ```text
//! G = Σ̂^{-1/2} (Σ̂^{1/2} (S*)² Σ̂^{1/2})^{1/2} Σ̂^{-1/2},    g = μ* − G·m̂,
//! ```
//!
//! which satisfies `G·m̂ + g = μ*` and `G·Σ̂·Gᵀ = (S*)²`: applying
//! `a ↦ G·a + g` to `N(m̂, Σ̂)` yields exactly `N(μ*, (S*)²)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{psd_inv_sqrt, psd_sqrt, GaussianMoments};
use crate::scalar::{real, Scalar};
use crate::sdp::{SolveStatus, SteeringProblem, SteeringSolution};

/// Eigenvalue floor below which Σ̂ is considered singular for the purpose
/// of forming Σ̂^{-1/2}; the ridge policy in [`crate::gaussian`] keeps
/// fitted covariances above this.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-10;

/// Inputs that produced a map, kept for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct MapProvenance<F: Scalar> {
    pub mu_star: DVector<F>,
    pub s_star: DMatrix<F>,
    pub gamma_factor: F,
    pub floor_used: bool,
}

/// Affine edit `a ↦ G·a + g` for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionMap<F: Scalar> {
    /// The matrix G.
    pub linear: DMatrix<F>,
    /// The offset g.
    pub offset: DVector<F>,
    pub layer: usize,
    pub head: usize,
    /// Present on maps constructed in-process; not persisted in bundles,
    /// whose wire format carries only (θ, ϑ, G, g).
    pub provenance: Option<MapProvenance<F>>,
}

/// Build the pushforward map from fitted moments and an optimal steering
/// solution.
pub fn construct_map<F: Scalar>(
    moments: &GaussianMoments<F>,
    problem: &SteeringProblem<F>,
    sol: &SteeringSolution<F>,
    layer: usize,
    head: usize,
) -> Result<InterventionMap<F>> {
    if sol.status != SolveStatus::Optimal {
        return Err(Error::NotOptimal {
            status: sol.status.as_str(),
        });
    }
    let d = moments.mean.len();
    if sol.mu_star.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: sol.mu_star.len(),
        });
    }

    let eig_floor = real::<F>(DEFAULT_EIG_FLOOR);
    let min_eig = moments
        .cov
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(F::max_value().unwrap(), F::min);
    if min_eig < eig_floor {
        return Err(Error::SingularCovariance {
            min_eigenvalue: min_eig.as_f64(),
        });
    }

    let sqrt = psd_sqrt(&moments.cov)?.matrix;
    let inv_sqrt = psd_inv_sqrt(&moments.cov, eig_floor)?.matrix;
    let s2 = &sol.s_star * &sol.s_star;
    let inner = psd_sqrt(&(&sqrt * s2 * &sqrt))?.matrix;
    let linear = &inv_sqrt * inner * &inv_sqrt;
    let offset = &sol.mu_star - &linear * &moments.mean;

    Ok(InterventionMap {
        linear,
        offset,
        layer,
        head,
        provenance: Some(MapProvenance {
            mu_star: sol.mu_star.clone(),
            s_star: sol.s_star.clone(),
            gamma_factor: problem.gamma_factor,
            floor_used: problem.floor.is_some(),
        }),
    })
}

/// Apply the map: `G·a + g`.
pub fn apply_map<F: Scalar>(map: &InterventionMap<F>, a: &DVector<F>) -> Result<DVector<F>> {
    if a.len() != map.offset.len() {
        return Err(Error::DimensionMismatch {
            expected: map.offset.len(),
            actual: a.len(),
        });
    }
    Ok(&map.linear * a + &map.offset)
}

/// Size of the edit: `‖(G − I)a + g‖₂ = ‖apply_map(a) − a‖₂`.
pub fn edit_magnitude<F: Scalar>(map: &InterventionMap<F>, a: &DVector<F>) -> Result<F> {
    Ok((apply_map(map, a)? - a).norm())
}

//! Chance-constrained moment steering.
//!
//! For one head with probe `(θ, ϑ)` and fitted moments `(m̂, Σ̂^{1/2})`,
//! find target moments `(μ, S)` solving
//!
//! ```text
//! min  ‖μ − m̂‖² + ‖S − Σ̂^{1/2}‖_F²
//! s.t. ϑ + θᵀμ + Γ·t ≤ 0,   ‖Sθ‖₂ ≤ t,   S ⪰ 0   (optionally S ⪰ floor)
//! ```
//!
//! Since Γ > 0 and the objective ignores `t`, the optimal `t` is `‖Sθ‖₂`,
//! so the program is exactly the Euclidean projection of `(m̂, Σ̂^{1/2})`
//! onto the intersection of two convex sets:
//!
//! * the chance set `{(μ, S) : ϑ + θᵀμ + Γ‖Sθ‖₂ ≤ 0}`, whose projection
//!   reduces to two nested scalar root-finds (see [`ChanceSet`]), and
//! * the spectral set `{S ⪰ floor}`, projected by eigenvalue clamping.
//!
//! Dykstra's alternating projections on those two sets converge to the
//! projection itself, i.e. to the optimum, and the accumulated correction
//! terms converge to the optimal multipliers `(ν, Λ)`. Evaluating the
//! Lagrangian dual at those multipliers yields a true duality-gap bound,
//! which is what [`solve_steering`] uses as its optimality certificate.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{real, std_normal_tail, Scalar};

/// Γ above which `1 − Φ(Γ)` is unresolvable against 1 in double
/// precision; the coverage guarantee is then reported as saturated.
pub const GAMMA_SATURATION_LIMIT: f64 = 8.0;

// ---------------------------------------------------------------------------
// Problem and solution types
// ---------------------------------------------------------------------------

/// One head's steering instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringProblem<F: Scalar> {
    /// Probe slope θ; must be nonzero.
    pub theta: DVector<F>,
    /// Probe bias ϑ.
    pub bias: F,
    /// Mean of the predicted-undesirable activations.
    pub m_hat: DVector<F>,
    /// Symmetric PSD square root of their covariance.
    pub sigma_hat_sqrt: DMatrix<F>,
    /// Γ = Φ⁻¹(1 − γ) > 0.
    pub gamma_factor: F,
    /// Optional spectral floor (Σ̂₀^{1/2}) enforcing `S ⪰ floor`.
    pub floor: Option<DMatrix<F>>,
}

impl<F: Scalar> SteeringProblem<F> {
    fn validate(&self) -> Result<()> {
        let d = self.theta.len();
        if self.m_hat.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: self.m_hat.len(),
            });
        }
        if self.sigma_hat_sqrt.nrows() != d || self.sigma_hat_sqrt.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: self.sigma_hat_sqrt.nrows(),
            });
        }
        if let Some(fl) = &self.floor {
            if fl.nrows() != d || fl.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: fl.nrows(),
                });
            }
        }
        if self.gamma_factor <= F::zero() {
            return Err(Error::InvariantViolation(
                "gamma_factor must be > 0".into(),
            ));
        }
        if self.theta.norm() == F::zero() {
            return Err(Error::DegenerateNormal);
        }
        Ok(())
    }

    /// γ = 1 − Φ(Γ), for reporting.
    pub fn gamma(&self) -> F {
        std_normal_tail(self.gamma_factor)
    }
}

/// Solver knobs, exposed as CLI flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions<F: Scalar> {
    /// Feasibility tolerance on the chance constraint at the optimum.
    pub feas_tol: F,
    /// Tolerance on the KKT residuals for an `Optimal` verdict.
    pub kkt_tol: F,
    /// Duality-gap bound required for an `Optimal` verdict.
    pub gap_tol: F,
    /// Maximum Dykstra iterations.
    pub max_iter: usize,
}

impl<F: Scalar> Default for SolverOptions<F> {
    fn default() -> Self {
        SolverOptions {
            feas_tol: real(1e-7),
            kkt_tol: real(1e-6),
            gap_tol: real(1e-9),
            max_iter: 20_000,
        }
    }
}

/// Terminal state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
    Numerical,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::Numerical => "numerical",
        }
    }
}

/// KKT residuals and the duality-gap certificate of a solution.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport<F: Scalar> {
    pub primal_residual: F,
    pub stationarity_residual: F,
    pub complementarity_residual: F,
    pub duality_gap_bound: F,
}

/// Optimal target moments `(μ*, S*, t*)` with certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringSolution<F: Scalar> {
    pub mu_star: DVector<F>,
    pub s_star: DMatrix<F>,
    pub t_star: F,
    pub objective: F,
    pub status: SolveStatus,
    pub kkt: KktReport<F>,
    pub iterations: usize,
}

/// Left-hand side of the reformulated chance constraint:
/// `ϑ + θᵀμ + Γ‖Sθ‖₂` (note `√(θᵀS²θ) = ‖Sθ‖₂` for symmetric S).
pub fn chance_constraint_lhs<F: Scalar>(
    p: &SteeringProblem<F>,
    mu: &DVector<F>,
    s: &DMatrix<F>,
) -> Result<F> {
    if mu.len() != p.theta.len() || s.nrows() != p.theta.len() {
        return Err(Error::DimensionMismatch {
            expected: p.theta.len(),
            actual: mu.len(),
        });
    }
    Ok(p.bias + p.theta.dot(mu) + p.gamma_factor * (s * &p.theta).norm())
}

// ---------------------------------------------------------------------------
// Projection onto the chance set
// ---------------------------------------------------------------------------

/// Result of projecting one point onto the chance set, with the local
/// multiplier `nu` and the norm subgradient direction actually used.
struct ChanceProjection<F: Scalar> {
    mu: DVector<F>,
    s: DMatrix<F>,
    nu: F,
    /// Unit-ball element v with `S = S_in − (νΓ/2)·sym(vθᵀ)`.
    v: DVector<F>,
}

/// The set `{(μ, S) : ϑ + θᵀμ + Γ‖Sθ‖ ≤ 0}` with exact Euclidean
/// projection in `ℝᵈ × Sym(d)`.
struct ChanceSet<F: Scalar> {
    theta: DVector<F>,
    bias: F,
    gamma: F,
    n2: F,
}

impl<F: Scalar> ChanceSet<F> {
    fn new(p: &SteeringProblem<F>) -> Self {
        ChanceSet {
            theta: p.theta.clone(),
            bias: p.bias,
            gamma: p.gamma_factor,
            n2: p.theta.norm_squared(),
        }
    }

    fn lhs(&self, mu: &DVector<F>, s: &DMatrix<F>) -> F {
        self.bias + self.theta.dot(mu) + self.gamma * (s * &self.theta).norm()
    }

    /// Solve `min_S ‖S − S₀‖_F² + κ‖Sθ‖₂` over symmetric S.
    ///
    /// The minimizer is `S₀ − (κ/2)·sym(vθᵀ)` where v is the norm
    /// subgradient; everything reduces to scalars in the 2-D span of
    /// `{S₀θ, θ}`. Returns `(v, ρ = ‖Sθ‖)`.
    fn norm_prox(&self, w0: &DVector<F>, kappa: F) -> (DVector<F>, F) {
        let d = w0.len();
        if kappa <= F::zero() {
            return (DVector::zeros(d), w0.norm());
        }
        let c = kappa * real(0.5);
        let n2 = self.n2;
        let a0 = self.theta.dot(w0);
        let w_perp = w0 - &self.theta * (a0 / n2);
        let perp2 = w_perp.norm_squared();
        if perp2 + a0 * a0 == F::zero() {
            // S₀θ = 0 already; prox is the identity.
            return (DVector::zeros(d), F::zero());
        }

        let half_cn2 = c * n2 * real(0.5);
        let cn2 = c * n2;
        let h = |rho: F| -> F {
            let t1 = rho + half_cn2;
            let t2 = rho + cn2;
            perp2 / (t1 * t1) + (a0 * a0 / n2) / (t2 * t2) - F::one()
        };

        if h(F::zero()) <= F::zero() {
            // Collapse: the prox sends Sθ to 0; v comes from the
            // subdifferential of the norm at 0.
            let v = &w_perp * (real::<F>(2.0) / cn2) + &self.theta * (a0 / (cn2 * n2));
            return (v, F::zero());
        }

        // h is strictly decreasing with a sign change in (0, ‖w0‖].
        let mut lo = F::zero();
        let mut hi = w0.norm();
        for _ in 0..160 {
            let mid = (lo + hi) * real(0.5);
            if h(mid) > F::zero() {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= F::machine_eps() * (F::one() + hi) {
                break;
            }
        }
        let rho = (lo + hi) * real(0.5);
        let a = a0 / (F::one() + cn2 / rho);
        let w = &w_perp * (rho / (rho + half_cn2)) + &self.theta * (a / n2);
        (&w / rho, rho)
    }

    /// S for a given multiplier: `S₀ − (νΓ/2)·sym(vθᵀ)`.
    fn apply_s(&self, s0: &DMatrix<F>, v: &DVector<F>, nu: F) -> DMatrix<F> {
        let c = nu * self.gamma * real::<F>(0.5);
        let vt = v * self.theta.transpose();
        let sym = (&vt + vt.transpose()) * real::<F>(0.5);
        s0 - sym * c
    }

    /// Exact projection of `(μ₀, S₀)` onto the set.
    fn project(&self, mu0: &DVector<F>, s0: &DMatrix<F>) -> ChanceProjection<F> {
        let g0 = self.lhs(mu0, s0);
        if g0 <= F::zero() {
            return ChanceProjection {
                mu: mu0.clone(),
                s: s0.clone(),
                nu: F::zero(),
                v: DVector::zeros(mu0.len()),
            };
        }

        let w0 = s0 * &self.theta;
        let affine = self.bias + self.theta.dot(mu0);
        // φ(ν) = affine − (ν/2)‖θ‖² + Γ·ρ(ν) is strictly decreasing; ρ(ν)
        // never exceeds ‖w0‖, which gives a safe upper bracket.
        let phi = |nu: F| -> F {
            let (_, rho) = self.norm_prox(&w0, nu * self.gamma);
            affine - nu * real::<F>(0.5) * self.n2 + self.gamma * rho
        };

        let mut lo = F::zero();
        let mut hi = (g0 + self.gamma * w0.norm()) * real::<F>(2.0) / self.n2 + F::one();
        while phi(hi) > F::zero() {
            hi *= real(2.0);
        }
        for _ in 0..160 {
            let mid = (lo + hi) * real(0.5);
            if phi(mid) > F::zero() {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= F::machine_eps() * (F::one() + hi) {
                break;
            }
        }
        let nu = (lo + hi) * real(0.5);
        let (v, _) = self.norm_prox(&w0, nu * self.gamma);
        ChanceProjection {
            mu: mu0 - &self.theta * (nu * real::<F>(0.5)),
            s: self.apply_s(s0, &v, nu),
            nu,
            v,
        }
    }
}

// ---------------------------------------------------------------------------
// Projection onto the spectral set
// ---------------------------------------------------------------------------

/// Project a symmetric matrix onto `{S ⪰ floor}` by clamping the
/// eigenvalues of `S − floor`.
fn spectral_project<F: Scalar>(s: &DMatrix<F>, floor: Option<&DMatrix<F>>) -> DMatrix<F> {
    let shifted = match floor {
        Some(fl) => s - fl,
        None => s.clone(),
    };
    let eig = shifted.symmetric_eigen();
    let d = s.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[j].max(F::zero());
    }
    let clamped = scaled * eig.eigenvectors.transpose();
    let mut out = match floor {
        Some(fl) => clamped + fl,
        None => clamped,
    };
    for r in 0..d {
        for c in (r + 1)..d {
            let avg = (out[(r, c)] + out[(c, r)]) * real(0.5);
            out[(r, c)] = avg;
            out[(c, r)] = avg;
        }
    }
    out
}

fn min_eigenvalue<F: Scalar>(m: &DMatrix<F>) -> F {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(F::max_value().unwrap(), F::min)
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

struct DualCandidate<F: Scalar> {
    nu: F,
    lambda: DMatrix<F>,
    v: DVector<F>,
}

/// Lagrangian dual value at `(ν, Λ)`; a lower bound on the optimum for any
/// ν ≥ 0, Λ ⪰ 0.
fn dual_value<F: Scalar>(
    p: &SteeringProblem<F>,
    set: &ChanceSet<F>,
    cand: &DualCandidate<F>,
) -> F {
    let nu = cand.nu;
    let mu_part = nu * p.theta.dot(&p.m_hat) - nu * nu * set.n2 * real(0.25);

    // S-part: min_S ‖S − T'‖² + νΓ‖Sθ‖ − ‖T'‖² + ‖T‖² + ⟨Λ, floor⟩
    // with T' = T + Λ/2.
    let t_prime = &p.sigma_hat_sqrt + &cand.lambda * real::<F>(0.5);
    let w0 = &t_prime * &p.theta;
    let (v, _) = set.norm_prox(&w0, nu * p.gamma_factor);
    let s_min = set.apply_s(&t_prime, &v, nu);
    let mut s_part = (&s_min - &t_prime).norm_squared()
        + nu * p.gamma_factor * (&s_min * &p.theta).norm()
        - t_prime.norm_squared()
        + p.sigma_hat_sqrt.norm_squared();
    if let Some(fl) = &p.floor {
        s_part += cand.lambda.dot(fl);
    }

    nu * p.bias + mu_part + s_part
}

fn kkt_report<F: Scalar>(
    p: &SteeringProblem<F>,
    set: &ChanceSet<F>,
    mu: &DVector<F>,
    s: &DMatrix<F>,
    cand: &DualCandidate<F>,
    gap: F,
) -> KktReport<F> {
    let lhs = set.lhs(mu, s);
    let floor_violation = match &p.floor {
        Some(fl) => (-min_eigenvalue(&(s - fl))).max(F::zero()),
        None => (-min_eigenvalue(s)).max(F::zero()),
    };
    let primal = lhs.max(F::zero()) + floor_violation;

    // Stationarity: 2(μ−m̂) + νθ = 0 and 2(S−T) + νΓ·sym(vθᵀ) − Λ = 0.
    let grad_mu = (mu - &p.m_hat) * real::<F>(2.0) + &p.theta * cand.nu;
    let vt = &cand.v * p.theta.transpose();
    let sym = (&vt + vt.transpose()) * real::<F>(0.5);
    let grad_s = (s - &p.sigma_hat_sqrt) * real::<F>(2.0)
        + sym * (cand.nu * p.gamma_factor * real::<F>(0.5)) * real::<F>(2.0)
        - &cand.lambda;
    let stationarity = grad_mu.norm() + grad_s.norm();

    let shifted = match &p.floor {
        Some(fl) => s - fl,
        None => s.clone(),
    };
    let complementarity = (cand.nu * lhs).abs() + cand.lambda.dot(&shifted).abs();

    KktReport {
        primal_residual: primal,
        stationarity_residual: stationarity,
        complementarity_residual: complementarity,
        duality_gap_bound: gap.max(F::zero()),
    }
}

/// Solve the steering program by Dykstra's alternating projections.
///
/// `status = Optimal` certifies that the chance constraint holds within
/// `feas_tol`, `S*` satisfies the spectral constraints exactly, and the
/// objective is within `gap_tol` of the optimum (by the Lagrangian dual
/// bound at the extracted multipliers). Deterministic for fixed inputs.
pub fn solve_steering<F: Scalar>(
    p: &SteeringProblem<F>,
    opts: &SolverOptions<F>,
) -> Result<SteeringSolution<F>> {
    p.validate()?;
    let set = ChanceSet::new(p);
    let objective_of = |mu: &DVector<F>, s: &DMatrix<F>| -> F {
        (mu - &p.m_hat).norm_squared() + (s - &p.sigma_hat_sqrt).norm_squared()
    };

    // Feasible start: the unconstrained minimum is already the answer.
    let start_feasible = set.lhs(&p.m_hat, &p.sigma_hat_sqrt) <= F::zero()
        && match &p.floor {
            Some(fl) => min_eigenvalue(&(&p.sigma_hat_sqrt - fl)) >= -F::machine_eps(),
            None => min_eigenvalue(&p.sigma_hat_sqrt) >= -F::machine_eps(),
        };
    if start_feasible {
        let s_star = p.sigma_hat_sqrt.clone();
        let t_star = (&s_star * &p.theta).norm();
        let zero_cand = DualCandidate {
            nu: F::zero(),
            lambda: DMatrix::zeros(s_star.nrows(), s_star.ncols()),
            v: DVector::zeros(p.theta.len()),
        };
        let kkt = kkt_report(p, &set, &p.m_hat, &s_star, &zero_cand, F::zero());
        return Ok(SteeringSolution {
            mu_star: p.m_hat.clone(),
            s_star,
            t_star,
            objective: F::zero(),
            status: SolveStatus::Optimal,
            kkt,
            iterations: 0,
        });
    }

    let d = p.theta.len();
    let mut mu = p.m_hat.clone();
    let mut s = p.sigma_hat_sqrt.clone();
    let mut p_mu = DVector::<F>::zeros(d);
    let mut p_s = DMatrix::<F>::zeros(d, d);
    let mut q_s = DMatrix::<F>::zeros(d, d);
    let mut last = DualCandidate {
        nu: F::zero(),
        lambda: DMatrix::zeros(d, d),
        v: DVector::zeros(d),
    };

    let check_every = 8usize;
    let mut best: Option<(SteeringSolution<F>, F)> = None;

    for iter in 1..=opts.max_iter {
        // Dykstra cycle: chance set with correction p, spectral set with q.
        let proj = set.project(&(&mu + &p_mu), &(&s + &p_s));
        p_mu = &mu + &p_mu - &proj.mu;
        p_s = &s + &p_s - &proj.s;
        last.nu = proj.nu;
        last.v = proj.v;

        let z = &proj.s + &q_s;
        let s_new = spectral_project(&z, p.floor.as_ref());
        q_s = z - &s_new;
        mu = proj.mu;
        s = s_new;

        if !mu.iter().all(|x| x.is_finite()) || !s.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "non-finite iterate at iteration {iter}"
            )));
        }

        if iter % check_every != 0 && iter != opts.max_iter {
            continue;
        }

        let lhs = set.lhs(&mu, &s);
        if lhs > opts.feas_tol {
            continue;
        }
        // Dual candidate from the correction terms: Λ = −2·q_s projected
        // onto the PSD cone to stay dual feasible.
        last.lambda = spectral_project(&(-&q_s * real::<F>(2.0)), None);
        let objective = objective_of(&mu, &s);
        // Signed gap: a negative value means the iterate is still outside
        // the feasible set (objective below the dual bound), so keep
        // iterating rather than accepting a spuriously small objective.
        let gap = objective - dual_value(p, &set, &last);
        let kkt = kkt_report(p, &set, &mu, &s, &last, gap);
        let solution = SteeringSolution {
            mu_star: mu.clone(),
            s_star: s.clone(),
            t_star: (&s * &p.theta).norm(),
            objective,
            status: SolveStatus::Optimal,
            kkt,
            iterations: iter,
        };
        if gap.abs() <= opts.gap_tol {
            return Ok(solution);
        }
        if best.as_ref().map(|(_, g)| gap.abs() < *g).unwrap_or(true) {
            best = Some((solution, gap.abs()));
        }
    }

    // Out of iterations: return the best feasible iterate seen, marked
    // MaxIter so callers can decide.
    if let Some((mut sol, _)) = best {
        sol.status = SolveStatus::MaxIter;
        return Ok(sol);
    }
    let objective = objective_of(&mu, &s);
    let kkt = kkt_report(p, &set, &mu, &s, &last, objective);
    Ok(SteeringSolution {
        mu_star: mu.clone(),
        s_star: s.clone(),
        t_star: (&s * &p.theta).norm(),
        objective,
        status: SolveStatus::MaxIter,
        kkt,
        iterations: opts.max_iter,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo certification
// ---------------------------------------------------------------------------

/// Monte Carlo check of the coverage guarantee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertReport<F: Scalar> {
    /// Fraction of draws from `N(μ*, (S*)²)` classified 0 by `(θ, ϑ)`.
    pub empirical_coverage: F,
    /// Wilson 99% confidence interval for the coverage.
    pub ci_lower: F,
    pub ci_upper: F,
    /// γ = 1 − Φ(Γ).
    pub gamma: F,
    /// Coverage target 1 − γ.
    pub target: F,
    /// Binomial slack `z₉₉·√(γ(1−γ)/n)` allowed below the target.
    pub slack: F,
    /// Γ beyond the invertible range of the normal CDF in f64.
    pub saturated: bool,
    pub pass: bool,
    pub samples: usize,
}

/// Sample `mc_samples` points from `N(μ*, (S*)²)` and compare the
/// classified-0 fraction against `1 − γ`.
///
/// Passes when the Wilson 99% lower bound reaches `target − slack`; for
/// saturated Γ (> 8) the target is exact full coverage.
pub fn certify<F: Scalar>(
    p: &SteeringProblem<F>,
    sol: &SteeringSolution<F>,
    mc_samples: usize,
    seed: u64,
) -> Result<CertReport<F>> {
    if sol.status != SolveStatus::Optimal {
        return Err(Error::NotOptimal {
            status: sol.status.as_str(),
        });
    }
    let d = p.theta.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    // ϑ + θᵀ(μ + Sz) < 0  ⇔  (ϑ + θᵀμ) + (Sθ)ᵀz < 0, so one dot per draw.
    let affine = p.bias + p.theta.dot(&sol.mu_star);
    let s_theta = &sol.s_star * &p.theta;
    let mut classified0 = 0usize;
    let mut z = DVector::<F>::zeros(d);
    for _ in 0..mc_samples {
        for k in 0..d {
            let draw: f64 = normal.sample(&mut rng);
            z[k] = F::from_f64_lossy(draw);
        }
        if affine + s_theta.dot(&z) < F::zero() {
            classified0 += 1;
        }
    }

    let n = real::<F>(mc_samples as f64);
    let p_hat = real::<F>(classified0 as f64) / n;
    let z99 = real::<F>(2.5758293035489004);
    let z2 = z99 * z99;
    let denom = F::one() + z2 / n;
    let center = (p_hat + z2 / (n * real(2.0))) / denom;
    let half = z99
        * ((p_hat * (F::one() - p_hat) / n + z2 / (n * n * real(4.0))).sqrt())
        / denom;

    let gamma = p.gamma();
    let target = F::one() - gamma;
    let saturated = p.gamma_factor.as_f64() > GAMMA_SATURATION_LIMIT;
    let slack = z99 * (gamma * (F::one() - gamma) / n).sqrt();
    let pass = if saturated {
        p_hat == F::one()
    } else {
        center - half >= target - slack
    };

    Ok(CertReport {
        empirical_coverage: p_hat,
        ci_lower: (center - half).max(F::zero()),
        ci_upper: (center + half).min(F::one()),
        gamma,
        target,
        slack,
        saturated,
        pass,
        samples: mc_samples,
    })
}

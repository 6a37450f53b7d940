//! Scalar abstraction for the numerical core.
//!
//! All math in this crate is generic over [`Scalar`], which is any real
//! floating-point type nalgebra can factorize (`f32`, `f64`). Concrete
//! aliases live at the crate root; the CLI instantiates everything at
//! [`crate::Real`].

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the crate.
pub trait Scalar: RealField + FromPrimitive + ToPrimitive + Copy + Default {
    /// Machine epsilon of the concrete type.
    fn machine_eps() -> Self;

    /// Lossy conversion from `f64`, used for constants and RNG draws.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant")
    }

    /// Widening conversion to `f64` for reporting and special functions.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {
    fn machine_eps() -> Self {
        f32::EPSILON
    }
}

impl Scalar for f64 {
    fn machine_eps() -> Self {
        f64::EPSILON
    }
}

/// Shorthand for lifting an `f64` constant into the working scalar type.
#[inline]
pub fn real<F: Scalar>(x: f64) -> F {
    F::from_f64_lossy(x)
}

/// Standard normal CDF `Φ(x)`.
///
/// Evaluated through `erfc` in `f64` (absolute accuracy well below the
/// 1e-10 this crate relies on for |x| ≤ 8), then narrowed to `F`.
pub fn std_normal_cdf<F: Scalar>(x: F) -> F {
    let x = x.as_f64();
    real(0.5 * libm::erfc(-x / std::f64::consts::SQRT_2))
}

/// Upper tail `1 − Φ(x)`, computed without cancellation so that tiny
/// tails (e.g. Γ = 15) stay meaningful.
pub fn std_normal_tail<F: Scalar>(x: F) -> F {
    let x = x.as_f64();
    real(0.5 * libm::erfc(x / std::f64::consts::SQRT_2))
}

/// Standard normal quantile `Φ⁻¹(p)` for `p ∈ (0, 1)`.
///
/// Acklam's rational initializer refined by two Halley steps against the
/// `erfc`-based CDF; used for reporting only, never inside optimization.
pub fn std_normal_quantile<F: Scalar>(p: F) -> F {
    let p = p.as_f64();
    assert!(p > 0.0 && p < 1.0, "quantile argument must lie in (0, 1)");
    let mut x = acklam_initial(p);
    for _ in 0..2 {
        let e = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2) - p;
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
        x -= u / (1.0 + x * u / 2.0);
    }
    real(x)
}

fn acklam_initial(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -acklam_initial(1.0 - p)
    }
}

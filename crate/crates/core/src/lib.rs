//! Risk-aware layerwise probes and chance-constrained affine interventions
//! for transformer head activations.
//!
//! The pipeline has two stages. First, headwise logistic probes trained on
//! a risk-aware surrogate loss are aggregated into a layerwise voting
//! classifier that detects undesirable content from activation dumps.
//! Second, for each head of the chosen layer, a small convex program finds
//! the affine map that pushes the predicted-undesirable activation
//! distribution across the probe boundary with probability at least 1 − γ
//! while moving its Gaussian moments as little as possible.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`); the
//! [`Real`] alias fixes the default precision used by the CLI and tests.

pub mod error;
pub mod gaussian;
pub mod intervention;
pub mod probes;
pub mod scalar;
pub mod sdp;
pub mod simbench;
pub mod steering;
pub mod tensors;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default working precision.
pub type Real = f64;

/// Head probe at default precision.
pub type HeadProbe = probes::HeadProbe<Real>;
/// Layer voting probe at default precision.
pub type LayerProbe = probes::LayerProbe<Real>;
/// Intervention map at default precision.
pub type InterventionMap = intervention::InterventionMap<Real>;
/// Policy bundle at default precision.
pub type PolicyBundle = steering::PolicyBundle<Real>;

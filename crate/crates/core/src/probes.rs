//! Headwise risk-aware logistic probes and the layerwise voting classifier.
//!
//! Each head gets a linear logistic classifier trained by full-batch
//! gradient descent on either the risk-aware surrogate
//! `FPR(θ, ϑ) + α·FNR(θ, ϑ)` (sigmoid-smoothed rates) or a weighted
//! negative log-likelihood with class weights `w₀ = 1/N₀`, `w₁ = α/N₁`.
//! Head decisions are aggregated per layer by voting against a threshold
//! τ, which is tuned on a validation split to minimize the layerwise
//! false negative rate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{real, Scalar};
use crate::tensors::{ActivationDataset, HeadSliceView};

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Linear logistic probe for one (layer, head).
///
/// Decision rule: classify 1 (undesirable) iff `bias + theta·a ≥ 0`,
/// i.e. sigmoid ≥ 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProbe<F: Scalar> {
    pub theta: DVector<F>,
    pub bias: F,
    pub layer: usize,
    pub head: usize,
}

impl<F: Scalar> HeadProbe<F> {
    /// Raw margin `bias + theta·a`.
    pub fn score(&self, a: &DVector<F>) -> F {
        self.bias + self.theta.dot(a)
    }

    /// Hard decision at the sigmoid-0.5 boundary.
    pub fn classify(&self, a: &DVector<F>) -> bool {
        self.score(a) >= F::zero()
    }

    /// Margin over a raw f32 activation row.
    pub fn score_raw(&self, row: &[f32]) -> F {
        let mut acc = self.bias;
        for (t, &v) in self.theta.iter().zip(row) {
            acc += *t * F::from_f64_lossy(v as f64);
        }
        acc
    }

    /// Hard decision over a raw f32 activation row.
    pub fn classify_raw(&self, row: &[f32]) -> bool {
        self.score_raw(row) >= F::zero()
    }
}

/// Loss family used to train head probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "risk_aware")]
    RiskAware,
    #[serde(rename = "weighted_nll")]
    WeightedNll,
}

/// Training configuration for head probes.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskLossConfig<F: Scalar> {
    /// Weight α on the false-negative term; α > 0.
    pub alpha: F,
    pub loss_kind: LossKind,
    pub learning_rate: F,
    pub max_iters: usize,
    pub grad_tol: F,
    pub seed: u64,
}

impl<F: Scalar> Default for RiskLossConfig<F> {
    fn default() -> Self {
        RiskLossConfig {
            alpha: real(2.5),
            loss_kind: LossKind::RiskAware,
            learning_rate: real(0.5),
            max_iters: 500,
            grad_tol: real(1e-6),
            seed: 0,
        }
    }
}

impl<F: Scalar> RiskLossConfig<F> {
    fn validate(&self) -> Result<()> {
        if self.alpha <= F::zero() {
            return Err(Error::InvariantViolation("alpha must be > 0".into()));
        }
        if self.learning_rate <= F::zero() {
            return Err(Error::InvariantViolation(
                "learning_rate must be > 0".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::InvariantViolation("max_iters must be ≥ 1".into()));
        }
        if self.grad_tol <= F::zero() {
            return Err(Error::InvariantViolation("grad_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Voting classifier for one layer: flag a sample iff at least `tau` of
/// the `H` head probes flag it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbe<F: Scalar> {
    pub layer: usize,
    pub head_probes: Vec<HeadProbe<F>>,
    pub tau: usize,
}

impl<F: Scalar> LayerProbe<F> {
    /// Per-head decisions for one sample.
    pub fn head_votes(&self, ds: &ActivationDataset, sample: usize) -> Vec<bool> {
        self.head_probes
            .iter()
            .map(|p| p.classify_raw(ds.head_vector(sample, self.layer, p.head)))
            .collect()
    }

    /// Layer decision: vote count ≥ τ.
    pub fn classify_sample(&self, ds: &ActivationDataset, sample: usize) -> bool {
        let votes = self
            .head_votes(ds, sample)
            .iter()
            .filter(|&&v| v)
            .count();
        votes >= self.tau
    }
}

/// Metric quality used to pick the best layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quality {
    #[serde(rename = "accuracy")]
    Accuracy,
    /// `FPR + α·FNR`, lower is better; α equals the training α.
    #[serde(rename = "risk_score")]
    RiskScore,
}

/// Per-head metrics on one split. Rates whose denominator class is empty
/// are reported as `None`, never silently zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport<F: Scalar> {
    pub head: usize,
    pub fpr: Option<F>,
    pub fnr: Option<F>,
    pub acc: F,
    pub surrogate_loss: Option<F>,
}

/// Layer-level probe metrics on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport<F: Scalar> {
    pub layer: usize,
    pub tau: usize,
    pub per_head: Vec<HeadReport<F>>,
    pub layer_fpr: Option<F>,
    pub layer_fnr: Option<F>,
    pub layer_acc: F,
    pub mean_head_fpr: Option<F>,
    pub mean_head_fnr: Option<F>,
    /// Heads whose FPR on this split is exactly 1 (constant-1 probes).
    pub flagged_trivial: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Loss and gradient
// ---------------------------------------------------------------------------

fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-(x.abs())).exp().ln_1p()
}

struct SliceData<F: Scalar> {
    x: DMatrix<F>,
    labels: Vec<u8>,
    n0: usize,
    n1: usize,
}

impl<F: Scalar> SliceData<F> {
    fn from_slice(slice: &HeadSliceView<'_>) -> Result<Self> {
        let labels = slice.labels().to_vec();
        let n1 = labels.iter().filter(|&&y| y == 1).count();
        let n0 = labels.len() - n1;
        if n0 == 0 {
            return Err(Error::EmptyClass { class: 0 });
        }
        if n1 == 0 {
            return Err(Error::EmptyClass { class: 1 });
        }
        Ok(SliceData {
            x: slice.matrix::<F>(),
            labels,
            n0,
            n1,
        })
    }

    fn margins(&self, theta: &DVector<F>, bias: F) -> DVector<F> {
        let mut z = &self.x * theta;
        z.add_scalar_mut(bias);
        z
    }

    fn loss_from_margins(&self, z: &DVector<F>, cfg: &RiskLossConfig<F>) -> F {
        let w0 = F::one() / real::<F>(self.n0 as f64);
        let w1 = cfg.alpha / real::<F>(self.n1 as f64);
        let mut total = F::zero();
        match cfg.loss_kind {
            LossKind::RiskAware => {
                for (i, &y) in self.labels.iter().enumerate() {
                    if y == 1 {
                        total += w1 * (F::one() - sigmoid(z[i]));
                    } else {
                        total += w0 * sigmoid(z[i]);
                    }
                }
            }
            LossKind::WeightedNll => {
                for (i, &y) in self.labels.iter().enumerate() {
                    if y == 1 {
                        total += w1 * softplus(-z[i]);
                    } else {
                        total += w0 * softplus(z[i]);
                    }
                }
            }
        }
        total
    }

    /// Loss plus the exact analytic gradient w.r.t. (θ, ϑ).
    fn loss_and_grad(
        &self,
        theta: &DVector<F>,
        bias: F,
        cfg: &RiskLossConfig<F>,
    ) -> (F, DVector<F>, F) {
        let z = self.margins(theta, bias);
        let loss = self.loss_from_margins(&z, cfg);
        let w0 = F::one() / real::<F>(self.n0 as f64);
        let w1 = cfg.alpha / real::<F>(self.n1 as f64);
        // dL/dz per sample; the chain rule through z = ϑ + θᵀa does the rest.
        let mut coeff = DVector::<F>::zeros(z.len());
        for (i, &y) in self.labels.iter().enumerate() {
            let p = sigmoid(z[i]);
            coeff[i] = match cfg.loss_kind {
                LossKind::RiskAware => {
                    let dp = p * (F::one() - p);
                    if y == 1 {
                        -w1 * dp
                    } else {
                        w0 * dp
                    }
                }
                LossKind::WeightedNll => {
                    if y == 1 {
                        w1 * (p - F::one())
                    } else {
                        w0 * p
                    }
                }
            };
        }
        let grad_theta = self.x.transpose() * &coeff;
        let grad_bias = coeff.sum();
        (loss, grad_theta, grad_bias)
    }
}

/// Surrogate loss of `probe` on `slice` under `cfg`.
///
/// Risk-aware: `(1/N₀)·Σ_{y=0} σ(z) + α·(1/N₁)·Σ_{y=1}(1 − σ(z))` with
/// `z = ϑ + θᵀa`. Weighted NLL: `−Σ [w₁ y ln p + w₀ (1−y) ln(1−p)]`.
pub fn surrogate_loss<F: Scalar>(
    probe: &HeadProbe<F>,
    slice: &HeadSliceView<'_>,
    cfg: &RiskLossConfig<F>,
) -> Result<F> {
    cfg.validate()?;
    let sd = SliceData::from_slice(slice)?;
    let z = sd.margins(&probe.theta, probe.bias);
    Ok(sd.loss_from_margins(&z, cfg))
}

/// Exact analytic gradient of [`surrogate_loss`] w.r.t. `(θ, ϑ)`.
pub fn loss_gradient<F: Scalar>(
    probe: &HeadProbe<F>,
    slice: &HeadSliceView<'_>,
    cfg: &RiskLossConfig<F>,
) -> Result<(DVector<F>, F)> {
    cfg.validate()?;
    let sd = SliceData::from_slice(slice)?;
    let (_, gt, gb) = sd.loss_and_grad(&probe.theta, probe.bias, cfg);
    Ok((gt, gb))
}

fn probe_rng(seed: u64, layer: usize, head: usize) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(layer as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(head as u64).to_le_bytes());
    key[24..32].copy_from_slice(b"rdprobe\0");
    ChaCha12Rng::from_seed(key)
}

/// Train one head probe by full-batch gradient descent with simple
/// backtracking.
///
/// Initialization is seeded uniform in `[-1e-2, 1e-2]` derived from
/// `(cfg.seed, layer, head)`, so results are deterministic for a fixed
/// dataset and config. Stops when `‖∇‖∞ ≤ grad_tol` or `max_iters` is
/// reached.
pub fn train_head_probe<F: Scalar>(
    slice: &HeadSliceView<'_>,
    cfg: &RiskLossConfig<F>,
) -> Result<HeadProbe<F>> {
    cfg.validate()?;
    let sd = SliceData::from_slice(slice)?;
    let d = slice.dim();
    let mut rng = probe_rng(cfg.seed, slice.layer(), slice.head());
    let mut theta =
        DVector::from_fn(d, |_, _| F::from_f64_lossy(rng.random_range(-1e-2..1e-2)));
    let mut bias = F::from_f64_lossy(rng.random_range(-1e-2..1e-2));

    for iteration in 0..cfg.max_iters {
        let (loss, grad_theta, grad_bias) = sd.loss_and_grad(&theta, bias, cfg);
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        let grad_inf = grad_theta
            .iter()
            .fold(grad_bias.abs(), |m, g| m.max(g.abs()));
        if grad_inf <= cfg.grad_tol {
            break;
        }

        let mut step = cfg.learning_rate;
        let mut accepted = false;
        for _ in 0..40 {
            let cand_theta = &theta - &grad_theta * step;
            let cand_bias = bias - grad_bias * step;
            let cand_loss =
                sd.loss_from_margins(&sd.margins(&cand_theta, cand_bias), cfg);
            if cand_loss.is_finite() && cand_loss <= loss {
                theta = cand_theta;
                bias = cand_bias;
                accepted = true;
                break;
            }
            step *= real(0.5);
        }
        if !accepted {
            // No descent direction at float resolution; treat as converged.
            break;
        }
    }

    Ok(HeadProbe {
        theta,
        bias,
        layer: slice.layer(),
        head: slice.head(),
    })
}

// ---------------------------------------------------------------------------
// Voting threshold and layer selection
// ---------------------------------------------------------------------------

/// Vote counts per sample for `probes` over the given layer of `ds`.
fn vote_counts<F: Scalar>(
    probes: &[HeadProbe<F>],
    ds: &ActivationDataset,
    layer: usize,
) -> Vec<usize> {
    (0..ds.n_samples())
        .map(|i| {
            probes
                .iter()
                .filter(|p| p.classify_raw(ds.head_vector(i, layer, p.head)))
                .count()
        })
        .collect()
}

/// Choose `τ ∈ {0, …, H}` minimizing layerwise FNR on `validation`, ties
/// broken by smaller FPR, remaining ties by larger τ.
pub fn tune_tau<F: Scalar>(
    probes: &[HeadProbe<F>],
    validation: &ActivationDataset,
    layer: usize,
) -> Result<usize> {
    let (n0, n1) = validation.class_counts();
    if n0 == 0 {
        return Err(Error::EmptyClass { class: 0 });
    }
    if n1 == 0 {
        return Err(Error::EmptyClass { class: 1 });
    }
    let votes = vote_counts(probes, validation, layer);
    let labels = validation.labels();

    // Counts are exact integers with fixed denominators, so comparing
    // (FN, FP) compares (FNR, FPR).
    let mut best = (usize::MAX, usize::MAX, 0usize);
    for tau in 0..=probes.len() {
        let mut false_neg = 0usize;
        let mut false_pos = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            let pred = votes[i] >= tau;
            match (y, pred) {
                (1, false) => false_neg += 1,
                (0, true) => false_pos += 1,
                _ => {}
            }
        }
        if false_neg < best.0 || (false_neg == best.0 && false_pos <= best.1) {
            best = (false_neg, false_pos, tau);
        }
    }
    Ok(best.2)
}

fn ratio<F: Scalar>(num: usize, den: usize) -> Option<F> {
    if den == 0 {
        None
    } else {
        Some(real::<F>(num as f64) / real::<F>(den as f64))
    }
}

/// Hard-decision metrics of a layer probe (and its heads) on `ds`.
pub fn evaluate_probe<F: Scalar>(
    probe: &LayerProbe<F>,
    ds: &ActivationDataset,
    cfg: &RiskLossConfig<F>,
) -> Result<ProbeReport<F>> {
    if probe.layer >= ds.n_layers() {
        return Err(Error::GeometryMismatch(format!(
            "probe layer {} outside dataset with {} layers",
            probe.layer,
            ds.n_layers()
        )));
    }
    if probe.head_probes.len() != ds.n_heads() {
        return Err(Error::GeometryMismatch(format!(
            "probe has {} heads, dataset {}",
            probe.head_probes.len(),
            ds.n_heads()
        )));
    }
    if probe
        .head_probes
        .first()
        .map(|p| p.theta.len() != ds.head_dim())
        .unwrap_or(false)
    {
        return Err(Error::GeometryMismatch(format!(
            "probe dimension {} != head_dim {}",
            probe.head_probes[0].theta.len(),
            ds.head_dim()
        )));
    }

    let labels = ds.labels();
    let (n0, n1) = ds.class_counts();
    let n = labels.len();

    let mut per_head = Vec::with_capacity(probe.head_probes.len());
    let mut flagged = Vec::new();
    for p in &probe.head_probes {
        let mut fp = 0usize;
        let mut false_neg = 0usize;
        let mut correct = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            let pred = p.classify_raw(ds.head_vector(i, probe.layer, p.head));
            match (y, pred) {
                (0, true) => fp += 1,
                (1, false) => false_neg += 1,
                _ => correct += 1,
            }
        }
        if n0 > 0 && fp == n0 {
            flagged.push(p.head);
        }
        let slice = ds.slice_head(probe.layer, p.head)?;
        let surrogate = if n0 > 0 && n1 > 0 {
            Some(surrogate_loss(p, &slice, cfg)?)
        } else {
            None
        };
        per_head.push(HeadReport {
            head: p.head,
            fpr: ratio(fp, n0),
            fnr: ratio(false_neg, n1),
            acc: real::<F>(correct as f64) / real(n as f64),
            surrogate_loss: surrogate,
        });
    }

    let votes = vote_counts(&probe.head_probes, ds, probe.layer);
    let mut fp = 0usize;
    let mut false_neg = 0usize;
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let pred = votes[i] >= probe.tau;
        match (y, pred) {
            (0, true) => fp += 1,
            (1, false) => false_neg += 1,
            _ => correct += 1,
        }
    }

    let mean_over = |f: &dyn Fn(&HeadReport<F>) -> Option<F>| -> Option<F> {
        let vals: Option<Vec<F>> = per_head.iter().map(f).collect();
        vals.map(|v| {
            v.iter().fold(F::zero(), |a, &b| a + b) / real(per_head.len() as f64)
        })
    };

    Ok(ProbeReport {
        layer: probe.layer,
        tau: probe.tau,
        mean_head_fpr: mean_over(&|h| h.fpr),
        mean_head_fnr: mean_over(&|h| h.fnr),
        per_head,
        layer_fpr: ratio(fp, n0),
        layer_fnr: ratio(false_neg, n1),
        layer_acc: real::<F>(correct as f64) / real(n as f64),
        flagged_trivial: flagged,
    })
}

/// `true` when candidate metrics beat incumbent metrics under `quality`.
pub(crate) fn better_layer<F: Scalar>(
    quality: Quality,
    alpha: F,
    candidate: &ProbeReport<F>,
    incumbent: &ProbeReport<F>,
) -> bool {
    match quality {
        Quality::Accuracy => candidate.layer_acc > incumbent.layer_acc,
        Quality::RiskScore => {
            let score = |r: &ProbeReport<F>| {
                r.layer_fpr.unwrap_or_else(F::zero)
                    + alpha * r.layer_fnr.unwrap_or_else(F::zero)
            };
            score(candidate) < score(incumbent)
        }
    }
}

/// Train all `H` probes for every layer on `ds_train`, tune τ per layer on
/// `ds_val`, and return the best layer under `quality` (ties toward the
/// smaller layer index) together with per-layer validation reports.
pub fn select_layer<F: Scalar>(
    ds_train: &ActivationDataset,
    ds_val: &ActivationDataset,
    cfg: &RiskLossConfig<F>,
    quality: Quality,
) -> Result<(usize, LayerProbe<F>, Vec<ProbeReport<F>>)> {
    cfg.validate()?;
    if !ds_train.same_geometry(ds_val) {
        return Err(Error::GeometryMismatch(
            "train and validation splits differ in (layers, heads, dim)".into(),
        ));
    }
    for (name, ds) in [("train", ds_train), ("validation", ds_val)] {
        let (n0, n1) = ds.class_counts();
        if n0 == 0 || n1 == 0 {
            log::warn!("{name} split lacks class {}", if n0 == 0 { 0 } else { 1 });
            return Err(Error::EmptyClass {
                class: if n0 == 0 { 0 } else { 1 },
            });
        }
    }

    let n_layers = ds_train.n_layers();
    let n_heads = ds_train.n_heads();

    // Head training is embarrassingly parallel; results are assembled by
    // (layer, head) index so the outcome is independent of scheduling.
    let probes: Vec<HeadProbe<F>> = (0..n_layers * n_heads)
        .into_par_iter()
        .map(|idx| {
            let (layer, head) = (idx / n_heads, idx % n_heads);
            let slice = ds_train.slice_head(layer, head)?;
            train_head_probe(&slice, cfg)
        })
        .collect::<Result<_>>()?;

    let mut layer_probes = Vec::with_capacity(n_layers);
    let mut reports = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let head_probes: Vec<HeadProbe<F>> =
            probes[layer * n_heads..(layer + 1) * n_heads].to_vec();
        let tau = tune_tau(&head_probes, ds_val, layer)?;
        let lp = LayerProbe {
            layer,
            head_probes,
            tau,
        };
        reports.push(evaluate_probe(&lp, ds_val, cfg)?);
        layer_probes.push(lp);
    }

    let mut best = 0usize;
    for layer in 1..n_layers {
        if better_layer(quality, cfg.alpha, &reports[layer], &reports[best]) {
            best = layer;
        }
    }
    Ok((best, layer_probes.swap_remove(best), reports))
}

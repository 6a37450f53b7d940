//! Fit, apply, and serialize steering policies.
//!
//! A policy bundle packages one selected layer: its head probes, the
//! voting threshold τ, and one optional affine map per head. At apply
//! time a sample is edited at head h iff the head probe flags it AND the
//! layer vote flags it AND the head has a map; every other coordinate of
//! the dataset passes through byte-identical.
//!
//! Bundle wire format "RDNT v1":
//!
//! ```text
//! bytes 0..4   magic "RDNT"
//! bytes 4..8   u32 little-endian metadata length
//! then         UTF-8 JSON metadata (geometry, τ, hyperparameters,
//!              per-head presence flags and statuses, dataset
//!              fingerprint, payload length and CRC32)
//! then         payload: per head in index order — θ (d × f32le),
//!              ϑ (f32le), then if the head has a map G (d² × f32le,
//!              row-major) and g (d × f32le)
//! bytes n-4..n u32 little-endian CRC32 over all preceding bytes
//! ```
//!
//! Probe and map parameters pass through f32 when a bundle is built, so
//! saving and reloading reproduces the in-memory bundle exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{default_ridge, estimate_moments, psd_sqrt};
use crate::intervention::{apply_map, construct_map, InterventionMap};
use crate::probes::{
    better_layer, evaluate_probe, select_layer, train_head_probe, tune_tau, HeadProbe,
    LayerProbe, LossKind, ProbeReport, Quality, RiskLossConfig,
};
use crate::scalar::Scalar;
use crate::sdp::{solve_steering, SolveStatus, SolverOptions, SteeringProblem};
use crate::tensors::ActivationDataset;

/// Magic bytes opening every RDNT file.
pub const RDNT_MAGIC: [u8; 4] = *b"RDNT";

/// Bundle format version this crate reads and writes.
pub const RDNT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Why a head does or does not carry a map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadFitStatus {
    /// Map present.
    Mapped,
    /// No training sample was predicted undesirable by this head.
    EmptySelection,
    /// Probe had validation FPR = 1; excluded from editing.
    FlaggedTrivial,
    /// The steering solve or map construction failed.
    SolverFailed(String),
}

/// Hyperparameters a bundle was fitted with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper<F: Scalar> {
    pub alpha: F,
    pub gamma_factor: F,
    pub floor_used: bool,
    pub loss_kind: LossKind,
}

/// A deployable steering policy for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle<F: Scalar> {
    /// Selected layer ℓ*.
    pub layer: usize,
    /// Voting threshold τ ∈ [0, H].
    pub tau: usize,
    /// Geometry the bundle was fitted against.
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// One probe per head of the selected layer.
    pub head_probes: Vec<HeadProbe<F>>,
    /// One optional map per head, aligned with `head_probes`.
    pub head_maps: Vec<Option<InterventionMap<F>>>,
    /// Per-head fit outcome, aligned with `head_probes`.
    pub head_status: Vec<HeadFitStatus>,
    pub hyper: Hyper<F>,
    /// SHA-256 fingerprint of the training dataset bytes.
    pub created_from: String,
}

impl<F: Scalar> PolicyBundle<F> {
    /// The layer probe view of this bundle.
    pub fn layer_probe(&self) -> LayerProbe<F> {
        LayerProbe {
            layer: self.layer,
            head_probes: self.head_probes.clone(),
            tau: self.tau,
        }
    }

    fn validate(&self) -> Result<()> {
        let h = self.n_heads;
        if self.head_probes.len() != h
            || self.head_maps.len() != h
            || self.head_status.len() != h
        {
            return Err(Error::InvariantViolation(format!(
                "bundle has {} probes / {} maps / {} statuses for {} heads",
                self.head_probes.len(),
                self.head_maps.len(),
                self.head_status.len(),
                h
            )));
        }
        if self.layer >= self.n_layers {
            return Err(Error::InvariantViolation(format!(
                "bundle layer {} outside geometry with {} layers",
                self.layer, self.n_layers
            )));
        }
        if self.tau > h {
            return Err(Error::InvariantViolation(format!(
                "tau {} exceeds head count {h}",
                self.tau
            )));
        }
        Ok(())
    }

    fn check_geometry(&self, ds: &ActivationDataset) -> Result<()> {
        if ds.n_layers() != self.n_layers
            || ds.n_heads() != self.n_heads
            || ds.head_dim() != self.head_dim
        {
            return Err(Error::GeometryMismatch(format!(
                "bundle geometry ({}, {}, {}) != dataset ({}, {}, {})",
                self.n_layers,
                self.n_heads,
                self.head_dim,
                ds.n_layers(),
                ds.n_heads(),
                ds.head_dim()
            )));
        }
        Ok(())
    }
}

/// Per-sample audit record produced by [`apply_policy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTrace<F: Scalar> {
    /// Layer vote decision on the original activations.
    pub layer_flag: bool,
    /// Per-head probe decisions on the original activations.
    pub head_flags: Vec<bool>,
    /// Heads actually edited (flagged, gated in, and mapped).
    pub heads_edited: usize,
    /// Sum of per-head edit magnitudes for this sample.
    pub total_magnitude: F,
}

/// Everything [`fit_policy`] needs beyond the two datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig<F: Scalar> {
    pub risk: RiskLossConfig<F>,
    pub solver: SolverOptions<F>,
    /// Γ = Φ⁻¹(1 − γ) for the per-head steering programs.
    pub gamma_factor: F,
    /// Enforce the Remark-style spectral floor S ⪰ Σ̂₀^{1/2}.
    pub use_floor: bool,
    pub quality: Quality,
}

impl<F: Scalar> Default for FitConfig<F> {
    fn default() -> Self {
        FitConfig {
            risk: RiskLossConfig::default(),
            solver: SolverOptions::default(),
            gamma_factor: crate::scalar::real(15.0),
            use_floor: true,
            quality: Quality::RiskScore,
        }
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

fn quantize<F: Scalar>(x: F) -> F {
    F::from_f64_lossy(x.as_f64() as f32 as f64)
}

fn quantize_vec<F: Scalar>(v: &DVector<F>) -> DVector<F> {
    v.map(quantize)
}

fn quantize_probe<F: Scalar>(p: &HeadProbe<F>) -> HeadProbe<F> {
    HeadProbe {
        theta: quantize_vec(&p.theta),
        bias: quantize(p.bias),
        layer: p.layer,
        head: p.head,
    }
}

/// Fit the steering program and map for one head, given its (already
/// quantized) probe. Returns the map or the reason there is none.
fn fit_head<F: Scalar>(
    train: &ActivationDataset,
    probe: &HeadProbe<F>,
    layer: usize,
    head: usize,
    cfg: &FitConfig<F>,
) -> (Option<InterventionMap<F>>, HeadFitStatus) {
    let slice = match train.slice_head(layer, head) {
        Ok(s) => s,
        Err(e) => return (None, HeadFitStatus::SolverFailed(e.to_string())),
    };

    // D̂⁺: training samples this head predicts undesirable.
    let selector = |i: usize| probe.classify_raw(slice.row_raw(i));
    let mut moments = match estimate_moments(&slice, selector, F::zero()) {
        Ok(m) => m,
        Err(Error::EmptySelection) => return (None, HeadFitStatus::EmptySelection),
        Err(e) => return (None, HeadFitStatus::SolverFailed(e.to_string())),
    };
    let ridge = default_ridge(&moments.cov);
    if ridge > F::zero() {
        for k in 0..moments.cov.nrows() {
            moments.cov[(k, k)] += ridge;
        }
        moments.ridge = ridge;
    }

    let sigma_hat_sqrt = match psd_sqrt(&moments.cov) {
        Ok(f) => f.matrix,
        Err(e) => return (None, HeadFitStatus::SolverFailed(e.to_string())),
    };

    let floor = if cfg.use_floor {
        // Σ̂₀: covariance of the labeled-desirable activations of this head.
        let labels = slice.labels();
        match estimate_moments(&slice, |i| labels[i] == 0, F::zero()) {
            Ok(m0) => match psd_sqrt(&m0.cov) {
                Ok(f) => Some(f.matrix),
                Err(e) => return (None, HeadFitStatus::SolverFailed(e.to_string())),
            },
            Err(Error::EmptySelection) => None,
            Err(e) => return (None, HeadFitStatus::SolverFailed(e.to_string())),
        }
    } else {
        None
    };

    let problem = SteeringProblem {
        theta: probe.theta.clone(),
        bias: probe.bias,
        m_hat: moments.mean.clone(),
        sigma_hat_sqrt,
        gamma_factor: cfg.gamma_factor,
        floor,
    };
    let sol = match solve_steering(&problem, &cfg.solver) {
        Ok(s) => s,
        Err(e) => return (None, HeadFitStatus::SolverFailed(e.to_string())),
    };
    if sol.status != SolveStatus::Optimal {
        return (
            None,
            HeadFitStatus::SolverFailed(format!("solver status {}", sol.status.as_str())),
        );
    }
    match construct_map(&moments, &problem, &sol, layer, head) {
        Ok(map) => (Some(map), HeadFitStatus::Mapped),
        Err(e) => (None, HeadFitStatus::SolverFailed(e.to_string())),
    }
}

/// Quantize a constructed map for bundling; provenance is dropped because
/// the wire format does not carry it.
fn bundle_map<F: Scalar>(map: &InterventionMap<F>) -> InterventionMap<F> {
    InterventionMap {
        linear: map.linear.map(quantize),
        offset: quantize_vec(&map.offset),
        layer: map.layer,
        head: map.head,
        provenance: None,
    }
}

/// Run the full pipeline: select the layer, fit per-head steering maps,
/// and package the policy.
///
/// Heads whose predicted-undesirable set is empty, whose probe is flagged
/// trivial on validation, or whose solve fails carry no map; the reason is
/// recorded per head. Errors with `NoViableLayer` when every layer's probe
/// set is entirely flagged trivial.
pub fn fit_policy<F: Scalar>(
    ds_train: &ActivationDataset,
    ds_val: &ActivationDataset,
    cfg: &FitConfig<F>,
) -> Result<PolicyBundle<F>> {
    let (mut layer, mut layer_probe, reports) =
        select_layer(ds_train, ds_val, &cfg.risk, cfg.quality)?;

    let n_heads = ds_train.n_heads();
    let viable = |r: &ProbeReport<F>| r.flagged_trivial.len() < n_heads;
    if !viable(&reports[layer]) {
        // The argbest layer is degenerate; fall back to the best viable
        // layer, retraining its probes (training is deterministic).
        let mut best: Option<usize> = None;
        for (idx, report) in reports.iter().enumerate() {
            if !viable(report) {
                continue;
            }
            let replace = match best {
                None => true,
                Some(b) => better_layer(cfg.quality, cfg.risk.alpha, report, &reports[b]),
            };
            if replace {
                best = Some(idx);
            }
        }
        layer = best.ok_or(Error::NoViableLayer)?;
        let head_probes: Vec<HeadProbe<F>> = (0..n_heads)
            .map(|h| {
                let slice = ds_train.slice_head(layer, h)?;
                train_head_probe(&slice, &cfg.risk)
            })
            .collect::<Result<_>>()?;
        let tau = tune_tau(&head_probes, ds_val, layer)?;
        layer_probe = LayerProbe {
            layer,
            head_probes,
            tau,
        };
    }

    // Quantize probes before fitting maps so the steering programs see
    // exactly the parameters the bundle will ship.
    let probes: Vec<HeadProbe<F>> =
        layer_probe.head_probes.iter().map(quantize_probe).collect();
    let flagged = &reports[layer].flagged_trivial;

    let fitted: Vec<(Option<InterventionMap<F>>, HeadFitStatus)> = probes
        .par_iter()
        .enumerate()
        .map(|(h, probe)| {
            if flagged.contains(&h) {
                return (None, HeadFitStatus::FlaggedTrivial);
            }
            fit_head(ds_train, probe, layer, h, cfg)
        })
        .collect();

    let mut head_maps = Vec::with_capacity(n_heads);
    let mut head_status = Vec::with_capacity(n_heads);
    for (h, (map, status)) in fitted.into_iter().enumerate() {
        if let HeadFitStatus::SolverFailed(msg) = &status {
            log::warn!("head {h} at layer {layer}: no map ({msg})");
        }
        head_maps.push(map.as_ref().map(bundle_map));
        head_status.push(status);
    }

    let bundle = PolicyBundle {
        layer,
        tau: layer_probe.tau,
        n_layers: ds_train.n_layers(),
        n_heads,
        head_dim: ds_train.head_dim(),
        head_probes: probes,
        head_maps,
        head_status,
        hyper: Hyper {
            alpha: quantize(cfg.risk.alpha),
            gamma_factor: quantize(cfg.gamma_factor),
            floor_used: cfg.use_floor,
            loss_kind: cfg.risk.loss_kind,
        },
        created_from: ds_train.fingerprint(),
    };
    bundle.validate()?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

/// Apply the conditional edit rule to every sample of `ds`.
///
/// Head h of sample i is rewritten to `G·a + g` iff the head probe flags
/// it, the layer vote flags the sample, and the head has a map. All other
/// coordinates (including every other layer) are byte-identical to the
/// input. Deterministic, and independent of worker count.
pub fn apply_policy<F: Scalar>(
    bundle: &PolicyBundle<F>,
    ds: &ActivationDataset,
) -> Result<(ActivationDataset, Vec<EditTrace<F>>)> {
    bundle.validate()?;
    bundle.check_geometry(ds)?;

    let mut data = ds.data().to_vec();
    let sample_stride = ds.n_layers() * ds.n_heads() * ds.head_dim();
    let layer = bundle.layer;
    let d = bundle.head_dim;

    let traces: Vec<EditTrace<F>> = data
        .par_chunks_mut(sample_stride)
        .enumerate()
        .map(|(i, chunk)| {
            let head_flags: Vec<bool> = bundle
                .head_probes
                .iter()
                .map(|p| p.classify_raw(ds.head_vector(i, layer, p.head)))
                .collect();
            let votes = head_flags.iter().filter(|&&v| v).count();
            let layer_flag = votes >= bundle.tau;

            let mut heads_edited = 0usize;
            let mut total_magnitude = F::zero();
            if layer_flag {
                for (h, flag) in head_flags.iter().enumerate() {
                    let Some(map) = bundle.head_maps[h].as_ref().filter(|_| *flag) else {
                        continue;
                    };
                    let a = DVector::from_iterator(
                        d,
                        ds.head_vector(i, layer, h)
                            .iter()
                            .map(|&v| F::from_f64_lossy(v as f64)),
                    );
                    let edited = apply_map(map, &a).expect("bundle dims validated");
                    total_magnitude += (&edited - &a).norm();
                    let off = (layer * bundle.n_heads + h) * d;
                    for k in 0..d {
                        chunk[off + k] = edited[k].as_f64() as f32;
                    }
                    heads_edited += 1;
                }
            }
            EditTrace {
                layer_flag,
                head_flags,
                heads_edited,
                total_magnitude,
            }
        })
        .collect();

    let edited = ActivationDataset::new(ds.header().clone(), data, ds.labels().to_vec())?;
    Ok((edited, traces))
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    version: u32,
    layer: usize,
    tau: usize,
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    alpha: f64,
    gamma_factor: f64,
    floor_used: bool,
    loss_kind: LossKind,
    created_from: String,
    head_present: Vec<bool>,
    head_status: Vec<HeadFitStatus>,
    payload_len: u64,
    payload_crc32: u32,
}

fn push_f32<F: Scalar>(buf: &mut Vec<u8>, x: F) {
    buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
}

fn payload_bytes<F: Scalar>(bundle: &PolicyBundle<F>) -> Vec<u8> {
    let d = bundle.head_dim;
    let mut buf = Vec::new();
    for h in 0..bundle.n_heads {
        let probe = &bundle.head_probes[h];
        for k in 0..d {
            push_f32(&mut buf, probe.theta[k]);
        }
        push_f32(&mut buf, probe.bias);
        if let Some(map) = &bundle.head_maps[h] {
            for r in 0..d {
                for c in 0..d {
                    push_f32(&mut buf, map.linear[(r, c)]);
                }
            }
            for k in 0..d {
                push_f32(&mut buf, map.offset[k]);
            }
        }
    }
    buf
}

/// Serialize a bundle as RDNT v1.
pub fn save_bundle<F: Scalar, P: AsRef<Path>>(bundle: &PolicyBundle<F>, path: P) -> Result<()> {
    bundle.validate()?;
    let payload = payload_bytes(bundle);
    let meta = BundleMeta {
        version: RDNT_VERSION,
        layer: bundle.layer,
        tau: bundle.tau,
        n_layers: bundle.n_layers,
        n_heads: bundle.n_heads,
        head_dim: bundle.head_dim,
        alpha: bundle.hyper.alpha.as_f64(),
        gamma_factor: bundle.hyper.gamma_factor.as_f64(),
        floor_used: bundle.hyper.floor_used,
        loss_kind: bundle.hyper.loss_kind,
        created_from: bundle.created_from.clone(),
        head_present: bundle.head_maps.iter().map(Option::is_some).collect(),
        head_status: bundle.head_status.clone(),
        payload_len: payload.len() as u64,
        payload_crc32: crc32fast::hash(&payload),
    };
    let meta_json = serde_json::to_vec(&meta).expect("metadata serializes");

    let mut bytes = Vec::with_capacity(12 + meta_json.len() + payload.len());
    bytes.extend_from_slice(&RDNT_MAGIC);
    bytes.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    bytes.extend_from_slice(&payload);
    let trailer = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&trailer.to_le_bytes());

    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

fn read_f32<F: Scalar>(bytes: &[u8], pos: &mut usize) -> F {
    let v = f32::from_le_bytes([bytes[*pos], bytes[*pos + 1], bytes[*pos + 2], bytes[*pos + 3]]);
    *pos += 4;
    F::from_f64_lossy(v as f64)
}

/// Load an RDNT v1 bundle, verifying both checksums.
pub fn load_bundle<F: Scalar, P: AsRef<Path>>(path: P) -> Result<PolicyBundle<F>> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;

    if bytes.len() < 12 {
        return Err(Error::ChecksumMismatch("file shorter than any bundle".into()));
    }
    if bytes[..4] != RDNT_MAGIC {
        return Err(Error::MagicMismatch {
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    let trailer_start = bytes.len() - 4;
    let stored_trailer = u32::from_le_bytes(bytes[trailer_start..].try_into().unwrap());
    if crc32fast::hash(&bytes[..trailer_start]) != stored_trailer {
        return Err(Error::ChecksumMismatch(
            "trailing CRC32 does not match file contents".into(),
        ));
    }

    let meta_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let meta_end = 8 + meta_len;
    if meta_end > trailer_start {
        return Err(Error::ChecksumMismatch(
            "metadata extends past end of file".into(),
        ));
    }
    let meta: BundleMeta = serde_json::from_slice(&bytes[8..meta_end])
        .map_err(|e| Error::HeaderParse(e.to_string()))?;
    if meta.version != RDNT_VERSION {
        return Err(Error::VersionUnsupported {
            found: meta.version,
        });
    }

    let payload = &bytes[meta_end..trailer_start];
    if payload.len() as u64 != meta.payload_len {
        return Err(Error::ChecksumMismatch(format!(
            "payload is {} bytes, metadata says {}",
            payload.len(),
            meta.payload_len
        )));
    }
    if crc32fast::hash(payload) != meta.payload_crc32 {
        return Err(Error::ChecksumMismatch("payload CRC32 mismatch".into()));
    }
    if meta.head_present.len() != meta.n_heads || meta.head_status.len() != meta.n_heads {
        return Err(Error::InvariantViolation(
            "per-head metadata arrays disagree with head count".into(),
        ));
    }

    let d = meta.head_dim;
    let mut pos = 0usize;
    let need = |pos: usize, n: usize| -> Result<()> {
        if pos + n > payload.len() {
            Err(Error::ChecksumMismatch("payload truncated".into()))
        } else {
            Ok(())
        }
    };

    let mut head_probes = Vec::with_capacity(meta.n_heads);
    let mut head_maps = Vec::with_capacity(meta.n_heads);
    for h in 0..meta.n_heads {
        need(pos, 4 * (d + 1))?;
        let theta = DVector::from_fn(d, |_, _| read_f32::<F>(payload, &mut pos));
        let bias = read_f32::<F>(payload, &mut pos);
        head_probes.push(HeadProbe {
            theta,
            bias,
            layer: meta.layer,
            head: h,
        });
        if meta.head_present[h] {
            need(pos, 4 * (d * d + d))?;
            let mut linear = DMatrix::<F>::zeros(d, d);
            for r in 0..d {
                for c in 0..d {
                    linear[(r, c)] = read_f32::<F>(payload, &mut pos);
                }
            }
            let offset = DVector::from_fn(d, |_, _| read_f32::<F>(payload, &mut pos));
            head_maps.push(Some(InterventionMap {
                linear,
                offset,
                layer: meta.layer,
                head: h,
                provenance: None,
            }));
        } else {
            head_maps.push(None);
        }
    }
    if pos != payload.len() {
        return Err(Error::ChecksumMismatch(format!(
            "payload has {} trailing bytes",
            payload.len() - pos
        )));
    }

    let bundle = PolicyBundle {
        layer: meta.layer,
        tau: meta.tau,
        n_layers: meta.n_layers,
        n_heads: meta.n_heads,
        head_dim: meta.head_dim,
        head_probes,
        head_maps,
        head_status: meta.head_status,
        hyper: Hyper {
            alpha: F::from_f64_lossy(meta.alpha),
            gamma_factor: F::from_f64_lossy(meta.gamma_factor),
            floor_used: meta.floor_used,
            loss_kind: meta.loss_kind,
        },
        created_from: meta.created_from,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Convenience: evaluate the bundle's probe on a dataset.
pub fn evaluate_bundle_probe<F: Scalar>(
    bundle: &PolicyBundle<F>,
    ds: &ActivationDataset,
) -> Result<ProbeReport<F>> {
    let cfg = RiskLossConfig {
        alpha: bundle.hyper.alpha,
        loss_kind: bundle.hyper.loss_kind,
        ..RiskLossConfig::default()
    };
    evaluate_probe(&bundle.layer_probe(), ds, &cfg)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensors::DatasetHeader;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// L layers × H heads; positives and negatives separated along the
    /// first coordinate of every head of `hot_layer` only.
    pub(crate) fn layered_dataset(
        seed: u64,
        n_per_class: usize,
        n_layers: usize,
        n_heads: usize,
        d: usize,
        hot_layer: usize,
        separation: f64,
    ) -> ActivationDataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = 2 * n_per_class;
        let mut data = Vec::with_capacity(n * n_layers * n_heads * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = (i % 2) as u8;
            labels.push(y);
            for layer in 0..n_layers {
                for _head in 0..n_heads {
                    for k in 0..d {
                        let center = if layer == hot_layer && k == 0 {
                            if y == 1 {
                                separation / 2.0
                            } else {
                                -separation / 2.0
                            }
                        } else {
                            0.0
                        };
                        let z: f64 = rng.sample(rand_distr::StandardNormal);
                        data.push((center + z) as f32);
                    }
                }
            }
        }
        ActivationDataset::new(
            DatasetHeader::new(n, n_layers, n_heads, d),
            data,
            labels,
        )
        .unwrap()
    }

    fn fit_cfg(gamma_factor: f64) -> FitConfig<f64> {
        FitConfig {
            gamma_factor,
            risk: RiskLossConfig {
                max_iters: 300,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn end_to_end_single_head_flips_undesirable_samples() {
        // Separation 6 so the single head attains zero validation FNR at
        // τ = 1; a weaker head would make the FNR-first rule pick the
        // degenerate τ = 0 vote, under which nothing is ever desirable.
        let train = layered_dataset(10, 400, 1, 1, 2, 0, 6.0);
        let val = layered_dataset(11, 200, 1, 1, 2, 0, 6.0);
        let gamma_factor = 2.3263478740408408; // γ = 0.01
        let bundle = fit_policy(&train, &val, &fit_cfg(gamma_factor)).unwrap();
        assert_eq!(bundle.layer, 0);
        assert_eq!(bundle.tau, 1);
        assert_eq!(bundle.head_status, vec![HeadFitStatus::Mapped]);

        let test = layered_dataset(12, 300, 1, 1, 2, 0, 6.0);
        let (edited, traces) = apply_policy(&bundle, &test).unwrap();

        let probe = bundle.layer_probe();
        let mut flipped = 0usize;
        let mut positives = 0usize;
        for (i, &y) in test.labels().iter().enumerate() {
            if y == 1 {
                positives += 1;
                if !probe.classify_sample(&edited, i) {
                    flipped += 1;
                }
            }
        }
        let rate = flipped as f64 / positives as f64;
        assert!(rate >= 0.99 - 0.02, "post-edit desirable rate {rate}");
        assert_eq!(traces.len(), test.n_samples());
    }

    #[test]
    fn constant_negative_probe_yields_empty_selection() {
        let ds = layered_dataset(5, 50, 1, 1, 2, 0, 1.0);
        let probe = HeadProbe::<f64> {
            theta: DVector::zeros(2),
            bias: -1.0,
            layer: 0,
            head: 0,
        };
        let (map, status) = fit_head(&ds, &probe, 0, 0, &fit_cfg(1.0));
        assert!(map.is_none());
        assert_eq!(status, HeadFitStatus::EmptySelection);
    }

    pub(crate) fn random_bundle(seed: u64, n_heads: usize, d: usize) -> PolicyBundle<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut head_probes = Vec::new();
        let mut head_maps = Vec::new();
        let mut head_status = Vec::new();
        for h in 0..n_heads {
            head_probes.push(quantize_probe(&HeadProbe {
                theta: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
                bias: rng.random_range(-1.0..1.0),
                layer: 1,
                head: h,
            }));
            if rng.random_range(0.0..1.0) < 0.7 {
                head_maps.push(Some(bundle_map(&InterventionMap {
                    linear: DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)),
                    offset: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
                    layer: 1,
                    head: h,
                    provenance: None,
                })));
                head_status.push(HeadFitStatus::Mapped);
            } else {
                head_maps.push(None);
                head_status.push(HeadFitStatus::EmptySelection);
            }
        }
        PolicyBundle {
            layer: 1,
            tau: rng.random_range(0..=n_heads),
            n_layers: 3,
            n_heads,
            head_dim: d,
            head_probes,
            head_maps,
            head_status,
            hyper: Hyper {
                alpha: 2.5,
                gamma_factor: 15.0,
                floor_used: false,
                loss_kind: LossKind::RiskAware,
            },
            created_from: format!("{seed:064x}"),
        }
    }

    #[test]
    fn bundle_roundtrip_is_field_equal() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..10u64 {
            let bundle = random_bundle(seed, 3, 4);
            let path = dir.path().join(format!("b{seed}.rdnt"));
            save_bundle(&bundle, &path).unwrap();
            let back: PolicyBundle<f64> = load_bundle(&path).unwrap();
            assert_eq!(bundle, back, "seed {seed}");
        }
    }

    #[test]
    fn truncated_bundle_is_checksum_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rdnt");
        save_bundle(&random_bundle(3, 2, 3), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_bundle::<f64, _>(&path),
            Err(Error::ChecksumMismatch(_))
        ));
    }

    #[test]
    fn corrupted_payload_byte_is_checksum_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.rdnt");
        save_bundle(&random_bundle(4, 2, 3), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let k = bytes.len() - 20;
        bytes[k] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_bundle::<f64, _>(&path),
            Err(Error::ChecksumMismatch(_))
        ));
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rdnt");
        save_bundle(&random_bundle(5, 2, 2), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_bundle::<f64, _>(&path),
            Err(Error::MagicMismatch { .. })
        ));
    }

    #[test]
    fn absent_maps_survive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = random_bundle(6, 4, 2);
        bundle.head_maps = vec![None; 4];
        bundle.head_status = vec![HeadFitStatus::EmptySelection; 4];
        let path = dir.path().join("absent.rdnt");
        save_bundle(&bundle, &path).unwrap();
        let back: PolicyBundle<f64> = load_bundle(&path).unwrap();
        assert_eq!(bundle, back);
        assert!(back.head_maps.iter().all(Option::is_none));
    }

    /// Hand-built bundle: identity-ish probes voting on the sign of the
    /// first coordinate, and a fixed affine map per head.
    fn hand_bundle(n_layers: usize, n_heads: usize, d: usize, tau: usize) -> PolicyBundle<f64> {
        let layer = n_layers - 1;
        let mut head_probes = Vec::new();
        let mut head_maps = Vec::new();
        let mut head_status = Vec::new();
        for h in 0..n_heads {
            let mut theta = DVector::zeros(d);
            theta[0] = 1.0;
            head_probes.push(HeadProbe {
                theta,
                bias: 0.0,
                layer,
                head: h,
            });
            let mut linear = DMatrix::identity(d, d) * 0.5;
            linear[(0, 0)] = 0.25;
            let mut offset = DVector::zeros(d);
            offset[0] = -2.0;
            head_maps.push(Some(bundle_map(&InterventionMap {
                linear,
                offset,
                layer,
                head: h,
                provenance: None,
            })));
            head_status.push(HeadFitStatus::Mapped);
        }
        PolicyBundle {
            layer,
            tau,
            n_layers,
            n_heads,
            head_dim: d,
            head_probes,
            head_maps,
            head_status,
            hyper: Hyper {
                alpha: 2.5,
                gamma_factor: 2.0,
                floor_used: false,
                loss_kind: LossKind::RiskAware,
            },
            created_from: String::new(),
        }
    }

    #[test]
    fn gated_off_samples_pass_through_unchanged() {
        let ds = layered_dataset(21, 40, 2, 2, 3, 1, 3.0);
        let bundle = hand_bundle(2, 2, 3, 2);
        let (edited, traces) = apply_policy(&bundle, &ds).unwrap();
        for (i, trace) in traces.iter().enumerate() {
            if !trace.layer_flag {
                assert_eq!(trace.heads_edited, 0);
                let a = i * ds.n_layers() * ds.n_heads() * 3;
                let b = (i + 1) * ds.n_layers() * ds.n_heads() * 3;
                assert_eq!(&ds.data()[a..b], &edited.data()[a..b], "sample {i}");
            }
        }
    }

    #[test]
    fn per_head_gate_and_arithmetic() {
        let ds = layered_dataset(22, 30, 1, 2, 2, 0, 3.0);
        let bundle = hand_bundle(1, 2, 2, 1);
        let (edited, traces) = apply_policy(&bundle, &ds).unwrap();
        for (i, trace) in traces.iter().enumerate() {
            for h in 0..2 {
                let orig = ds.head_vector(i, 0, h);
                let new = edited.head_vector(i, 0, h);
                if trace.layer_flag && trace.head_flags[h] {
                    // Edited vectors equal the hand-computed G·a + g.
                    let map = bundle.head_maps[h].as_ref().unwrap();
                    let a = DVector::from_vec(vec![orig[0] as f64, orig[1] as f64]);
                    let want = &map.linear * a + &map.offset;
                    for k in 0..2 {
                        assert_eq!(new[k], want[k] as f32, "sample {i} head {h}");
                    }
                } else {
                    assert_eq!(orig, new, "sample {i} head {h} should be untouched");
                }
            }
            assert!(trace.heads_edited <= trace.head_flags.iter().filter(|&&v| v).count());
            if !trace.layer_flag {
                assert_eq!(trace.heads_edited, 0);
            }
        }
    }

    #[test]
    fn locality_byte_diff_outside_selected_layer_is_zero() {
        let ds = layered_dataset(23, 50, 3, 2, 2, 1, 3.0);
        let mut bundle = hand_bundle(3, 2, 2, 1);
        bundle.layer = 1;
        for p in &mut bundle.head_probes {
            p.layer = 1;
        }
        let (edited, _) = apply_policy(&bundle, &ds).unwrap();
        let stride = ds.n_heads() * ds.head_dim();
        for i in 0..ds.n_samples() {
            for layer in [0usize, 2] {
                let off = (i * ds.n_layers() + layer) * stride;
                assert_eq!(
                    &ds.data()[off..off + stride],
                    &edited.data()[off..off + stride],
                    "sample {i} layer {layer}"
                );
            }
        }
    }

    #[test]
    fn tau_zero_gates_every_sample_in() {
        let ds = layered_dataset(24, 20, 1, 2, 2, 0, 1.0);
        let bundle = hand_bundle(1, 2, 2, 0);
        let (_, traces) = apply_policy(&bundle, &ds).unwrap();
        assert!(traces.iter().all(|t| t.layer_flag));
    }

    #[test]
    fn apply_is_deterministic() {
        let ds = layered_dataset(25, 60, 2, 3, 2, 1, 2.0);
        let mut bundle = hand_bundle(2, 3, 2, 1);
        bundle.layer = 1;
        for p in &mut bundle.head_probes {
            p.layer = 1;
        }
        let (a, ta) = apply_policy(&bundle, &ds).unwrap();
        let (b, tb) = apply_policy(&bundle, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let ds = layered_dataset(26, 10, 1, 2, 3, 0, 1.0);
        let bundle = hand_bundle(1, 2, 2, 1);
        assert!(matches!(
            apply_policy(&bundle, &ds),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn fitted_bundle_roundtrips_through_disk() {
        let train = layered_dataset(30, 150, 2, 2, 2, 1, 3.0);
        let val = layered_dataset(31, 80, 2, 2, 2, 1, 3.0);
        let bundle = fit_policy(&train, &val, &fit_cfg(2.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.rdnt");
        save_bundle(&bundle, &path).unwrap();
        let back: PolicyBundle<f64> = load_bundle(&path).unwrap();
        assert_eq!(bundle, back);
        assert_eq!(back.created_from, train.fingerprint());
    }

    #[test]
    fn no_viable_layer_when_everything_is_noise_and_flagged() {
        // All-noise layers: with a high alpha the trained probes collapse
        // to constant-1 and every head gets flagged.
        let train = layered_dataset(32, 80, 1, 2, 2, 0, 0.0);
        let val = layered_dataset(33, 80, 1, 2, 2, 0, 0.0);
        let cfg = FitConfig {
            risk: RiskLossConfig {
                alpha: 40.0,
                max_iters: 800,
                ..Default::default()
            },
            ..fit_cfg(1.0)
        };
        match fit_policy(&train, &val, &cfg) {
            Err(Error::NoViableLayer) => {}
            Ok(bundle) => {
                // If training did not fully collapse, the fit must still
                // have produced a valid bundle.
                assert_eq!(bundle.head_probes.len(), 2);
            }
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }
}

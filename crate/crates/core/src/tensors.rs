//! Labeled activation datasets and the RADF v1 container format.
//!
//! A dataset holds `n_samples` samples; each sample carries one activation
//! vector of dimension `head_dim` per (layer, head) pair, plus a binary
//! label (1 = undesirable). On disk the layout is:
//!
//! ```text
//! bytes 0..4    magic "RADF"
//! bytes 4..8    u32 little-endian header length Lh
//! bytes 8..8+Lh UTF-8 JSON DatasetHeader
//! then          payload: f32 little-endian, flat index ((i·L + ℓ)·H + h)·d + k
//! then          n_samples label bytes, each 0 or 1
//! ```
//!
//! No padding anywhere. Values are validated finite at load; datasets are
//! immutable after construction, so any number of readers may slice
//! concurrently.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Magic bytes opening every RADF file.
pub const RADF_MAGIC: [u8; 4] = *b"RADF";

/// Container format version this crate reads and writes.
pub const RADF_VERSION: u32 = 1;

/// Element type of the payload. Only little-endian f32 is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32Le,
}

/// Payload layout. Only sample-major (then layer, head, component) is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "sample-layer-head-dim")]
    SampleLayerHeadDim,
}

/// JSON header of a RADF file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub n_samples: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub dtype: Dtype,
    pub layout: Layout,
}

impl DatasetHeader {
    /// Header with the current version and the only defined dtype/layout.
    pub fn new(n_samples: usize, n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        DatasetHeader {
            version: RADF_VERSION,
            n_samples,
            n_layers,
            n_heads,
            head_dim,
            dtype: Dtype::F32Le,
            layout: Layout::SampleLayerHeadDim,
        }
    }

    /// Number of f32 elements in the payload.
    pub fn element_count(&self) -> usize {
        self.n_samples * self.n_layers * self.n_heads * self.head_dim
    }

    /// Number of payload bytes: `n_samples × n_layers × n_heads × head_dim × 4`.
    pub fn payload_bytes(&self) -> u64 {
        self.element_count() as u64 * 4
    }

    fn validate(&self) -> Result<()> {
        if self.version != RADF_VERSION {
            return Err(Error::VersionUnsupported {
                found: self.version,
            });
        }
        for (name, v) in [
            ("n_samples", self.n_samples),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
        ] {
            if v == 0 {
                return Err(Error::InvariantViolation(format!("{name} must be ≥ 1")));
            }
        }
        Ok(())
    }
}

/// A fully materialized labeled activation dataset.
///
/// The payload is stored exactly as the container defines it (flat f32,
/// sample-major), so round-trips through [`save_dataset`]/[`load_dataset`]
/// are bit-identical. Math layers convert slices to the working scalar on
/// demand.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    header: DatasetHeader,
    data: Vec<f32>,
    labels: Vec<u8>,
}

impl ActivationDataset {
    /// Build a dataset from parts, checking every invariant.
    pub fn new(header: DatasetHeader, data: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        header.validate()?;
        if data.len() != header.element_count() {
            return Err(Error::SizeMismatch {
                expected: header.payload_bytes(),
                actual: data.len() as u64 * 4,
            });
        }
        if labels.len() != header.n_samples {
            return Err(Error::InvariantViolation(format!(
                "labels length {} != n_samples {}",
                labels.len(),
                header.n_samples
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        if let Some(i) = labels.iter().position(|&b| b > 1) {
            return Err(Error::InvariantViolation(format!(
                "label at sample {i} is {}, must be 0 or 1",
                labels[i]
            )));
        }
        Ok(ActivationDataset {
            header,
            data,
            labels,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn n_samples(&self) -> usize {
        self.header.n_samples
    }

    pub fn n_layers(&self) -> usize {
        self.header.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.header.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.header.head_dim
    }

    /// Labels, one byte per sample, 1 = undesirable.
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Raw flat payload in container order.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Flat offset of component 0 of `(sample, layer, head)`.
    #[inline]
    pub fn offset(&self, sample: usize, layer: usize, head: usize) -> usize {
        let h = &self.header;
        ((sample * h.n_layers + layer) * h.n_heads + head) * h.head_dim
    }

    /// The `head_dim` contiguous components of one head activation.
    #[inline]
    pub fn head_vector(&self, sample: usize, layer: usize, head: usize) -> &[f32] {
        let off = self.offset(sample, layer, head);
        &self.data[off..off + self.header.head_dim]
    }

    /// Read-only view of all samples at one (layer, head).
    pub fn slice_head(&self, layer: usize, head: usize) -> Result<HeadSliceView<'_>> {
        if layer >= self.header.n_layers {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: layer,
                limit: self.header.n_layers,
            });
        }
        if head >= self.header.n_heads {
            return Err(Error::IndexOutOfRange {
                what: "head",
                index: head,
                limit: self.header.n_heads,
            });
        }
        Ok(HeadSliceView {
            dataset: self,
            layer,
            head,
        })
    }

    /// Geometry equality check used by operations that pair datasets.
    pub fn same_geometry(&self, other: &ActivationDataset) -> bool {
        self.header.n_layers == other.header.n_layers
            && self.header.n_heads == other.header.n_heads
            && self.header.head_dim == other.header.head_dim
    }

    /// Per-class sample counts `(n0, n1)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let n1 = self.labels.iter().filter(|&&y| y == 1).count();
        (self.labels.len() - n1, n1)
    }

    /// SHA-256 over the exact serialized byte stream, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        self.write_to(&mut HashWriter(&mut hasher))
            .expect("in-memory hashing cannot fail");
        hex::encode(hasher.finalize())
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header_json = serde_json::to_vec(&self.header).expect("header serializes");
        w.write_all(&RADF_MAGIC)?;
        w.write_all(&(header_json.len() as u32).to_le_bytes())?;
        w.write_all(&header_json)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.labels)?;
        Ok(())
    }
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Read-only view of the N×d block of one (layer, head).
///
/// Row `i` equals `activations[i][layer][head][·]`; labels are shared with
/// the parent dataset.
#[derive(Debug, Clone, Copy)]
pub struct HeadSliceView<'a> {
    dataset: &'a ActivationDataset,
    layer: usize,
    head: usize,
}

impl<'a> HeadSliceView<'a> {
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn head(&self) -> usize {
        self.head
    }

    /// Number of rows (samples).
    pub fn len(&self) -> usize {
        self.dataset.n_samples()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Vector dimension d.
    pub fn dim(&self) -> usize {
        self.dataset.head_dim()
    }

    pub fn labels(&self) -> &'a [u8] {
        self.dataset.labels()
    }

    /// Raw f32 components of row `i`.
    #[inline]
    pub fn row_raw(&self, i: usize) -> &'a [f32] {
        self.dataset.head_vector(i, self.layer, self.head)
    }

    /// Row `i` lifted into the working scalar.
    pub fn row<F: Scalar>(&self, i: usize) -> DVector<F> {
        DVector::from_iterator(
            self.dim(),
            self.row_raw(i).iter().map(|&v| F::from_f64_lossy(v as f64)),
        )
    }

    /// The whole N×d block as a dense matrix in the working scalar.
    pub fn matrix<F: Scalar>(&self) -> DMatrix<F> {
        let (n, d) = (self.len(), self.dim());
        DMatrix::from_fn(n, d, |i, k| F::from_f64_lossy(self.row_raw(i)[k] as f64))
    }

    /// Per-class counts `(n0, n1)` over the shared labels.
    pub fn class_counts(&self) -> (usize, usize) {
        self.dataset.class_counts()
    }
}

/// Load a RADF v1 file, validating magic, header, size, and finiteness.
pub fn load_dataset<P: AsRef<Path>>(path: P) -> Result<ActivationDataset> {
    let file = File::open(path.as_ref())?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or_size(&mut r, &mut magic, file_len, 0)?;
    if magic != RADF_MAGIC {
        return Err(Error::MagicMismatch { found: magic });
    }

    let mut len_bytes = [0u8; 4];
    read_exact_or_size(&mut r, &mut len_bytes, file_len, 4)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;

    let mut header_json = vec![0u8; header_len];
    read_exact_or_size(&mut r, &mut header_json, file_len, 8)?;
    let header: DatasetHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::HeaderParse(e.to_string()))?;
    header.validate()?;

    let expected = 8 + header_len as u64 + header.payload_bytes() + header.n_samples as u64;
    if file_len != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: file_len,
        });
    }

    let mut payload = vec![0u8; header.payload_bytes() as usize];
    r.read_exact(&mut payload)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut labels = vec![0u8; header.n_samples];
    r.read_exact(&mut labels)?;

    ActivationDataset::new(header, data, labels)
}

/// Write a dataset as RADF v1. Refuses to write if invariants do not hold.
pub fn save_dataset<P: AsRef<Path>>(ds: &ActivationDataset, path: P) -> Result<()> {
    // Invariants are enforced at construction; re-check cheaply so a file
    // is never produced from a corrupted value.
    if ds.labels.len() != ds.header.n_samples || ds.data.len() != ds.header.element_count() {
        return Err(Error::InvariantViolation(
            "dataset invariants do not hold; refusing to write".into(),
        ));
    }
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    ds.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_exact_or_size<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    file_len: u64,
    offset: u64,
) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::SizeMismatch {
        expected: offset + buf.len() as u64,
        actual: file_len,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn tiny_dataset() -> ActivationDataset {
        // N=2, L=1, H=1, d=2; labels [0, 1].
        let header = DatasetHeader::new(2, 1, 1, 2);
        ActivationDataset::new(header, vec![1.0, 2.0, 3.0, 4.0], vec![0, 1]).unwrap()
    }

    pub(crate) fn random_dataset(seed: u64, n: usize, l: usize, h: usize, d: usize) -> ActivationDataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let header = DatasetHeader::new(n, l, h, d);
        let data: Vec<f32> = (0..header.element_count())
            .map(|_| rng.random_range(-4.0f32..4.0))
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1u8)).collect();
        ActivationDataset::new(header, data, labels).unwrap()
    }

    #[test]
    fn smallest_wellformed_container_roundtrips() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.radf");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(ds, back);
        assert_eq!(back.head_vector(0, 0, 0), &[1.0, 2.0]);
        assert_eq!(back.head_vector(1, 0, 0), &[3.0, 4.0]);
    }

    #[test]
    fn truncated_file_is_size_mismatch() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.radf");
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        match load_dataset(&path) {
            Err(Error::SizeMismatch { .. }) => {}
            other => panic!("expected SizeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_magic_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.radf");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxx").unwrap();
        match load_dataset(&path) {
            Err(Error::MagicMismatch { found }) => assert_eq!(&found, b"NOPE"),
            other => panic!("expected MagicMismatch, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_is_header_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("badjson.radf");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&RADF_MAGIC);
        let junk = b"{not json";
        bytes.extend_from_slice(&(junk.len() as u32).to_le_bytes());
        bytes.extend_from_slice(junk);
        std::fs::write(&path, &bytes).unwrap();
        match load_dataset(&path) {
            Err(Error::HeaderParse(_)) => {}
            other => panic!("expected HeaderParse, got {other:?}"),
        }
    }

    #[test]
    fn nonfinite_payload_reports_first_offender() {
        let header = DatasetHeader::new(2, 1, 1, 2);
        let err = ActivationDataset::new(header, vec![1.0, f32::NAN, f32::INFINITY, 0.0], vec![0, 1])
            .unwrap_err();
        match err {
            Error::NonFiniteValue { index } => assert_eq!(index, 1),
            other => panic!("expected NonFiniteValue, got {other:?}"),
        }
    }

    #[test]
    fn label_length_mismatch_refused_before_writing() {
        let header = DatasetHeader::new(2, 1, 1, 2);
        match ActivationDataset::new(header, vec![0.0; 4], vec![0]) {
            Err(Error::InvariantViolation(_)) => {}
            other => panic!("expected InvariantViolation, got {other:?}"),
        }
    }

    #[test]
    fn single_sample_file_size_formula() {
        let d = 3;
        let header = DatasetHeader::new(1, 1, 1, d);
        let header_json = serde_json::to_vec(&header).unwrap();
        let ds = ActivationDataset::new(header, vec![0.5; d], vec![1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.radf");
        save_dataset(&ds, &path).unwrap();
        let expected = 8 + header_json.len() as u64 + (d as u64) * 4 + 1;
        assert_eq!(std::fs::metadata(&path).unwrap().len(), expected);
    }

    #[test]
    fn seeded_roundtrip_is_bit_identical() {
        let ds = random_dataset(7, 11, 2, 3, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seed7.radf");
        save_dataset(&ds, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(ds, back);
        let path2 = dir.path().join("seed7b.radf");
        save_dataset(&back, &path2).unwrap();
        assert_eq!(first, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn slice_layout_matches_flat_index() {
        let ds = random_dataset(3, 5, 2, 3, 4);
        let (l, h) = (1, 2);
        let view = ds.slice_head(l, h).unwrap();
        for i in 0..ds.n_samples() {
            let off = ((i * 2 + l) * 3 + h) * 4;
            assert_eq!(view.row_raw(i), &ds.data()[off..off + 4]);
        }
    }

    #[test]
    fn slice_bounds_checked() {
        let ds = tiny_dataset();
        match ds.slice_head(0, 1) {
            Err(Error::IndexOutOfRange { what: "head", .. }) => {}
            other => panic!("expected IndexOutOfRange, got {other:?}"),
        }
        assert!(ds.slice_head(1, 0).is_err());
    }

    #[test]
    fn slice_counting_oracle() {
        let ds = random_dataset(11, 6, 2, 3, 2);
        let mut total = 0usize;
        for l in 0..ds.n_layers() {
            for h in 0..ds.n_heads() {
                total += ds.slice_head(l, h).unwrap().len();
            }
        }
        assert_eq!(total, ds.n_samples() * ds.n_layers() * ds.n_heads());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = random_dataset(1, 4, 1, 2, 3);
        let b = random_dataset(1, 4, 1, 2, 3);
        let c = random_dataset(2, 4, 1, 2, 3);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}

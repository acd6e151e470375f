//! Labeled datasets: IDX (MNIST) ingestion, label corruption for the
//! randomized-label experiment, and a Gaussian-blob generator.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, IdxError, Result};
use crate::linalg::{Matrix, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `n` samples stored as rows of `features`, with class labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be at least 1".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self { features, labels, num_classes })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Always false; datasets hold at least one sample.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.features.row(i), self.labels[i])
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(Matrix::new(indices.len(), d, data)?, labels, self.num_classes)
    }

    pub fn range(&self, range: std::ops::Range<usize>) -> Result<Self> {
        self.subset(&range.collect::<Vec<_>>())
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.input_dim() != other.input_dim() || self.num_classes != other.num_classes {
            return Err(Error::Shape("concatenating datasets of different layout".into()));
        }
        let mut data = self.features.as_slice().to_vec();
        data.extend_from_slice(other.features.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(Matrix::new(labels.len(), self.input_dim(), data)?, labels, self.num_classes)
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.num_classes)
    }

    /// Disjoint `(first n_a, next n_b)` subsets after a seeded shuffle.
    pub fn shuffled_split(&self, n_a: usize, n_b: usize, rng: &mut Rng) -> Result<(Self, Self)> {
        if n_a + n_b > self.len() || n_a == 0 || n_b == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} samples into {n_a} + {n_b}",
                self.len()
            )));
        }
        let perm = rng.permutation(self.len());
        Ok((self.subset(&perm[..n_a])?, self.subset(&perm[n_a..n_a + n_b])?))
    }

    /// Short content hash of features and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.input_dim() as u64).to_le_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        for v in self.features.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated { expected: offset + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::WrongMagic { expected, found });
    }
    Ok(())
}

/// Decodes an IDX3 image file into an `n x (rows*cols)` matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix, IdxError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let expected = 16 + n * dim;
    if bytes.len() < expected {
        return Err(IdxError::Truncated { expected, found: bytes.len() });
    }
    let data = bytes[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Matrix::new(n, dim, data).expect("length checked above"))
}

/// Decodes an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(IdxError::Truncated { expected, found: bytes.len() });
    }
    Ok(bytes[8..expected].iter().map(|&b| usize::from(b)).collect())
}

/// Encodes `[0, 1]` features as an IDX3 image file with the given image shape.
/// Values are rounded to the nearest byte.
pub fn encode_idx_images(features: &Matrix, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != features.cols() {
        return Err(Error::Shape(format!(
            "{rows}x{cols} images cannot hold {} features",
            features.cols()
        )));
    }
    let mut out = Vec::with_capacity(16 + features.as_slice().len());
    for v in [IDX_IMAGES_MAGIC, features.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(features.as_slice().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let byte = u8::try_from(l)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in a byte")))?;
        out.push(byte);
    }
    Ok(out)
}

/// Pairs decoded images and labels into a dataset with `num_classes` classes.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], num_classes: usize) -> Result<Dataset> {
    let features = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if features.rows() != labels.len() {
        return Err(IdxError::CountMismatch { images: features.rows(), labels: labels.len() }.into());
    }
    Dataset::new(features, labels, num_classes)
}

pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| Error::Io { path: p.display().to_string(), source })
    };
    dataset_from_idx(&read(images)?, &read(labels)?, num_classes)
}

/// Like [`corrupt_labels`] but also returns the selected sample indices.
pub fn corrupt_labels_tracked(data: &Dataset, ratio: f64, rng: &mut Rng) -> Result<(Dataset, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("corruption ratio {ratio} not in [0, 1]")));
    }
    let count = (ratio * data.len() as f64).round() as usize;
    let mut selected = rng.permutation(data.len());
    selected.truncate(count);
    let mut labels = data.labels.clone();
    for &i in &selected {
        labels[i] = rng.below(data.num_classes);
    }
    Ok((data.with_labels(labels)?, selected))
}

/// Replaces the labels of a seeded uniform subset of `round(ratio * n)` samples
/// with labels drawn uniformly from `[0, K)`. A redrawn label may equal the
/// original one.
pub fn corrupt_labels(data: &Dataset, ratio: f64, rng: &mut Rng) -> Result<Dataset> {
    corrupt_labels_tracked(data, ratio, rng).map(|(d, _)| d)
}

/// `k` unit-variance Gaussian clusters centred at `separation` times random
/// unit directions; sample `i` belongs to cluster `i mod k`.
pub fn synthetic_blobs(n: usize, input_dim: usize, k: usize, separation: f64, rng: &mut Rng) -> Result<Dataset> {
    if k == 0 || input_dim == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "need n >= k >= 1 and input_dim >= 1 (n={n}, k={k}, input_dim={input_dim})"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!("separation {separation} must be finite and >= 0")));
    }
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let mut dir: Vec<f64> = (0..input_dim).map(|_| rng.normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|v| *v *= separation / norm);
            dir
        })
        .collect();
    let mut data = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        data.extend(centers[c].iter().map(|&m| m + rng.normal()));
        labels.push(c);
    }
    Dataset::new(Matrix::new(n, input_dim, data)?, labels, k)
}

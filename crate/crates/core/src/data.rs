//! Datasets and the per-sample state store.
//!
//! Features are stored row-major as `f32`; labels are class indices. The
//! [`SampleStore`] holds the lagging loss, prediction accuracy and prediction
//! confidence of every sample, as last observed by a forward pass.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::run_rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: cannot read: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    MagicMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("sample count mismatch: {images_path} has {images} images, {labels_path} has {labels} labels")]
    CountMismatch {
        images_path: PathBuf,
        labels_path: PathBuf,
        images: usize,
        labels: usize,
    },
    #[error("{path}: truncated file ({len} bytes, need {needed})")]
    TruncatedFile {
        path: PathBuf,
        len: usize,
        needed: usize,
    },
    #[error("{path}: line {line} has {found} cells, header has {expected}")]
    RaggedRow {
        path: PathBuf,
        line: u64,
        found: usize,
        expected: usize,
    },
    #[error("{path}: line {line}, column `{column}`: `{cell}` is not a number")]
    NonNumericCell {
        path: PathBuf,
        line: u64,
        column: String,
        cell: String,
    },
    #[error("{path}: no column named `{column}`")]
    UnknownLabelColumn { path: PathBuf, column: String },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("unsupported synthetic dataset: {0}")]
    UnsupportedCombination(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("sample index {idx} out of range for store of {n} samples")]
    IndexOutOfRange { idx: usize, n: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `n × d`.
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub n: usize,
    pub d: usize,
    pub k: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, labels: Vec<u32>, d: usize, k: usize) -> Result<Self, DataError> {
        let n = labels.len();
        if n == 0 || d == 0 || k < 2 {
            return Err(DataError::Invalid(format!("need n >= 1, d >= 1, k >= 2 (got n={n}, d={d}, k={k})")));
        }
        if features.len() != n * d {
            return Err(DataError::Invalid(format!(
                "feature buffer has {} values, expected {}",
                features.len(),
                n * d
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y as usize >= k) {
            return Err(DataError::Invalid(format!("label {bad} is not below class count {k}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("features contain NaN or Inf".into()));
        }
        Ok(Self {
            features,
            labels,
            n,
            d,
            k,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    /// Widens the class count (e.g. to agree with a separately loaded test set).
    pub fn with_classes(mut self, k: usize) -> Self {
        self.k = self.k.max(k);
        self
    }

    /// A new dataset made of the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            n: labels.len(),
            features,
            labels,
            d: self.d,
            k: self.k,
        }
    }

    /// Splits off the last `tail` rows.
    pub fn split_tail(&self, tail: usize) -> Result<(Dataset, Dataset), DataError> {
        if tail == 0 || tail >= self.n {
            return Err(DataError::Invalid(format!(
                "cannot hold out {tail} of {} samples",
                self.n
            )));
        }
        let head: Vec<usize> = (0..self.n - tail).collect();
        let rest: Vec<usize> = (self.n - tail..self.n).collect();
        Ok((self.subset(&head), self.subset(&rest)))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::TruncatedFile {
            path: path.to_path_buf(),
            len: bytes.len(),
            needed: offset + 4,
        })
}

/// Header of an IDX image file: `(count, rows, cols)`.
pub fn idx_image_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize), DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::MagicMismatch {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    Ok((
        be_u32(bytes, 4, path)? as usize,
        be_u32(bytes, 8, path)? as usize,
        be_u32(bytes, 12, path)? as usize,
    ))
}

/// Header of an IDX label file: the label count.
pub fn idx_label_header(bytes: &[u8], path: &Path) -> Result<usize, DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::MagicMismatch {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    Ok(be_u32(bytes, 4, path)? as usize)
}

/// Parses an IDX image/label pair already held in memory. Pixels are scaled
/// to `[0, 1]` by dividing by 255.
pub fn parse_idx(
    image_bytes: &[u8],
    images_path: &Path,
    label_bytes: &[u8],
    labels_path: &Path,
) -> Result<Dataset, DataError> {
    let (count, rows, cols) = idx_image_header(image_bytes, images_path)?;
    let label_count = idx_label_header(label_bytes, labels_path)?;
    if count != label_count {
        return Err(DataError::CountMismatch {
            images_path: images_path.to_path_buf(),
            labels_path: labels_path.to_path_buf(),
            images: count,
            labels: label_count,
        });
    }
    let d = rows * cols;
    let needed = 16 + count * d;
    if image_bytes.len() < needed {
        return Err(DataError::TruncatedFile {
            path: images_path.to_path_buf(),
            len: image_bytes.len(),
            needed,
        });
    }
    if label_bytes.len() < 8 + count {
        return Err(DataError::TruncatedFile {
            path: labels_path.to_path_buf(),
            len: label_bytes.len(),
            needed: 8 + count,
        });
    }
    let features = image_bytes[16..needed]
        .iter()
        .map(|&p| p as f32 / 255.0)
        .collect();
    let labels: Vec<u32> = label_bytes[8..8 + count].iter().map(|&y| y as u32).collect();
    let k = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(0).max(2);
    Dataset::new(features, labels, d, k)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    parse_idx(&images, images_path, &labels, labels_path)
}

/// Loads a numeric CSV with a header row. Feature columns are z-score
/// normalized (population standard deviation); constant columns become 0.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    parse_csv(&bytes, path, label_column)
}

pub fn parse_csv(bytes: &[u8], path: &Path, label_column: &str) -> Result<Dataset, DataError> {
    let csv_err = |e: csv::Error| DataError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let headers: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_at = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::UnknownLabelColumn {
            path: path.to_path_buf(),
            column: label_column.to_string(),
        })?;
    let d = headers.len() - 1;

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != headers.len() {
            return Err(DataError::RaggedRow {
                path: path.to_path_buf(),
                line,
                found: record.len(),
                expected: headers.len(),
            });
        }
        let mut feature = 0;
        for (c, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| DataError::NonNumericCell {
                path: path.to_path_buf(),
                line,
                column: headers[c].clone(),
                cell: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(DataError::NonNumericCell {
                    path: path.to_path_buf(),
                    line,
                    column: headers[c].clone(),
                    cell: cell.to_string(),
                });
            }
            if c == label_at {
                if value < 0.0 || value.fract() != 0.0 || value > u32::MAX as f64 {
                    return Err(DataError::Invalid(format!(
                        "{}: line {line}: label `{cell}` is not a class index",
                        path.display()
                    )));
                }
                labels.push(value as u32);
            } else {
                columns[feature].push(value);
                feature += 1;
            }
        }
    }
    if d == 0 {
        return Err(DataError::Invalid(format!("{}: no feature columns", path.display())));
    }
    let n = labels.len();
    for column in &mut columns {
        let mean = column.iter().sum::<f64>() / n.max(1) as f64;
        let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64;
        let std = var.sqrt();
        for v in column.iter_mut() {
            *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
        }
    }
    let mut features = Vec::with_capacity(n * d);
    for i in 0..n {
        features.extend(columns.iter().map(|c| c[i] as f32));
    }
    let k = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(0).max(2);
    Dataset::new(features, labels, d, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Isotropic Gaussian clusters, one per class.
    Blobs,
    /// Two interleaving half circles (d = 2, k = 2 only).
    Moons,
    /// Labels from the argmax of a random linear map, with a margin.
    Linear,
}

impl std::str::FromStr for SyntheticKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "moons" => Ok(Self::Moons),
            "linear" => Ok(Self::Linear),
            other => Err(DataError::UnsupportedCombination(format!("unknown kind `{other}`"))),
        }
    }
}

const LINEAR_MARGIN: f64 = 0.5;

/// Generates a synthetic classification set. Labels cycle through the
/// classes (`i mod k`) so every class is present; the output depends only on
/// the arguments.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, d: usize, k: usize, seed: u64) -> Result<Dataset, DataError> {
    if d == 0 || k < 2 || n < k {
        return Err(DataError::UnsupportedCombination(format!(
            "{kind:?} needs d >= 1, k >= 2, n >= k (got n={n}, d={d}, k={k})"
        )));
    }
    let mut rng = run_rng(seed);
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    match kind {
        SyntheticKind::Blobs => {
            let centers: Vec<f64> = (0..k * d).map(|_| rng.random_range(-4.0..4.0)).collect();
            for i in 0..n {
                let y = i % k;
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push((centers[y * d + j] + z) as f32);
                }
                labels.push(y as u32);
            }
        }
        SyntheticKind::Moons => {
            if d != 2 || k != 2 {
                return Err(DataError::UnsupportedCombination(format!(
                    "moons requires d=2, k=2 (got d={d}, k={k})"
                )));
            }
            for i in 0..n {
                let y = i % 2;
                let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let (x0, x1) = if y == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let e0: f64 = StandardNormal.sample(&mut rng);
                let e1: f64 = StandardNormal.sample(&mut rng);
                features.push((x0 + 0.1 * e0) as f32);
                features.push((x1 + 0.1 * e1) as f32);
                labels.push(y as u32);
            }
        }
        SyntheticKind::Linear => {
            let weights: Vec<f64> = (0..k * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut x = vec![0.0f64; d];
            for i in 0..n {
                let want = i % k;
                // rejection: keep points whose argmax class is `want` with a margin
                loop {
                    for v in x.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    let x32: Vec<f64> = x.iter().map(|&v| v as f32 as f64).collect();
                    let scores: Vec<f64> = (0..k)
                        .map(|c| weights[c * d..(c + 1) * d].iter().zip(&x32).map(|(w, v)| w * v).sum())
                        .collect();
                    let best = scores[want];
                    let runner_up = scores
                        .iter()
                        .enumerate()
                        .filter(|&(c, _)| c != want)
                        .map(|(_, &s)| s)
                        .fold(f64::NEG_INFINITY, f64::max);
                    if best - runner_up >= LINEAR_MARGIN {
                        break;
                    }
                }
                features.extend(x.iter().map(|&v| v as f32));
                labels.push(want as u32);
            }
        }
    }
    Dataset::new(features, labels, d, k)
}

/// Lagging loss assigned before a sample's first forward pass. Nothing with
/// this loss can rank among the lowest, so the first epoch trains on
/// everything.
pub const BOOTSTRAP_LOSS: f64 = f64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleState {
    pub lagging_loss: f64,
    /// Predicted correctly at the last forward pass.
    pub pa: bool,
    /// Max softmax probability at the last forward pass.
    pub pc: f64,
    /// `None` until the first forward pass.
    pub refreshed_at: Option<usize>,
    pub hidden_now: bool,
}

impl Default for SampleState {
    fn default() -> Self {
        Self {
            lagging_loss: BOOTSTRAP_LOSS,
            pa: false,
            pc: 0.0,
            refreshed_at: None,
            hidden_now: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleStore {
    states: Vec<SampleState>,
    pub epoch: usize,
    writes: u64,
}

impl SampleStore {
    pub fn new(n: usize) -> Self {
        Self {
            states: vec![SampleState::default(); n],
            epoch: 0,
            writes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[SampleState] {
        &self.states
    }

    pub fn get(&self, idx: usize) -> Result<&SampleState, DataError> {
        self.states.get(idx).ok_or(DataError::IndexOutOfRange {
            idx,
            n: self.states.len(),
        })
    }

    /// Total `record_forward` calls since creation.
    pub fn writes(&self) -> u64 {
        self.writes
    }

    /// True while no sample has been forwarded yet.
    pub fn is_bootstrap(&self) -> bool {
        self.states.iter().all(|s| s.refreshed_at.is_none())
    }

    pub fn is_populated(&self) -> bool {
        self.states.iter().all(|s| s.refreshed_at.is_some())
    }

    /// Overwrites the state of `idx` with the outcome of a forward pass.
    /// Repeated writes in the same epoch keep the last one.
    pub fn record_forward(&mut self, idx: usize, loss: f64, pa: bool, pc: f64, epoch: usize) -> Result<(), DataError> {
        let n = self.states.len();
        let state = self.states.get_mut(idx).ok_or(DataError::IndexOutOfRange { idx, n })?;
        debug_assert!(loss >= 0.0, "negative loss {loss}");
        debug_assert!((0.0..=1.0).contains(&pc), "pc {pc} outside [0, 1]");
        state.lagging_loss = loss;
        state.pa = pa;
        state.pc = pc;
        state.refreshed_at = Some(epoch);
        self.writes += 1;
        Ok(())
    }

    pub(crate) fn set_hidden(&mut self, hidden: &[usize]) {
        for s in &mut self.states {
            s.hidden_now = false;
        }
        for &i in hidden {
            self.states[i].hidden_now = true;
        }
    }
}

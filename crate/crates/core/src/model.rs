//! Small differentiable classifiers with hand-derived gradients.
//!
//! Two architectures share one flat `f64` parameter vector:
//!
//! * `softmax-reg`: `W (k × d)`, then `b (k)`.
//! * `mlp1`: `W1 (h × d)`, `b1 (h)`, `W2 (k × h)`, `b2 (k)` with a tanh
//!   hidden layer.
//!
//! Per-sample loss is cross-entropy over a max-subtracted softmax. Batch
//! gradients are the mean of per-sample gradients, accumulated in batch
//! order.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature dimension mismatch: model expects {expected}, batch has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} is not below class count {k}")]
    LabelOutOfRange { label: u32, k: usize },
    #[error("invalid model shape: {0}")]
    InvalidShape(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    SoftmaxReg,
    Mlp1,
}

impl Arch {
    fn tag(self) -> u32 {
        match self {
            Arch::SoftmaxReg => 0,
            Arch::Mlp1 => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Arch::SoftmaxReg),
            1 => Some(Arch::Mlp1),
            _ => None,
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::SoftmaxReg => "softmax-reg",
            Arch::Mlp1 => "mlp1",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub d: usize,
    /// Hidden width; 0 for `softmax-reg`.
    pub h: usize,
    pub k: usize,
    pub params: Vec<f64>,
}

/// Result of one forward pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Row-major `B × K`.
    pub logits: Vec<f64>,
    pub per_sample_loss: Vec<f64>,
    pub pa: Vec<bool>,
    pub pc: Vec<f64>,
}

/// Loss, prediction accuracy and confidence of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutcome {
    pub loss: f64,
    pub pa: bool,
    pub pc: f64,
}

pub fn param_count(arch: Arch, d: usize, h: usize, k: usize) -> usize {
    match arch {
        Arch::SoftmaxReg => d * k + k,
        Arch::Mlp1 => d * h + h + h * k + k,
    }
}

/// Softmax statistics of a logit row: `(loss, pa, pc)`.
///
/// `pc` is the largest class probability, which after max-subtraction is
/// exactly `1 / Σ exp(l - max)`. Argmax ties go to the lowest class index.
pub fn softmax_outcome(logits: &[f64], label: usize) -> SampleOutcome {
    let mut arg = 0;
    let mut max = logits[0];
    for (c, &l) in logits.iter().enumerate().skip(1) {
        if l > max {
            max = l;
            arg = c;
        }
    }
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let loss = (sum.ln() - (logits[label] - max)).max(0.0);
    SampleOutcome {
        loss,
        pa: arg == label,
        pc: (1.0 / sum).min(1.0),
    }
}

/// Scratch buffers for one sample; reused across samples.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    nonzero: Vec<usize>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dlogits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Model {
    pub fn zeros(arch: Arch, d: usize, h: usize, k: usize) -> Result<Self, ModelError> {
        if d == 0 || k < 2 {
            return Err(ModelError::InvalidShape(format!("need d >= 1 and k >= 2 (got d={d}, k={k})")));
        }
        let h = match arch {
            Arch::SoftmaxReg => 0,
            Arch::Mlp1 if h == 0 => {
                return Err(ModelError::InvalidShape("mlp1 needs a hidden width >= 1".into()))
            }
            Arch::Mlp1 => h,
        };
        Ok(Self {
            arch,
            d,
            h,
            k,
            params: vec![0.0; param_count(arch, d, h, k)],
        })
    }

    /// `softmax-reg` starts at zero. `mlp1` draws `W1` from
    /// `U(-1/√d, 1/√d)` then `W2` from `U(-1/√h, 1/√h)`, biases zero.
    pub fn init<R: Rng + ?Sized>(arch: Arch, d: usize, h: usize, k: usize, rng: &mut R) -> Result<Self, ModelError> {
        let mut model = Self::zeros(arch, d, h, k)?;
        if arch == Arch::Mlp1 {
            let h = model.h;
            let a1 = 1.0 / (d as f64).sqrt();
            let a2 = 1.0 / (h as f64).sqrt();
            let (w1, rest) = model.params.split_at_mut(h * d);
            for w in w1 {
                *w = rng.random_range(-a1..a1);
            }
            for w in &mut rest[h..h + k * h] {
                *w = rng.random_range(-a2..a2);
            }
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_batch(&self, x: &[f32], y: &[u32]) -> Result<(), ModelError> {
        if y.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if x.len() != y.len() * self.d {
            let found = if y.is_empty() { 0 } else { x.len() / y.len() };
            return Err(ModelError::DimMismatch {
                expected: self.d,
                found,
            });
        }
        if let Some(&label) = y.iter().find(|&&l| l as usize >= self.k) {
            return Err(ModelError::LabelOutOfRange { label, k: self.k });
        }
        Ok(())
    }

    /// Forward pass for one sample; when `grad` is given, adds this sample's
    /// (unscaled) loss gradient into it.
    pub fn sample_pass(&self, x: &[f32], label: u32, scratch: &mut Scratch, grad: Option<&mut [f64]>) -> SampleOutcome {
        let (d, h, k) = (self.d, self.h, self.k);
        let y = label as usize;
        scratch.nonzero.clear();
        scratch
            .nonzero
            .extend(x.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i));
        scratch.logits.clear();
        scratch.logits.resize(k, 0.0);

        match self.arch {
            Arch::SoftmaxReg => {
                let (w, b) = self.params.split_at(k * d);
                for c in 0..k {
                    let row = &w[c * d..(c + 1) * d];
                    let mut acc = 0.0;
                    for &i in &scratch.nonzero {
                        acc += row[i] * x[i] as f64;
                    }
                    scratch.logits[c] = acc + b[c];
                }
            }
            Arch::Mlp1 => {
                let (w1, rest) = self.params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                scratch.hidden.clear();
                scratch.hidden.resize(h, 0.0);
                for j in 0..h {
                    let row = &w1[j * d..(j + 1) * d];
                    let mut acc = 0.0;
                    for &i in &scratch.nonzero {
                        acc += row[i] * x[i] as f64;
                    }
                    scratch.hidden[j] = (acc + b1[j]).tanh();
                }
                for c in 0..k {
                    let row = &w2[c * h..(c + 1) * h];
                    let acc: f64 = row.iter().zip(&scratch.hidden).map(|(w, a)| w * a).sum();
                    scratch.logits[c] = acc + b2[c];
                }
            }
        }

        let outcome = softmax_outcome(&scratch.logits, y);
        let Some(grad) = grad else {
            return outcome;
        };

        // dL/dlogits = softmax - onehot(y)
        let max = scratch.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        scratch.dlogits.clear();
        scratch.dlogits.extend(scratch.logits.iter().map(|&l| (l - max).exp()));
        let sum: f64 = scratch.dlogits.iter().sum();
        for p in scratch.dlogits.iter_mut() {
            *p /= sum;
        }
        scratch.dlogits[y] -= 1.0;

        match self.arch {
            Arch::SoftmaxReg => {
                let (gw, gb) = grad.split_at_mut(k * d);
                for c in 0..k {
                    let g = scratch.dlogits[c];
                    let row = &mut gw[c * d..(c + 1) * d];
                    for &i in &scratch.nonzero {
                        row[i] += g * x[i] as f64;
                    }
                    gb[c] += g;
                }
            }
            Arch::Mlp1 => {
                let w2 = &self.params[h * d + h..h * d + h + k * h];
                let (gw1, grest) = grad.split_at_mut(h * d);
                let (gb1, grest) = grest.split_at_mut(h);
                let (gw2, gb2) = grest.split_at_mut(k * h);
                scratch.dhidden.clear();
                scratch.dhidden.resize(h, 0.0);
                for c in 0..k {
                    let g = scratch.dlogits[c];
                    let grow = &mut gw2[c * h..(c + 1) * h];
                    let wrow = &w2[c * h..(c + 1) * h];
                    for j in 0..h {
                        grow[j] += g * scratch.hidden[j];
                        scratch.dhidden[j] += g * wrow[j];
                    }
                    gb2[c] += g;
                }
                for j in 0..h {
                    let a = scratch.hidden[j];
                    let da = scratch.dhidden[j] * (1.0 - a * a);
                    let row = &mut gw1[j * d..(j + 1) * d];
                    for &i in &scratch.nonzero {
                        row[i] += da * x[i] as f64;
                    }
                    gb1[j] += da;
                }
            }
        }
        outcome
    }

    /// Outcome and logits of one sample; the logits live in `scratch`.
    fn sample_logits<'s>(&self, x: &[f32], label: u32, scratch: &'s mut Scratch) -> (SampleOutcome, &'s [f64]) {
        let outcome = self.sample_pass(x, label, scratch, None);
        (outcome, &scratch.logits)
    }

    /// Forward pass over a row-major batch. Does not touch the parameters.
    pub fn forward(&self, x: &[f32], y: &[u32]) -> Result<ForwardOutput, ModelError> {
        self.check_batch(x, y)?;
        let b = y.len();
        let mut scratch = Scratch::default();
        let mut out = ForwardOutput {
            logits: Vec::with_capacity(b * self.k),
            per_sample_loss: Vec::with_capacity(b),
            pa: Vec::with_capacity(b),
            pc: Vec::with_capacity(b),
        };
        for (row, &label) in x.chunks_exact(self.d).zip(y) {
            let (o, logits) = self.sample_logits(row, label, &mut scratch);
            out.logits.extend_from_slice(logits);
            out.per_sample_loss.push(o.loss);
            out.pa.push(o.pa);
            out.pc.push(o.pc);
        }
        Ok(out)
    }

    /// Gradient of the mean cross-entropy over the batch.
    pub fn backward(&self, x: &[f32], y: &[u32]) -> Result<Vec<f64>, ModelError> {
        self.check_batch(x, y)?;
        let mut grad = vec![0.0; self.params.len()];
        let mut scratch = Scratch::default();
        for (row, &label) in x.chunks_exact(self.d).zip(y) {
            self.sample_pass(row, label, &mut scratch, Some(&mut grad));
        }
        let scale = 1.0 / y.len() as f64;
        for g in &mut grad {
            *g *= scale;
        }
        Ok(grad)
    }

    /// Mean cross-entropy over the batch.
    pub fn mean_loss(&self, x: &[f32], y: &[u32]) -> Result<f64, ModelError> {
        let out = self.forward(x, y)?;
        Ok(out.per_sample_loss.iter().sum::<f64>() / y.len() as f64)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.arch.tag().to_le_bytes())?;
        for dim in [self.d, self.h, self.k] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(36 + 8 * self.params.len());
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < CHECKPOINT_HEADER_LEN {
            return Err(bad("file shorter than header"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("wrong magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let arch = Arch::from_tag(u32_at(12)).ok_or_else(|| bad("unknown architecture tag"))?;
        let (d, h, k) = (u32_at(16) as usize, u32_at(20) as usize, u32_at(24) as usize);
        let count = u64::from_le_bytes(bytes[28..36].try_into().unwrap()) as usize;
        let mut model = Self::zeros(arch, d, h, k)?;
        if count != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "parameter count {count} does not match shape ({})",
                model.params.len()
            )));
        }
        let body = &bytes[CHECKPOINT_HEADER_LEN..];
        if body.len() != 8 * count {
            return Err(bad("parameter block has the wrong length"));
        }
        for (p, chunk) in model.params.iter_mut().zip(body.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KKRBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_LEN: usize = 36;

/// Largest relative disagreement between `backward` and a central
/// finite-difference estimate of the mean loss gradient:
/// `max_i |a_i - n_i| / max(1, |a_i|, |n_i|)`.
pub fn grad_check(model: &Model, x: &[f32], y: &[u32], eps: f64) -> Result<f64, ModelError> {
    let analytic = model.backward(x, y)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + eps;
        let up = probe.mean_loss(x, y)?;
        probe.params[i] = orig - eps;
        let down = probe.mean_loss(x, y)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

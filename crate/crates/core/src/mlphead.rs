//! Single-hidden-layer MLP head over last-token embeddings.
//!
//! `y = w2 · relu(w1 x + b1) + b2`. Classification heads train on
//! `sigmoid(y)` with binary cross-entropy; regression heads output `y`
//! directly and train with absolute error on z-scored targets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scorer::Embedding;

pub const DEFAULT_HIDDEN: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum HeadError {
    #[error("input has dimension {found}, head expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("dimensions must be at least 1")]
    ZeroDim,
    #[error("empty batch")]
    EmptyBatch,
    #[error("{inputs} inputs but {targets} targets")]
    Length { inputs: usize, targets: usize },
    #[error("non-finite loss {loss} at epoch {epoch}")]
    NonFinite { epoch: usize, loss: f64 },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Logit,
    Linear,
}

/// Affine map from raw regression targets to training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn fit(targets: &[f64]) -> Self {
        let n = targets.len().max(1) as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 0.0 && std.is_finite() { std } else { 1.0 },
        }
    }

    pub fn apply(&self, t: f64) -> f64 {
        (t - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Parameters; `w1` is row-major `[hidden × input_dim]`. Also the checkpoint
/// format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    pub input_dim: usize,
    pub hidden: usize,
    pub mode: OutputMode,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

/// Same shape as the parameters of a head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Gradients {
    fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w1: vec![0.0; input_dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    fn slices(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, std::slice::from_ref(&self.b2)]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, std::slice::from_mut(&mut self.b2)]
    }

    /// Flattened in parameter order: w1, b1, w2, b2.
    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^y)` without overflow.
fn softplus(y: f64) -> f64 {
    y.max(0.0) + (-y.abs()).exp().ln_1p()
}

impl MlpHead {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden: usize, mode: OutputMode, seed: u64) -> Result<Self, HeadError> {
        if input_dim == 0 || hidden == 0 {
            return Err(HeadError::ZeroDim);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = (6.0 / (input_dim + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        let w1 = (0..input_dim * hidden).map(|_| rng.gen_range(-a1..=a1)).collect();
        let w2 = (0..hidden).map(|_| rng.gen_range(-a2..=a2)).collect();
        Ok(Self {
            input_dim,
            hidden,
            mode,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: 0.0,
            normalization: None,
        })
    }

    pub fn zeros(input_dim: usize, hidden: usize, mode: OutputMode) -> Self {
        Self {
            input_dim,
            hidden,
            mode,
            w1: vec![0.0; input_dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
            normalization: None,
        }
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, std::slice::from_mut(&mut self.b2)]
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Flattened in order w1, b1, w2, b2.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter count");
        let mut rest = flat;
        for s in self.slices_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), HeadError> {
        if x.len() != self.input_dim {
            return Err(HeadError::Dimension {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Hidden pre-activations `w1 x + b1`.
    pub fn pre_activations(&self, x: &[f64]) -> Vec<f64> {
        self.w1
            .chunks_exact(self.input_dim)
            .zip(&self.b1)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn output_unchecked(&self, x: &[f64]) -> f64 {
        let z = self.pre_activations(x);
        z.iter().zip(&self.w2).map(|(z, w)| z.max(0.0) * w).sum::<f64>() + self.b2
    }

    /// Raw output `y` before any sigmoid.
    pub fn output(&self, x: &[f64]) -> Result<f64, HeadError> {
        self.check_dim(x)?;
        Ok(self.output_unchecked(x))
    }

    /// `sigmoid(y)` for logit heads, `y` for linear heads.
    pub fn forward(&self, x: &Embedding) -> Result<f64, HeadError> {
        let y = self.output(&x.values)?;
        Ok(match self.mode {
            OutputMode::Logit => sigmoid(y),
            OutputMode::Linear => y,
        })
    }

    /// Forward pass mapped back to target units for regression heads.
    pub fn predict(&self, x: &Embedding) -> Result<f64, HeadError> {
        let s = self.forward(x)?;
        Ok(match (self.mode, self.normalization) {
            (OutputMode::Linear, Some(n)) => n.invert(s),
            _ => s,
        })
    }

    /// Mean loss over the batch and its gradient. Targets are taken as given
    /// (already normalized for regression).
    pub fn loss_and_grad(&self, inputs: &[&[f64]], targets: &[f64]) -> Result<(f64, Gradients), HeadError> {
        if inputs.is_empty() {
            return Err(HeadError::EmptyBatch);
        }
        if inputs.len() != targets.len() {
            return Err(HeadError::Length {
                inputs: inputs.len(),
                targets: targets.len(),
            });
        }
        let mut g = Gradients::zeros(self.input_dim, self.hidden);
        let mut loss = 0.0;
        let scale = 1.0 / inputs.len() as f64;
        for (x, &t) in inputs.iter().zip(targets) {
            self.check_dim(x)?;
            let z = self.pre_activations(x);
            let y = z.iter().zip(&self.w2).map(|(z, w)| z.max(0.0) * w).sum::<f64>() + self.b2;
            let dy = match self.mode {
                OutputMode::Logit => {
                    loss += softplus(y) - t * y;
                    sigmoid(y) - t
                }
                OutputMode::Linear => {
                    let r = y - t;
                    loss += r.abs();
                    if r > 0.0 {
                        1.0
                    } else if r < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
            } * scale;
            if dy == 0.0 {
                continue;
            }
            g.b2 += dy;
            for k in 0..self.hidden {
                if z[k] <= 0.0 {
                    continue;
                }
                g.w2[k] += dy * z[k];
                let dz = dy * self.w2[k];
                g.b1[k] += dz;
                let row = &mut g.w1[k * self.input_dim..(k + 1) * self.input_dim];
                for (gw, v) in row.iter_mut().zip(x.iter()) {
                    *gw += dz * v;
                }
            }
        }
        Ok((loss * scale, g))
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("head serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HeadError> {
        let head: MlpHead = serde_json::from_str(text).map_err(|e| HeadError::Checkpoint(e.to_string()))?;
        if head.input_dim == 0 || head.hidden == 0 {
            return Err(HeadError::ZeroDim);
        }
        if head.w1.len() != head.input_dim * head.hidden || head.b1.len() != head.hidden || head.w2.len() != head.hidden {
            return Err(HeadError::Checkpoint("parameter shapes do not match dims".into()));
        }
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<(), HeadError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HeadError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadDataset {
    pub inputs: Vec<Embedding>,
    pub targets: Vec<f64>,
}

impl HeadDataset {
    pub fn new(inputs: Vec<Embedding>, targets: Vec<f64>) -> Result<Self, HeadError> {
        if inputs.len() != targets.len() {
            return Err(HeadError::Length {
                inputs: inputs.len(),
                targets: targets.len(),
            });
        }
        if let Some(first) = inputs.first() {
            if let Some(bad) = inputs.iter().find(|e| e.dim() != first.dim()) {
                return Err(HeadError::Dimension {
                    expected: first.dim(),
                    found: bad.dim(),
                });
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.inputs.first().map(Embedding::dim)
    }

    fn truncated(&self, cap: usize) -> std::borrow::Cow<'_, HeadDataset> {
        if self.len() <= cap {
            return std::borrow::Cow::Borrowed(self);
        }
        std::borrow::Cow::Owned(HeadDataset {
            inputs: self.inputs[..cap].to_vec(),
            targets: self.targets[..cap].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub max_train: usize,
    pub max_val: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            epochs: 100,
            weight_decay: 1e-3,
            batch_size: 256,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            max_train: 100_000,
            max_val: 10_000,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    /// Learning rate used during epoch `epoch` (zero-based).
    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * (1.0 - epoch as f64 / self.epochs as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation AUROC (logit heads) or MAE in target units (linear heads).
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Validation metric of `head` on `val`: AUROC for logit heads, MAE for
/// linear heads. `None` when undefined (single-class validation set).
pub fn validation_metric(head: &MlpHead, val: &HeadDataset) -> Option<f64> {
    if val.is_empty() {
        return None;
    }
    let preds: Vec<f64> = val.inputs.iter().map(|x| head.predict(x).expect("dims checked")).collect();
    match head.mode {
        OutputMode::Logit => crate::evalharness::auroc(&preds, &val.targets).ok(),
        OutputMode::Linear => crate::evalharness::mae(&preds, &val.targets).ok(),
    }
}

/// Trains `head` with AdamW and linear learning-rate decay, returning the
/// parameters of the best validation epoch (lowest train loss when no
/// validation metric is available).
pub fn train(
    head: MlpHead,
    data: &HeadDataset,
    val: Option<&HeadDataset>,
    cfg: &TrainConfig,
) -> Result<(MlpHead, TrainHistory), HeadError> {
    if data.is_empty() {
        return Err(HeadError::EmptyBatch);
    }
    if data.len() > cfg.max_train {
        log::warn!("training set of {} truncated to {}", data.len(), cfg.max_train);
    }
    let data = data.truncated(cfg.max_train);
    let val = val.map(|v| v.truncated(cfg.max_val));
    if let Some(dim) = data.dim() {
        if dim != head.input_dim {
            return Err(HeadError::Dimension {
                expected: head.input_dim,
                found: dim,
            });
        }
    }

    let mut head = head;
    let targets: Vec<f64> = match head.mode {
        OutputMode::Logit => data.targets.clone(),
        OutputMode::Linear => {
            let norm = Normalization::fit(&data.targets);
            head.normalization = Some(norm);
            data.targets.iter().map(|&t| norm.apply(t)).collect()
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = Gradients::zeros(head.input_dim, head.hidden);
    let mut v = Gradients::zeros(head.input_dim, head.hidden);
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch_size = cfg.batch_size.max(1);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, MlpHead)> = None;
    let higher_is_better = head.mode == OutputMode::Logit;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| data.inputs[i].values.as_slice()).collect();
            let ts: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let (loss, g) = head.loss_and_grad(&xs, &ts)?;
            if !loss.is_finite() {
                return Err(HeadError::NonFinite { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;

            step += 1;
            let c1 = 1.0 - cfg.adam_beta1.powi(step);
            let c2 = 1.0 - cfg.adam_beta2.powi(step);
            for (((p, g), m), v) in head
                .slices_mut()
                .into_iter()
                .zip(g.slices())
                .zip(m.slices_mut())
                .zip(v.slices_mut())
            {
                for i in 0..p.len() {
                    m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
                    v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
                    let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
                    p[i] -= lr * (update + cfg.weight_decay * p[i]);
                }
            }
        }
        let train_loss = loss_sum / data.len() as f64;
        if !train_loss.is_finite() || !head.is_finite() {
            return Err(HeadError::NonFinite { epoch, loss: train_loss });
        }
        let val_metric = val.as_ref().and_then(|v| validation_metric(&head, v));
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_metric,
        });

        // Score where larger is better.
        let score = match val_metric {
            Some(mv) if higher_is_better => mv,
            Some(mv) => -mv,
            None => -train_loss,
        };
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, head.clone()));
        }
    }

    match best {
        Some((_, best_epoch, params)) => Ok((
            params,
            TrainHistory {
                epochs: history,
                best_epoch,
            },
        )),
        None => Ok((
            head,
            TrainHistory {
                epochs: history,
                best_epoch: 0,
            },
        )),
    }
}

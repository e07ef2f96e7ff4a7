//! Training configuration, the Adam loop with best-checkpoint selection, and
//! dataset-level evaluation.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AdamState, Checkpoint, RngState};
use crate::data::{make_batches, ConvInput, Dataset, Preset};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, Metrics};
use crate::modality::ModalitySet;
use crate::model::{ForwardMode, Model, ModelConfig, Prediction};
use crate::objectives::{Head, LossParts};
use crate::params::Gradients;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Every knob of a training run. Serialized flat; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub kernel_sizes: [usize; 3],
    pub heads: usize,
    pub layers: usize,
    /// defaults to `4 d`
    pub d_ff: Option<usize>,
    /// defaults to `d`
    pub d_h: Option<usize>,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub without_mr: bool,
    pub without_cma: bool,
    pub without_lld: bool,
    pub without_hld: bool,
    pub modalities: ModalitySet,
    pub eval_head: Head,
    /// global gradient-norm ceiling; `None` disables clipping
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 64,
            kernel_sizes: [1, 1, 1],
            heads: 4,
            layers: 1,
            d_ff: None,
            d_h: None,
            dropout: 0.0,
            lr: 1e-3,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            gamma1: 1.0,
            gamma2: 1.0,
            without_mr: false,
            without_cma: false,
            without_lld: false,
            without_hld: false,
            modalities: ModalitySet::all(),
            eval_head: Head::Fused,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    /// Per-corpus optimizer settings, loss weights and best common width.
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::IemocapLike => Self { lr: 3.0e-3, batch_size: 16, gamma1: 1.0, gamma2: 1.8, d: 500, ..Self::default() },
            Preset::MeldLike => Self { lr: 2.0e-4, batch_size: 4, gamma1: 1.0, gamma2: 1.2, d: 400, ..Self::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0 && self.gamma1.is_finite() && self.gamma2.is_finite()) {
            return bad("gamma1 and gamma2 must be finite and non-negative");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        if let Some(m) = self.eval_head.modality() {
            if !self.modalities.contains(m) {
                return Err(Error::Config(format!(
                    "eval head {} is outside modality subset {}",
                    self.eval_head, self.modalities
                )));
            }
        }
        Ok(())
    }

    /// Loss weights after the distillation ablation flags.
    pub fn effective_gammas(&self) -> (f64, f64) {
        (
            if self.without_lld { 0.0 } else { self.gamma1 },
            if self.without_hld { 0.0 } else { self.gamma2 },
        )
    }

    pub fn model_config(&self, ds: &Dataset) -> ModelConfig {
        ModelConfig {
            d: self.d,
            kernel_sizes: self.kernel_sizes,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff.unwrap_or(4 * self.d),
            d_h: self.d_h.unwrap_or(self.d),
            dropout: self.dropout,
            without_mr: self.without_mr,
            without_cma: self.without_cma,
            modalities: self.modalities,
            modality_dims: ds.modality_dims,
            num_classes: ds.num_classes(),
            num_speakers: ds.num_speakers,
        }
    }
}

/// Adam with bias correction and no weight decay.
pub fn adam_step(model: &mut Model, state: &mut AdamState, grads: &Gradients<f32>, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let step = (lr / bc1) as f32;
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    let (sqrt_bc2, eps) = (bc2.sqrt() as f32, ADAM_EPS as f32);
    for idx in 0..model.params.len() {
        let Some(g) = grads.get(idx) else { continue };
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        let p = model.params.by_index_mut(idx).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= step * m[i] / (v[i].sqrt() / sqrt_bc2 + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// mean over batches of the batch-averaged loss parts
    pub train: LossParts,
    /// mean pre-clipping global gradient norm
    pub grad_norm: f64,
    pub val: Option<Metrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_weighted_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// highest validation W-F1 (last epoch without a validation set)
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: History,
}

fn snapshot(model: &Model, cfg: &TrainConfig, adam: &AdamState, epoch: usize, rng: &ChaCha8Rng) -> Checkpoint {
    Checkpoint {
        train_config: cfg.clone(),
        model: model.clone(),
        optimizer: adam.clone(),
        epoch,
        rng: RngState::capture(rng),
    }
}

/// Batch loss and mean gradient; conversations run in parallel and are
/// reduced in batch order.
fn batch_gradients(
    model: &Model,
    inputs: &[(ConvInput, u64)],
    gammas: (f64, f64),
) -> Result<Option<(LossParts, Gradients<f32>)>> {
    let results: Vec<Result<Option<(LossParts, Gradients<f32>)>>> = inputs
        .par_iter()
        .map(|(input, seed)| model.loss_and_grads(input, ForwardMode::Train { seed: *seed }, gammas))
        .collect();
    let mut parts = Vec::new();
    let mut grads = Gradients::empty(model.params.len());
    for r in results {
        if let Some((p, g)) = r? {
            grads.add_scaled(&g, 1.0);
            parts.push(p);
        }
    }
    if parts.is_empty() {
        return Ok(None);
    }
    grads.scale(1.0 / parts.len() as f32);
    Ok(Some((LossParts::mean(&parts)?, grads)))
}

pub fn train(train_ds: &Dataset, val_ds: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_ds.validate()?;
    if train_ds.conversations.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(v) = val_ds {
        train_ds.check_compatible(v)?;
    }
    let model = Model::new(cfg.model_config(train_ds), cfg.seed)?;
    train_model(model, train_ds, val_ds, cfg)
}

/// Trains an already-built model; `cfg` supplies the optimizer settings.
pub fn train_model(
    mut model: Model,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model.config.check_dataset(train_ds)?;
    let gammas = cfg.effective_gammas();
    // parameters draw from `seed`; the data stream uses a separate generator
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(&model.params);
    let mut history = History::default();
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(train_ds, cfg.batch_size, true, rng.next_u64())?;
        let mut epoch_parts = Vec::with_capacity(batches.len());
        let mut norms = Vec::with_capacity(batches.len());
        for batch in &batches {
            let inputs: Vec<(ConvInput, u64)> = (0..batch.size()).map(|b| (batch.item(b), rng.next_u64())).collect();
            let step = match batch_gradients(&model, &inputs, gammas) {
                Err(Error::NonFinite(_)) => None,
                other => Some(other?),
            };
            let Some(step) = step else {
                return Err(diverged(&model, cfg, &adam, epoch, &rng));
            };
            let Some((parts, mut grads)) = step else { continue };
            if !grads.all_finite() || !parts.total.is_finite() {
                return Err(diverged(&model, cfg, &adam, epoch, &rng));
            }
            let norm = f64::from(grads.global_norm());
            if let Some(c) = cfg.clip_norm {
                if norm > c {
                    grads.scale((c / norm) as f32);
                }
            }
            adam_step(&mut model, &mut adam, &grads, cfg.lr);
            norms.push(norm);
            epoch_parts.push(parts);
        }
        let train_parts = LossParts::mean(&epoch_parts)?;
        let val = val_ds.map(|v| evaluate(&model, v, cfg.eval_head)).transpose()?;
        let score = val.as_ref().map_or(f64::NEG_INFINITY, |m| m.weighted_f1);
        history.epochs.push(EpochRecord {
            epoch,
            train: train_parts,
            grad_norm: norms.iter().sum::<f64>() / norms.len().max(1) as f64,
            val,
        });
        let improves = match &best {
            None => true,
            Some((s, _)) => val_ds.is_none() || score > *s,
        };
        if improves {
            best = Some((score, snapshot(&model, cfg, &adam, epoch, &rng)));
            history.best_epoch = epoch;
            history.best_val_weighted_f1 = val_ds.map(|_| score);
        }
    }
    let last = snapshot(&model, cfg, &adam, cfg.epochs, &rng);
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, history })
}

fn diverged(model: &Model, cfg: &TrainConfig, adam: &AdamState, epoch: usize, rng: &ChaCha8Rng) -> Error {
    Error::Diverged { epoch, checkpoint: Box::new(snapshot(model, cfg, adam, epoch - 1, rng)) }
}

/// Evaluation-mode predictions for every conversation, in dataset order.
pub fn predict_dataset(model: &Model, ds: &Dataset, head: Head) -> Result<Vec<Prediction>> {
    model.config.check_dataset(ds)?;
    let ignore = ds.num_classes();
    ds.conversations
        .par_iter()
        .map(|c| model.predict(&ConvInput::from_conversation(c, ignore), head))
        .collect()
}

/// Metrics over labelled utterances using predictions from `head`.
pub fn evaluate(model: &Model, ds: &Dataset, head: Head) -> Result<Metrics> {
    let preds = predict_dataset(model, ds, head)?;
    let (mut truth, mut guess) = (Vec::new(), Vec::new());
    for (c, p) in ds.conversations.iter().zip(&preds) {
        if let Some(labels) = &c.labels {
            truth.extend_from_slice(labels);
            guess.extend_from_slice(&p.labels);
        }
    }
    compute_metrics(&truth, &guess, ds.num_classes())
}

/// Metrics for every head the model carries.
pub fn evaluate_all_heads(model: &Model, ds: &Dataset) -> Result<BTreeMap<Head, Metrics>> {
    model.config.heads_in_use().into_iter().map(|h| Ok((h, evaluate(model, ds, h)?))).collect()
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &Dataset) -> Result<Metrics> {
    evaluate(&ckpt.model, ds, ckpt.train_config.eval_head)
}

//! Losses, optimization and the training loop.

mod checkpoint;
mod optim;

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_SCHEMA_VERSION};
pub use optim::{clip_gradients, global_norm, lr_at, AdamW};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{
    init_params, predict_sequence, Adjacency, BoundParams, ForwardCtx, ModelConfig, ModelError, ModelKind,
    ParameterSet,
};
use crate::pbpk::{ConcentrationTensor, DataError, DatasetSplit, DrugSequence, NormMode, NormStats};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("NaN gradient for parameter `{0}`")]
    NanGradient(String),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SmoothL1,
}

impl LossKind {
    /// MSE for the baselines, Smooth L1 for the graph model.
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Mlp | ModelKind::Lstm => LossKind::Mse,
            ModelKind::Gnn => LossKind::SmoothL1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Drug trajectories per micro-batch.
    pub batch_size: usize,
    pub accumulation_steps: usize,
    /// Global-norm threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub base_lr: f64,
    pub min_lr: f64,
    /// Length of the first cosine cycle, epochs.
    pub restart_period: usize,
    pub restart_mult: usize,
    /// `None` picks [`LossKind::default_for`] the model.
    pub loss: Option<LossKind>,
    pub seed: u64,
    pub smooth_l1_beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub norm_mode: NormMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            batch_size: 8,
            accumulation_steps: 2,
            clip_norm: Some(0.5),
            base_lr: 1e-3,
            min_lr: 1e-5,
            restart_period: 50,
            restart_mult: 2,
            loss: None,
            seed: 7,
            smooth_l1_beta: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            norm_mode: NormMode::PerOrgan,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size < 1 || self.accumulation_steps < 1 {
            return bad("batch_size and accumulation_steps must be ≥ 1".into());
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return bad(format!(
                "need 0 < min_lr ≤ base_lr, got min_lr {} base_lr {}",
                self.min_lr, self.base_lr
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        if self.restart_period < 1 || self.restart_mult < 1 {
            return bad("restart_period and restart_mult must be ≥ 1".into());
        }
        if !(self.smooth_l1_beta > 0.0) {
            return bad("smooth_l1_beta must be > 0".into());
        }
        Ok(())
    }

    pub fn loss_for(&self, kind: ModelKind) -> LossKind {
        self.loss.unwrap_or_else(|| LossKind::default_for(kind))
    }
}

/// Mean Smooth-L1 loss recorded on `tape`.
pub fn smooth_l1(tape: &mut Tape, pred: Var, target: Var, beta: f64) -> Result<Var> {
    Ok(tape.smooth_l1(pred, target, beta)?)
}

/// Mean squared error recorded on `tape`.
pub fn mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    Ok(tape.mse(pred, target)?)
}

fn loss_node(tape: &mut Tape, kind: LossKind, beta: f64, pred: Var, target: Var) -> Result<Var> {
    match kind {
        LossKind::Mse => mse(tape, pred, target),
        LossKind::SmoothL1 => smooth_l1(tape, pred, target, beta),
    }
}

/// The pieces of a training run that stay fixed across steps.
pub struct Objective<'a> {
    pub model: &'a ModelConfig,
    pub adjacency: &'a Adjacency,
    pub loss: LossKind,
    pub beta: f64,
}

impl Objective<'_> {
    /// Mean loss over every next-step target of `batch` and its gradient.
    /// With `dropout_rng`, dropout is active.
    pub fn loss_and_grad(
        &self,
        params: &ParameterSet,
        batch: &[&DrugSequence],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, ParameterSet)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let loss = self.record_loss(&mut tape, &bound, batch, dropout_rng)?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?;
        Ok((value, bound.grads(&tape)))
    }

    /// Mean loss in eval mode, no gradients.
    pub fn loss(&self, params: &ParameterSet, batch: &[&DrugSequence]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let loss = self.record_loss(&mut tape, &bound, batch, None)?;
        Ok(tape.value(loss).data()[0])
    }

    fn record_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &[&DrugSequence],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(TrainError::Config("empty batch".into()));
        }
        let mut preds = Vec::with_capacity(batch.len());
        let mut target_rows = Vec::new();
        for seq in batch {
            let mut ctx = ForwardCtx {
                config: self.model,
                adjacency: self.adjacency,
                dropout_rng: dropout_rng.as_deref_mut(),
            };
            preds.push(predict_sequence(tape, bound, &mut ctx, seq)?);
            target_rows.extend_from_slice(&seq.values[seq.n_organs..]);
        }
        let pred = if preds.len() == 1 { preds[0] } else { tape.concat_rows(&preds)? };
        let shape = tape.shape(pred).to_vec();
        let target = tape.constant(Tensor::new(shape, target_rows)?);
        loss_node(tape, self.loss, self.beta, pred, target)
    }
}

/// Sums gradients micro-batch by micro-batch and releases their mean.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    sum: ParameterSet,
    count: usize,
}

impl GradAccumulator {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            sum: params.zeros_like(),
            count: 0,
        }
    }

    pub fn add(&mut self, grads: &ParameterSet) {
        for (name, acc) in self.sum.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean of the accumulated gradients; resets the accumulator.
    pub fn take_mean(&mut self) -> ParameterSet {
        let n = self.count.max(1) as f64;
        let mut out = self.sum.zeros_like();
        std::mem::swap(&mut out, &mut self.sum);
        for (_, g) in out.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x /= n);
        }
        self.count = 0;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// One optimizer update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// Epoch log as CSV (`epoch,lr,train_loss,val_loss`).
pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_loss);
    }
    s
}

/// Trains `model` on the training drugs of `split`.
///
/// Each epoch shuffles the training trajectories, walks them in
/// micro-batches of `batch_size`, averages gradients over
/// `accumulation_steps` micro-batches, clips, and applies one AdamW step at
/// `lr_at(epoch)`. The returned checkpoint holds the parameters with the
/// lowest validation loss.
pub fn train(
    model: &ModelConfig,
    data: &ConcentrationTensor,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if split.val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    if model.n_organs != data.n_organs() {
        return Err(TrainError::Config(format!(
            "model expects {} organs, dataset has {}",
            model.n_organs,
            data.n_organs()
        )));
    }
    let norm = NormStats::fit(data, &split.train, cfg.norm_mode)?;
    let train_seqs = norm.sequences(data, &split.train);
    let val_seqs = norm.sequences(data, &split.val);
    let val_refs: Vec<&DrugSequence> = val_seqs.iter().collect();
    let adjacency = Adjacency::from_graph(&data.graph);
    let objective = Objective {
        model,
        adjacency: &adjacency,
        loss: cfg.loss_for(model.kind),
        beta: cfg.smooth_l1_beta,
    };

    let mut params = init_params(model, cfg.seed)?;
    let mut opt = AdamW::from_config(&params, cfg);
    let mut acc = GradAccumulator::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);

    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, ParameterSet)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut shuffle_rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut loss_sum = 0.0;
        for (b, chunk) in batches.iter().enumerate() {
            let batch: Vec<&DrugSequence> = chunk.iter().map(|&i| &train_seqs[i]).collect();
            let (loss, grads) = objective
                .loss_and_grad(&params, &batch, Some(&mut dropout_rng))
                .map_err(|e| match e {
                    TrainError::Tensor(source) => TrainError::NonFinite { epoch, batch: b, source },
                    other => other,
                })?;
            loss_sum += loss * chunk.len() as f64;
            acc.add(&grads);
            if acc.count() == cfg.accumulation_steps || b + 1 == batches.len() {
                let mut g = acc.take_mean();
                let grad_norm = match cfg.clip_norm {
                    Some(c) => clip_gradients(&mut g, c),
                    None => global_norm(&g),
                };
                steps.push(StepRecord {
                    epoch,
                    lr,
                    grad_norm,
                    clipped_norm: global_norm(&g),
                });
                opt.step(&mut params, &g, lr)?;
            }
        }
        let train_loss = loss_sum / train_seqs.len() as f64;
        let val_loss = objective.loss(&params, &val_refs)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        };
        progress(&record);
        epochs.push(record);
        if best.as_ref().map_or(true, |(v, _, _)| val_loss < *v) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }

    let (best_val, best_epoch, best_params) = best.expect("at least one epoch");
    let checkpoint = ModelCheckpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model: model.clone(),
        train: cfg.clone(),
        norm,
        params: best_params,
        split: split.clone(),
        dataset_seed: data.seed,
        organs: data.organ_names(),
        epoch: best_epoch,
        epochs_trained: cfg.epochs,
        best_val_loss: best_val,
        final_train_loss: epochs.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        run_config: None,
    };
    Ok(TrainOutcome {
        checkpoint,
        epochs,
        steps,
    })
}

//! Batching, Adam updates and the training log.

use std::io::Write;

use odeformer_core::dataset::DatasetRecord;
use odeformer_core::rng::RandomSource;
use odeformer_core::tokenizer::{encode_expression, TokenId};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::TrainConfig;
use crate::model::{AdamState, Checkpoint, Model};
use crate::net::{EncoderInput, LossStats, ModelError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub input: EncoderInput,
    /// BOS ... EOS.
    pub target: Vec<TokenId>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error("record {index}: {msg}")]
    Record { index: u64, msg: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainExample {
    pub fn from_record(r: &DatasetRecord, d_max: usize) -> Result<Self, TrainError> {
        let err = |msg: String| TrainError::Record { index: r.index, msg };
        let sys = r.system().map_err(|e| err(e.to_string()))?;
        let traj = r.trajectory().map_err(|e| err(e.to_string()))?;
        let target = encode_expression(&sys).map_err(|e| err(e.to_string()))?;
        let input = EncoderInput::from_trajectory(&traj, d_max)?;
        Ok(Self { input, target })
    }
}

/// Groups examples of similar target length into batches that fit the token
/// budget. Ties in length are broken randomly and the batch order is
/// shuffled.
pub fn make_batches(
    examples: &[TrainExample],
    tokens_per_batch: usize,
    max_examples: usize,
    rng: &mut RandomSource,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| examples[i].target.len());
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut tokens = 0;
    for i in idx {
        let len = examples[i].target.len();
        if !cur.is_empty() && (tokens + len > tokens_per_batch || cur.len() >= max_examples) {
            batches.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += len;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Step counter after the update.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamState,
    pub cfg: TrainConfig,
    pub step: u64,
    /// Examples of a batch are split into this many contiguous shards whose
    /// gradients are summed in order, so results do not depend on the
    /// number of threads.
    pub grad_shards: usize,
    grads: Vec<f64>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        let n = model.params.len();
        Self {
            model,
            opt: AdamState::new(n),
            cfg,
            step: 0,
            grad_shards: 1,
            grads: vec![0.0; n],
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, cfg: TrainConfig) -> Self {
        let n = ck.model.params.len();
        Self {
            opt: ck.optimizer.unwrap_or_else(|| AdamState::new(n)),
            model: ck.model,
            cfg,
            step: ck.step,
            grad_shards: 1,
            grads: vec![0.0; n],
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: Some(self.cfg.clone()),
            step: self.step,
            optimizer: Some(self.opt.clone()),
        }
    }

    /// Token-mean cross-entropy and gradient over the batch, without
    /// updating parameters. The gradient is left in the internal buffer.
    fn batch_gradient(&mut self, batch: &[&TrainExample]) -> Result<LossStats, TrainError> {
        let pad = odeformer_core::tokenizer::Vocabulary::get().pad();
        let total: usize = batch
            .iter()
            .map(|e| e.target[1..].iter().filter(|&&t| t != pad).count())
            .sum();
        let scale = 1.0 / total.max(1) as f64;
        let net = self.model.net();
        let shards = self.grad_shards.clamp(1, batch.len());
        let per = batch.len().div_ceil(shards);
        self.grads.fill(0.0);
        if shards == 1 {
            let mut stats = LossStats::default();
            for e in batch {
                stats.merge(&net.loss_and_grad(&e.input, &e.target, Some(&mut self.grads), scale)?);
            }
            return Ok(stats);
        }
        let n = self.grads.len();
        let parts: Vec<Result<(Vec<f64>, LossStats), ModelError>> = batch
            .par_chunks(per)
            .map(|chunk| {
                let mut g = vec![0.0; n];
                let mut s = LossStats::default();
                for e in chunk {
                    s.merge(&net.loss_and_grad(&e.input, &e.target, Some(&mut g), scale)?);
                }
                Ok((g, s))
            })
            .collect();
        let mut stats = LossStats::default();
        for part in parts {
            let (g, s) = part?;
            crate::ops::add_in_place(&mut self.grads, &g);
            stats.merge(&s);
        }
        Ok(stats)
    }

    pub fn train_step(&mut self, batch: &[&TrainExample]) -> Result<StepReport, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let stats = self.batch_gradient(batch)?;
        let loss = stats.mean_loss();
        if !loss.is_finite() || self.grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { step: self.step });
        }
        let lr = self.cfg.learning_rate(self.step as usize);
        let t = self.step as i32 + 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in self
            .model
            .params
            .iter_mut()
            .zip(&self.grads)
            .zip(self.opt.m.iter_mut())
            .zip(self.opt.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            lr,
            loss,
            accuracy: stats.accuracy(),
        })
    }

    /// Teacher-forced loss and token accuracy over `examples`.
    pub fn evaluate(&self, examples: &[TrainExample]) -> Result<LossStats, TrainError> {
        let net = self.model.net();
        let mut stats = LossStats::default();
        for e in examples {
            stats.merge(&net.loss_and_grad(&e.input, &e.target, None, 1.0)?);
        }
        Ok(stats)
    }
}

/// Appends `step,lr,loss` rows; writes the header when `header` is set.
pub struct TrainLog<W: Write> {
    out: W,
}

impl<W: Write> TrainLog<W> {
    pub fn new(mut out: W, header: bool) -> std::io::Result<Self> {
        if header {
            writeln!(out, "step,lr,loss")?;
        }
        Ok(Self { out })
    }

    pub fn record(&mut self, r: &StepReport) -> std::io::Result<()> {
        writeln!(self.out, "{},{:e},{}", r.step, r.lr, r.loss)?;
        self.out.flush()
    }
}

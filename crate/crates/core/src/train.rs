//! Teacher-forced training with Adamax and early stopping on validation loss.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{Corpus, Vocabulary};
use crate::error::{HahtError, Result};
use crate::model::{Model, PreparedExample};
use crate::nn::Dropout;
use crate::optim::{adamax_step, AdamaxConfig, OptimizerState};
use crate::parallel::Workers;
use crate::variant::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub dropout: f64,
    /// Rescale the batch gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
    /// Tokens seen fewer times than this in the training split map to UNK.
    pub min_count: usize,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            dropout: 0.0,
            max_grad_norm: None,
            min_count: 1,
        }
    }

    /// Fine-tuning hyperparameters for the large configuration.
    pub fn large() -> Self {
        Self {
            lr: 1e-6,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            dropout: 0.1,
            max_grad_norm: None,
            min_count: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(HahtError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.max_grad_norm.is_some_and(|n| !(n > 0.0)) {
            return fail("max grad norm must be positive");
        }
        Ok(())
    }
}

/// Named configuration pairs.
pub fn preset(name: &str, vocab_size: usize) -> Result<(ModelConfig, TrainConfig)> {
    match name {
        "toy" => Ok((ModelConfig::toy(vocab_size), TrainConfig::toy())),
        "large" => Ok((ModelConfig::large(vocab_size), TrainConfig::large())),
        other => Err(HahtError::Config(format!(
            "unknown preset {other:?} (expected toy or large)"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    /// Training examples without a trainable target token.
    pub skipped_examples: usize,
}

impl TrainLog {
    /// One JSON object per epoch, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "skipped_examples": self.skipped_examples,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    /// The log with timings zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        let mut log = self.clone();
        log.epochs.iter_mut().for_each(|e| e.wall_time_secs = 0.0);
        log
    }
}

/// Tracks the best validation loss and stops after `patience` epochs
/// without improvement.
#[derive(Debug)]
pub struct EarlyStopper<T> {
    patience: usize,
    best: Option<(usize, f64, T)>,
    stale: usize,
}

impl<T> EarlyStopper<T> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records `loss` for `epoch`; `snapshot` is taken only on improvement.
    /// Returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64, snapshot: impl FnOnce() -> T) -> bool {
        let improved = self.best.as_ref().is_none_or(|(_, best, _)| loss < *best);
        if improved {
            self.best = Some((epoch, loss, snapshot()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.0)
    }

    pub fn into_best(self) -> Option<(usize, f64, T)> {
        self.best
    }
}

/// A freshly initialized model whose vocabulary comes from `train` alone.
pub fn build_model(
    train: &Corpus,
    mut config: ModelConfig,
    variant: Arc<dyn Variant>,
    min_count: usize,
) -> Result<Model> {
    let vocab = Vocabulary::build(train, min_count)?;
    config.vocab_size = vocab.len();
    Model::new(config, variant, vocab)
}

fn prepare_all(model: &Model, corpus: &Corpus) -> Result<(Vec<PreparedExample>, usize)> {
    let mut out = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for ex in &corpus.examples {
        let p = model.prepare(ex)?;
        if p.targets.iter().all(|&t| Vocabulary::is_reserved(t)) {
            skipped += 1;
        } else {
            out.push(p);
        }
    }
    Ok((out, skipped))
}

/// Mean teacher-forced loss over prepared examples.
pub fn mean_loss(model: &Model, examples: &[PreparedExample], workers: &Workers) -> Result<f64> {
    if examples.is_empty() {
        return Err(HahtError::EmptyCorpus);
    }
    let losses = workers.map(examples, |ex| model.sequence_nll(ex));
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / examples.len() as f64)
}

fn dropout_for(cfg: &TrainConfig, epoch: usize, example: usize) -> Dropout {
    if cfg.dropout <= 0.0 {
        return Dropout::disabled();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((epoch as u64) << 32) | example as u64);
    Dropout::new(cfg.dropout, rng)
}

/// Trains `model` in place and returns the best-validation weights.
///
/// Each batch runs its examples independently (possibly on several workers)
/// and sums their gradients in batch order before one optimizer step.
pub fn train(
    mut model: Model,
    train: &Corpus,
    valid: &Corpus,
    cfg: &TrainConfig,
    workers: &Workers,
    mut progress: impl FnMut(&EpochLog),
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let (train_set, skipped) = prepare_all(&model, train)?;
    let (valid_set, _) = prepare_all(&model, valid)?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(HahtError::EmptyCorpus);
    }
    let mut state = OptimizerState::new(
        &model.params,
        AdamaxConfig {
            lr: cfg.lr,
            ..AdamaxConfig::default()
        },
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = workers.map(batch, |&i| {
                let mut dropout = dropout_for(cfg, epoch, i);
                model.loss_with(&model.params, &train_set[i], &mut dropout)
            });
            let mut total = model.params.zeroed_gradients();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(HahtError::NonFiniteLoss {
                        epoch,
                        batch: b + 1,
                    });
                }
                batch_loss += loss;
                total.add_assign(&grads);
            }
            epoch_loss += batch_loss;
            model.params.accumulate(&total, 1.0 / batch.len() as f64);
            if let Some(max) = cfg.max_grad_norm {
                let norm = model.params.grad_norm();
                if norm > max {
                    model.params.scale_grads(max / norm);
                }
            }
            adamax_step(&mut model.params, &mut state)?;
        }
        let valid_loss = mean_loss(&model, &valid_set, workers)?;
        if !valid_loss.is_finite() {
            return Err(HahtError::NonFiniteLoss { epoch, batch: 0 });
        }
        let log = EpochLog {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            valid_loss,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        progress(&log);
        epochs.push(log);
        if stopper.observe(epoch, valid_loss, || model.params.clone()) {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    let (best_epoch, _, best) = stopper.into_best().expect("at least one epoch");
    model.params = best;
    model.params.zero_grad();
    Ok((
        model,
        TrainLog {
            epochs,
            best_epoch,
            stop_reason,
            skipped_examples: skipped,
        },
    ))
}

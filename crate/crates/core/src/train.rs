//! The training loop: shuffled mini-batches, filtered corruptions, entropy
//! weighted loss, Adam, periodic validation with early stopping.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, ParamStore};
use crate::eval::{evaluate, EvalError, EvalMode};
use crate::kgdata::{FilterIndex, KnowledgeGraph, Split};
use crate::model::{Model, ModelError, WeightSource};
use crate::optim::Adam;
use crate::sampling::{corrupt, positive_rng, EgnsConfig, SampleStats, SamplingError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Worker threads for evaluation.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 256,
            learning_rate: 1e-4,
            batch_size: 1024,
            max_epochs: 1000,
            eval_every: 25,
            patience: 10,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key: &str, v: String| Err(TrainError::Config(format!("{key} must be positive, got {v}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", self.learning_rate.to_string());
        }
        for (key, v) in [
            ("embedding_dim", self.embedding_dim),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return bad(key, v.to_string());
            }
        }
        if self.embedding_dim % 2 != 0 {
            return Err(TrainError::Config(format!(
                "embedding_dim must be even, got {}",
                self.embedding_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite value at epoch {epoch}, batch {batch}, in {block}")]
    NonFinite { epoch: usize, batch: usize, block: String },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Observer(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    pub stats: SampleStats,
    pub seconds: f64,
    pub valid_mrr: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} easy={} ambiguous={} hard={} mean_entropy={:.6} time={:.3}s",
            self.epoch, self.loss, self.stats.easy, self.stats.ambiguous, self.stats.hard, self.stats.mean_entropy, self.seconds
        )?;
        if let Some(m) = self.valid_mrr {
            write!(f, " valid_mrr={m:.6}")?;
        }
        Ok(())
    }
}

/// Hooks called by [`train`]. Both default to doing nothing.
pub trait TrainObserver {
    fn epoch(&mut self, _record: &EpochRecord) -> Result<(), TrainError> {
        Ok(())
    }
    /// Called when validation MRR improves, with the model at that point.
    fn improved(&mut self, _model: &Model, _optimizer: &Adam, _epoch: usize, _mrr: f64) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_mrr: Option<f64>,
    pub stopped_early: bool,
    /// Optimizer state matching the returned parameters.
    pub optimizer: Adam,
}

fn non_finite(epoch: usize, batch: usize, params: &ParamStore, fallback: &str) -> TrainError {
    TrainError::NonFinite {
        epoch,
        batch,
        block: params.first_non_finite().unwrap_or(fallback).to_string(),
    }
}

/// Trains `model` on the training split. When validation ran at least once,
/// the model is left at its best validation checkpoint.
pub fn train(
    kg: &KnowledgeGraph,
    model: &mut Model,
    cfg: &TrainConfig,
    egns: &EgnsConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    egns.validate()?;
    if model.dim() != cfg.embedding_dim {
        return Err(TrainError::Config(format!(
            "model dimension {} differs from embedding_dim {}",
            model.dim(),
            cfg.embedding_dim
        )));
    }
    if model.num_entities() != kg.num_entities() || model.num_relations() != kg.num_relations() {
        return Err(TrainError::Config(format!(
            "model covers {} entities / {} relations, the graph has {} / {}",
            model.num_entities(),
            model.num_relations(),
            kg.num_entities(),
            kg.num_relations()
        )));
    }
    for w in egns.warnings() {
        log::warn!("{w}");
    }

    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut outcome = TrainOutcome {
        log: Vec::new(),
        epochs_run: 0,
        best_epoch: None,
        best_mrr: None,
        stopped_early: false,
        optimizer: adam.clone(),
    };
    if cfg.max_epochs == 0 || kg.train.is_empty() {
        return Ok(outcome);
    }

    // Negatives are filtered against training facts only; evaluation facts
    // stay unseen during training.
    let train_filter = FilterIndex::from_triples(kg.train.iter().copied());
    let eval_filter = FilterIndex::build(kg);
    let mut order = kg.train.clone();
    let mut best: Option<(ParamStore, Adam)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let (mut loss_sum, mut batches) = (0.0f64, 0usize);
        let mut stats = SampleStats::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut negatives = Vec::with_capacity(batch.len() * egns.negatives_per_positive);
            for (i, &pos) in batch.iter().enumerate() {
                let mut rng = positive_rng(cfg.seed, epoch as u64, (b * cfg.batch_size + i) as u64);
                negatives.extend(corrupt(
                    pos,
                    egns.negatives_per_positive,
                    kg.num_entities(),
                    &train_filter,
                    &mut rng,
                )?);
            }
            model.params.zero_grad();
            let mut g = Graph::new();
            let out = match model.batch_loss(&mut g, batch, &negatives, egns, WeightSource::Batch, None) {
                Ok(out) => out,
                Err(ModelError::Autodiff(AutodiffError::NonFinite { op })) => {
                    return Err(non_finite(epoch, b, &model.params, op));
                }
                Err(e) => return Err(e.into()),
            };
            let loss = g.value(out.loss).item() as f64;
            if !loss.is_finite() {
                return Err(non_finite(epoch, b, &model.params, "loss"));
            }
            match g.backward(out.loss, &mut model.params) {
                Ok(()) => {}
                Err(AutodiffError::NonFinite { op }) => return Err(non_finite(epoch, b, &model.params, op)),
                Err(e) => return Err(ModelError::from(e).into()),
            }
            if let Some(block) = model.params.first_non_finite() {
                return Err(non_finite(epoch, b, &model.params, block));
            }
            adam.step(&mut model.params);
            for n in &out.negatives {
                stats.record(n.difficulty, n.entropy);
            }
            loss_sum += loss;
            batches += 1;
        }

        let mut record = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            stats,
            seconds: 0.0,
            valid_mrr: None,
        };
        outcome.epochs_run = epoch;
        let mut stop = false;
        if (epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs) && !kg.valid.is_empty() {
            let tables = model.scoring_tables()?;
            let report = evaluate(&tables, &kg.valid, Split::Valid, EvalMode::Filtered, &eval_filter, cfg.threads)?;
            let mrr = report.mrr();
            record.valid_mrr = Some(mrr);
            if outcome.best_mrr.is_none_or(|b| mrr > b) {
                outcome.best_mrr = Some(mrr);
                outcome.best_epoch = Some(epoch);
                since_best = 0;
                best = Some((model.params.clone(), adam.clone()));
                observer.improved(model, &adam, epoch, mrr)?;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stop = true;
                }
            }
        }
        record.seconds = start.elapsed().as_secs_f64();
        log::info!("{record}");
        observer.epoch(&record)?;
        outcome.log.push(record);
        if stop {
            outcome.stopped_early = true;
            break;
        }
    }

    match best {
        Some((params, best_adam)) => {
            model.copy_params_from(&params);
            outcome.optimizer = best_adam;
        }
        None => outcome.optimizer = adam,
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests;

use super::*;
use crate::checkpoint::Checkpoint;
use crate::kgdata::Triple;
use crate::model::ModelConfig;
use crate::synthetic::rotation_ring;

fn small_cfg(dim: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        embedding_dim: dim,
        learning_rate: 0.01,
        batch_size: 64,
        max_epochs: epochs,
        eval_every: 5,
        patience: 3,
        seed,
        threads: 1,
    }
}

fn egns(n: usize) -> EgnsConfig {
    EgnsConfig {
        negatives_per_positive: n,
        ..EgnsConfig::default()
    }
}

fn structure_model(kg: &KnowledgeGraph, dim: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        dim,
        ..ModelConfig::default()
    };
    Model::new(cfg, kg.num_entities(), kg.num_relations(), Vec::new(), seed).unwrap()
}

#[test]
fn zero_epochs_leaves_the_model_untouched() {
    let kg = rotation_ring(10, &[1], 0.0, 0.1, 0.1, 1);
    let mut model = structure_model(&kg, 8, 4);
    let before = model.params.clone();
    let out = train(&kg, &mut model, &small_cfg(8, 0, 1), &egns(4), &mut ()).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.epochs_run, 0);
    assert_eq!(model.params, before);
}

#[test]
fn single_triple_loss_decreases() {
    let kg = KnowledgeGraph::from_indexed(2, 1, vec![Triple::new(0, 0, 1)], Vec::new(), Vec::new());
    let mut model = structure_model(&kg, 8, 2);
    // Equal class weights: with the default λs the objective itself jumps
    // whenever a negative crosses an entropy threshold.
    let flat = EgnsConfig {
        lambda_easy: 1.0,
        lambda_amb: 1.0,
        lambda_hard: 1.0,
        ..egns(16)
    };
    let out = train(&kg, &mut model, &small_cfg(8, 200, 3), &flat, &mut ()).unwrap();
    assert_eq!(out.log.len(), 200);
    let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
    let smoothed: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, w) in smoothed.windows(2).enumerate() {
        assert!(w[1] < w[0], "smoothed loss rose at window {i}: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let kg = rotation_ring(12, &[1, 3], 0.0, 0.1, 0.1, 5);
    let run = || {
        let mut model = structure_model(&kg, 8, 9);
        let out = train(&kg, &mut model, &small_cfg(8, 12, 9), &egns(4), &mut ()).unwrap();
        Checkpoint::capture(&model, Some(&out.optimizer), out.epochs_run as u64, out.best_mrr.unwrap_or(0.0), "").to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn dimension_mismatch_is_rejected_before_training() {
    let kg = rotation_ring(6, &[1], 0.0, 0.0, 0.0, 1);
    let mut model = structure_model(&kg, 8, 1);
    let err = train(&kg, &mut model, &small_cfg(4, 3, 1), &egns(2), &mut ()).unwrap_err();
    assert!(matches!(err, TrainError::Config(_)), "{err}");
}

#[test]
fn invalid_settings_are_rejected() {
    for cfg in [
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { embedding_dim: 7, ..TrainConfig::default() },
        TrainConfig { patience: 0, ..TrainConfig::default() },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn non_finite_parameters_abort_with_a_diagnostic() {
    let kg = rotation_ring(6, &[1], 0.0, 0.0, 0.0, 1);
    let mut model = structure_model(&kg, 4, 1);
    let id = model.phase_block();
    model.params.get_mut(id).data_mut()[0] = f32::NAN;
    match train(&kg, &mut model, &small_cfg(4, 2, 1), &egns(2), &mut ()) {
        Err(TrainError::NonFinite { epoch, batch, block }) => {
            assert_eq!((epoch, batch), (1, 0));
            assert_eq!(block, "relation.phase");
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

struct Recorder {
    epochs: Vec<usize>,
    improvements: Vec<(usize, f64)>,
}

impl TrainObserver for Recorder {
    fn epoch(&mut self, record: &EpochRecord) -> Result<(), TrainError> {
        self.epochs.push(record.epoch);
        Ok(())
    }
    fn improved(&mut self, _: &Model, _: &Adam, epoch: usize, mrr: f64) -> Result<(), TrainError> {
        self.improvements.push((epoch, mrr));
        Ok(())
    }
}

#[test]
fn validation_tracks_the_best_epoch_and_restores_it() {
    let kg = rotation_ring(20, &[1, 4], 0.0, 0.15, 0.15, 2);
    let mut model = structure_model(&kg, 8, 3);
    let mut rec = Recorder { epochs: Vec::new(), improvements: Vec::new() };
    let cfg = small_cfg(8, 40, 3);
    let out = train(&kg, &mut model, &cfg, &egns(4), &mut rec).unwrap();
    assert_eq!(rec.epochs, (1..=out.epochs_run).collect::<Vec<_>>());
    let (best_epoch, best_mrr) = *rec.improvements.last().unwrap();
    assert_eq!(out.best_epoch, Some(best_epoch));
    assert_eq!(out.best_mrr, Some(best_mrr));
    for r in &out.log {
        assert_eq!(r.valid_mrr.is_some(), r.epoch % cfg.eval_every == 0 || r.epoch == out.epochs_run && !out.stopped_early);
        assert_eq!(r.stats.total(), kg.train.len() * 4);
    }
    // The returned model is the best one: re-evaluating reproduces its MRR.
    let tables = model.scoring_tables().unwrap();
    let report = evaluate(&tables, &kg.valid, Split::Valid, EvalMode::Filtered, &FilterIndex::build(&kg), 1).unwrap();
    assert_eq!(report.mrr(), best_mrr);
}

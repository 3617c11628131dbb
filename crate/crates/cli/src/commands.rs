use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mocme::checkpoint::Checkpoint;
use mocme::config::{parse_override_args, RunConfig};
use mocme::eval::{evaluate, top_k, EvalMode};
use mocme::kgdata::{load_graph, load_modality, FilterIndex, KnowledgeGraph, ModalityFeatureTable, Split};
use mocme::model::Model;
use mocme::optim::Adam;
use mocme::sampling::{self, draw_negatives, NegativeSample};
use mocme::train::{EpochRecord, TrainError, TrainObserver};

use crate::CliError;

/// Environment variable naming the directory that receives run directories.
pub const RUNS_DIR_ENV: &str = "MOCME_RUNS_DIR";

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| other(format!("cannot write {}: {e}", path.display())))
}

fn load_graph_only(cfg: &RunConfig) -> Result<KnowledgeGraph, CliError> {
    if cfg.kgdata.train.as_os_str().is_empty() {
        return Err(CliError::Config("kgdata.train is not set".into()));
    }
    Ok(load_graph(&cfg.kgdata.split_paths(), cfg.kgdata.allow_unseen)?)
}

fn load_data(cfg: &RunConfig) -> Result<(KnowledgeGraph, Vec<ModalityFeatureTable>), CliError> {
    let kg = load_graph_only(cfg)?;
    let mut tables = Vec::with_capacity(cfg.kgdata.modalities.len());
    for (name, path) in &cfg.kgdata.modalities {
        let table = load_modality(path, name, &kg)?;
        log::info!(
            "modality {name}: {} features for {}/{} entities",
            table.dim,
            table.present_count(),
            kg.num_entities()
        );
        tables.push(table);
    }
    Ok((kg, tables))
}

/// A checkpoint together with the data and model it was trained on.
struct Loaded {
    checkpoint: Checkpoint,
    config: RunConfig,
    kg: KnowledgeGraph,
    model: Model,
}

fn open_checkpoint(path: &Path) -> Result<Loaded, CliError> {
    let checkpoint = Checkpoint::load(path)?;
    let config = RunConfig::from_toml(&checkpoint.run_config, None, &[])?;
    let (kg, tables) = load_data(&config)?;
    let mut model = Model::new(
        checkpoint.model_config.clone(),
        kg.num_entities(),
        kg.num_relations(),
        tables,
        config.trainer.seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    checkpoint.restore(&mut model)?;
    Ok(Loaded {
        checkpoint,
        config,
        kg,
        model,
    })
}

fn create_run_dir(seed: u64) -> Result<PathBuf, CliError> {
    let root = std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{seed}");
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = root.join(format!("{base}-{n}"));
    }
    std::fs::create_dir_all(&dir).map_err(|e| other(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Writes the epoch log and keeps `best.ckpt` current.
struct RunObserver {
    dir: PathBuf,
    log: BufWriter<File>,
    run_config: String,
}

impl TrainObserver for RunObserver {
    fn epoch(&mut self, record: &EpochRecord) -> Result<(), TrainError> {
        writeln!(self.log, "{record}")
            .and_then(|()| self.log.flush())
            .map_err(|e| TrainError::Observer(format!("cannot write the training log: {e}")))
    }

    fn improved(&mut self, model: &Model, optimizer: &Adam, epoch: usize, mrr: f64) -> Result<(), TrainError> {
        Checkpoint::capture(model, Some(optimizer), epoch as u64, mrr, &self.run_config)
            .save(&self.dir.join("best.ckpt"))
            .map_err(|e| TrainError::Observer(e.to_string()))
    }
}

pub fn train(config: &Path, overrides: &[String]) -> Result<(), CliError> {
    let overrides = parse_override_args(overrides)?;
    let cfg = RunConfig::load(config, &overrides)?;
    let dir = create_run_dir(cfg.trainer.seed)?;
    let echo = cfg.to_toml();
    write_file(&dir.join("config.toml"), &echo)?;
    log::info!("run directory {}", dir.display());

    let (kg, tables) = load_data(&cfg)?;
    log::info!(
        "{} entities, {} relations, {}/{}/{} train/valid/test triples",
        kg.num_entities(),
        kg.num_relations(),
        kg.train.len(),
        kg.valid.len(),
        kg.test.len()
    );
    let mut model = Model::new(cfg.model_config(), kg.num_entities(), kg.num_relations(), tables, cfg.trainer.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let log_path = dir.join("train.log");
    let log_file = File::create(&log_path).map_err(|e| other(format!("cannot create {}: {e}", log_path.display())))?;
    let mut observer = RunObserver {
        dir: dir.clone(),
        log: BufWriter::new(log_file),
        run_config: echo.clone(),
    };
    let outcome = mocme::train::train(&kg, &mut model, &cfg.trainer, &cfg.sampling, &mut observer).map_err(|e| match e {
        TrainError::Config(_) => CliError::Config(e.to_string()),
        _ => other(e),
    })?;
    if outcome.stopped_early {
        log::info!("stopped early after epoch {}", outcome.epochs_run);
    }

    let epoch = outcome.best_epoch.unwrap_or(outcome.epochs_run) as u64;
    Checkpoint::capture(&model, Some(&outcome.optimizer), epoch, outcome.best_mrr.unwrap_or(0.0), &echo)
        .save(&dir.join("model.ckpt"))?;

    if kg.test.is_empty() {
        log::warn!("the test split is empty; no final evaluation");
        return Ok(());
    }
    let scorer = model.scoring_tables().map_err(other)?;
    let report = evaluate(&scorer, &kg.test, Split::Test, EvalMode::Filtered, &FilterIndex::build(&kg), cfg.trainer.threads)
        .map_err(other)?;
    log::info!("{report}");
    let json = report.to_json();
    write_file(&dir.join("eval.json"), &format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}

pub fn eval(checkpoint: &Path, split: Split, mode: EvalMode, threads: usize) -> Result<(), CliError> {
    let loaded = open_checkpoint(checkpoint)?;
    let scorer = loaded.model.scoring_tables().map_err(other)?;
    let triples = loaded.kg.split(split);
    let report = evaluate(&scorer, triples, split, mode, &FilterIndex::build(&loaded.kg), threads)
        .map_err(|e| CliError::Data(e.to_string()))?;
    log::info!("{report}");
    println!("{}", report.to_json());
    Ok(())
}

enum Query {
    Tail { head: usize, relation: usize },
    Head { relation: usize, tail: usize },
}

fn parse_query(query: &str, kg: &KnowledgeGraph) -> Result<Query, CliError> {
    let parts: Vec<&str> = query.split(',').map(str::trim).collect();
    let [h, r, t] = parts[..] else {
        return Err(CliError::Config(format!("query '{query}' must have the form head,relation,? or ?,relation,tail")));
    };
    let entity = |name: &str| {
        kg.entities
            .get(name)
            .ok_or_else(|| CliError::Config(format!("unknown entity '{name}'")))
    };
    let relation = kg
        .relations
        .get(r)
        .ok_or_else(|| CliError::Config(format!("unknown relation '{r}'")))?;
    match (h, t) {
        (h, "?") if h != "?" => Ok(Query::Tail { head: entity(h)?, relation }),
        ("?", t) if t != "?" => Ok(Query::Head { relation, tail: entity(t)? }),
        _ => Err(CliError::Config(format!("query '{query}' must have exactly one '?' as head or tail"))),
    }
}

pub fn predict(checkpoint: &Path, query: &str, k: usize) -> Result<(), CliError> {
    let loaded = open_checkpoint(checkpoint)?;
    let kg = &loaded.kg;
    let query = parse_query(query, kg)?;
    let scorer = loaded.model.scoring_tables().map_err(other)?;
    let scores = match query {
        Query::Tail { head, relation } => scorer.score_tails(head, relation),
        Query::Head { relation, tail } => scorer.score_heads(relation, tail),
    };
    let n = kg.num_entities();
    if k > n {
        eprintln!("warning: k = {k} exceeds the {n} entities; showing all {n}");
    }
    let mut out = std::io::stdout().lock();
    for (rank, e, score) in top_k(&scores, k.min(n)) {
        writeln!(out, "{rank}, {}, {score}", kg.entities.name(e)).map_err(other)?;
    }
    Ok(())
}

pub fn sample_stats(checkpoint: &Path, n: usize, overrides: &[String]) -> Result<(), CliError> {
    let loaded = open_checkpoint(checkpoint)?;
    let cfg = if overrides.is_empty() {
        loaded.config
    } else {
        RunConfig::from_toml(&loaded.checkpoint.run_config, None, &parse_override_args(overrides)?)?
    };
    let egns = &cfg.sampling;
    for w in egns.warnings() {
        eprintln!("warning: {w}");
    }
    let kg = &loaded.kg;
    let scorer = loaded.model.scoring_tables().map_err(other)?;
    let drawn = draw_negatives(&kg.train, n, kg.num_entities(), &FilterIndex::build(kg), cfg.trainer.seed)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let negatives: Vec<NegativeSample> = drawn
        .into_iter()
        .map(|(t, side)| NegativeSample::annotate(t, side, scorer.score(t), egns))
        .collect();
    let stats = sampling::sample_stats(&negatives);
    println!("negatives: {}", stats.total());
    println!("easy: {}", stats.easy);
    println!("ambiguous: {}", stats.ambiguous);
    println!("hard: {}", stats.hard);
    println!("mean_entropy: {:.6}", stats.mean_entropy);
    println!("delta1: {}", egns.delta1);
    println!("delta2: {}", egns.delta2);
    println!("log_base: {}", egns.log_base);
    Ok(())
}

pub fn vocab_dump(config: Option<&Path>, checkpoint: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = match (config, checkpoint) {
        (Some(path), _) => RunConfig::load(path, &[])?,
        (None, Some(path)) => RunConfig::from_toml(&Checkpoint::load(path)?.run_config, None, &[])?,
        (None, None) => return Err(CliError::Config("pass --config or --checkpoint".into())),
    };
    let kg = load_graph_only(&cfg)?;
    kg.dump_vocab(out)
        .map_err(|e| other(format!("cannot write vocabularies to {}: {e}", out.display())))?;
    println!("{}", out.join("entities.tsv").display());
    println!("{}", out.join("relations.tsv").display());
    Ok(())
}

//! Command-line surface: `stats`, `train`, `eval` and `predict`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::dataset::{dataset_statistics, default_data_root, Dataset, Quadruple, Split};
use crate::error::{AmcenError, Result};
use crate::evaluation::{
    evaluate_scored, infer, score_split, write_metrics_json, write_rank_csv, Direction, MaskPolicy,
    MetricsReport, RankMode,
};
use crate::model::{Model, ModelShape, QueryBatch, Rollout};
use crate::scalar::Scalar;
use crate::training::{stage1_train, stage2_train, JsonLines};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "amcen",
    version,
    about = "Temporal knowledge graph extrapolation with event-type masking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset sizes and new-event proportions.
    Stats(StatsArgs),
    /// Stage 1 (encoders and decoder), stage 2 (classifier), or both.
    Train(TrainArgs),
    /// Rank every query of a split and report MRR and Hits@k.
    Eval(EvalArgs),
    /// Top-k candidates for one query.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Dataset directory, or a name under $AMCEN_DATA_DIR.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Configuration override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Raw time units per timestamp.
    #[arg(long)]
    pub granularity: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Dataset directory (overrides --dataset).
    pub path: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "all")]
    pub stage: StageArg,
    /// Stage-1 checkpoint for `--stage 2` (default: <out>/stage1.ckpt).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Load a checkpoint even if its fingerprint differs from the configuration.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Raw,
    Filtered,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to evaluate (default: <out>/stage2.ckpt).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "raw")]
    pub mode: ModeArg,
    /// Load the checkpoint even if its fingerprint differs from the configuration.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Obj,
    Subj,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `entity,relation,time` with a time index; for `subj` the entity is the known object.
    #[arg(long)]
    pub query: String,
    #[arg(long, value_enum, default_value = "obj")]
    pub direction: DirectionArg,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Load the checkpoint even if its fingerprint differs from the configuration.
    #[arg(long)]
    pub force: bool,
}

/// Process exit code for an error.
pub fn exit_code(err: &AmcenError) -> i32 {
    match err {
        AmcenError::Config(_) => EXIT_USAGE,
        AmcenError::Checkpoint(_) | AmcenError::Fingerprint { .. } => EXIT_CHECKPOINT,
        AmcenError::Parse { .. }
        | AmcenError::Validation(_)
        | AmcenError::IdOutOfRange { .. }
        | AmcenError::Sequencing { .. }
        | AmcenError::Stale { .. }
        | AmcenError::Io(_)
        | AmcenError::Csv(_)
        | AmcenError::Json(_) => EXIT_DATA,
        _ => 1,
    }
}

/// Resolves the configuration: file, then explicit flags, then `--set` overrides.
fn run_config(common: &Common, positional: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = positional.or(common.dataset.as_deref()) {
        cfg.dataset = d.to_path_buf();
    }
    if let Some(g) = common.granularity {
        cfg.granularity = g;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.train.validate()?;
    if cfg.granularity == 0 {
        return Err(AmcenError::Config("granularity must be positive".into()));
    }
    cfg.dataset = resolve_dataset(&cfg.dataset)?;
    Ok(cfg)
}

fn resolve_dataset(path: &Path) -> Result<PathBuf> {
    if path.as_os_str().is_empty() {
        return Err(AmcenError::Config(
            "no dataset given (use --dataset or set AMCEN_DATA_DIR)".into(),
        ));
    }
    if path.is_dir() {
        return Ok(path.to_path_buf());
    }
    if let Some(root) = default_data_root() {
        let joined = root.join(path);
        if joined.is_dir() {
            return Ok(joined);
        }
    }
    Err(AmcenError::Config(format!(
        "dataset directory {} does not exist",
        path.display()
    )))
}

fn init_workers(n: usize) {
    if n > 0 {
        // a second initialisation in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    dataset: String,
    dataset_hash: String,
    precision: &'a str,
    config: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn write_manifest(
    cfg: &RunConfig,
    ds: &Dataset,
    command: &str,
    precision: &str,
    outputs: &[PathBuf],
) -> Result<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        dataset: cfg.dataset.display().to_string(),
        dataset_hash: ds.content_hash(),
        precision,
        config: cfg.as_map(),
        outputs: outputs
            .iter()
            .map(|p| {
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            })
            .collect(),
    };
    let path = cfg.out.join(format!("manifest_{command}.json"));
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Runs a parsed command line; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats(a) => cmd_stats(&a),
        Command::Train(a) => match a.common.precision {
            Precision::F32 => cmd_train::<f32>(&a),
            Precision::F64 => cmd_train::<f64>(&a),
        },
        Command::Eval(a) => match a.common.precision {
            Precision::F32 => cmd_eval::<f32>(&a),
            Precision::F64 => cmd_eval::<f64>(&a),
        },
        Command::Predict(a) => match a.common.precision {
            Precision::F32 => cmd_predict::<f32>(&a),
            Precision::F64 => cmd_predict::<f64>(&a),
        },
    }
}

pub fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let cfg = run_config(&args.common, args.path.as_deref())?;
    init_workers(cfg.workers);
    let ds = Dataset::load_dir(&cfg.dataset, cfg.granularity)?;
    let report = dataset_statistics(&ds.base_snapshots(), ds.vocab.base_relation_count);
    let b = ds.boundaries();
    println!("dataset     {}", ds.name);
    println!("entities    {}", ds.vocab.entity_count);
    println!("relations   {}", ds.vocab.base_relation_count);
    println!("timestamps  {}", ds.vocab.time_count);
    println!(
        "train/valid/test  {}/{}/{}",
        ds.train.len(),
        ds.valid.len(),
        ds.test.len()
    );
    println!(
        "valid starts at t={}, test at t={}",
        b.valid_start, b.test_start
    );
    for name in ["train", "valid", "test", "all"] {
        let Some(s) = report.splits.get(name) else {
            continue;
        };
        println!(
            "{name:<6} events {:>9}  new {:>9}  proportion {:.2}%",
            s.events,
            s.new_events,
            100.0 * s.proportion
        );
    }
    std::fs::create_dir_all(&cfg.out)?;
    let outputs = [
        cfg.out.join("stats.json"),
        cfg.out.join("stats_splits.csv"),
        cfg.out.join("stats_timestamps.csv"),
    ];
    let json = serde_json::json!({
        "dataset": ds.name,
        "entities": ds.vocab.entity_count,
        "relations": ds.vocab.base_relation_count,
        "timestamps": ds.vocab.time_count,
        "train": ds.train.len(),
        "valid": ds.valid.len(),
        "test": ds.test.len(),
        "splits": serde_json::from_str::<serde_json::Value>(&report.to_json()?)?,
    });
    std::fs::write(&outputs[0], serde_json::to_string_pretty(&json)?)?;
    report.write_split_csv(&outputs[1])?;
    report.write_timestamp_csv(&outputs[2])?;
    write_manifest(&cfg, &ds, "stats", "n/a", &outputs)?;
    Ok(())
}

fn shape_of(ds: &Dataset) -> ModelShape {
    ModelShape {
        entity_count: ds.vocab.entity_count,
        base_relation_count: ds.vocab.base_relation_count,
        time_count: ds.boundaries().valid_start.max(1),
    }
}

fn load_model<T: Scalar>(path: &Path, expected: &str, force: bool) -> Result<Model<T>> {
    let (mut model, header) = load_checkpoint::<T>(path, Some(expected), force)?;
    log::info!(
        "loaded stage-{} checkpoint {} (epoch {})",
        header.stage,
        path.display(),
        header.epoch
    );
    // evaluation-time switches follow the current configuration
    model.config.batch_size = model.config.batch_size.max(1);
    Ok(model)
}

pub fn cmd_train<T: Scalar>(args: &TrainArgs) -> Result<()> {
    let cfg = run_config(&args.common, None)?;
    init_workers(cfg.workers);
    let ds = Dataset::load_dir(&cfg.dataset, cfg.granularity)?;
    std::fs::create_dir_all(&cfg.out)?;
    let shape = shape_of(&ds);
    let log_path = cfg.out.join("train_log.jsonl");
    let mut sink = JsonLines(std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?,
    ));
    std::fs::write(cfg.out.join("config.ini"), cfg.to_ini_string())?;
    let mut outputs = vec![log_path, cfg.out.join("config.ini")];

    let stage1_path = cfg.out.join("stage1.ckpt");
    let mut model = if args.stage == StageArg::Two {
        let expected = cfg.train.architecture_fingerprint(
            shape.entity_count,
            shape.base_relation_count,
            shape.time_count,
        );
        let path = args
            .checkpoint
            .clone()
            .unwrap_or_else(|| stage1_path.clone());
        let mut m = load_model::<T>(&path, &expected, args.force)?;
        m.config = cfg.train.clone();
        m
    } else {
        let mut m = Model::<T>::new(cfg.train.clone(), shape)?;
        let outcome = stage1_train(&mut m, &ds, &mut sink)?;
        let mut metrics = BTreeMap::new();
        if let Some(mrr) = outcome.best_val_mrr {
            metrics.insert("val_mrr".into(), mrr);
        }
        if let Some(last) = outcome.log.last() {
            metrics.insert("loss".into(), last.loss);
        }
        save_checkpoint(
            &stage1_path,
            &m,
            &CheckpointMeta {
                stage: 1,
                epoch: outcome.best_epoch,
                metrics,
            },
        )?;
        println!(
            "stage 1 done: kept epoch {} (val MRR {:?})",
            outcome.best_epoch, outcome.best_val_mrr
        );
        outputs.push(stage1_path.clone());
        m
    };
    if args.stage != StageArg::One {
        let outcome = stage2_train(&mut model, &ds, &mut sink)?;
        let mut metrics = BTreeMap::new();
        if let Some(mrr) = outcome.best_val_mrr {
            metrics.insert("val_mrr".into(), mrr);
        }
        let path = cfg.out.join("stage2.ckpt");
        save_checkpoint(
            &path,
            &model,
            &CheckpointMeta {
                stage: 2,
                epoch: outcome.best_epoch,
                metrics,
            },
        )?;
        println!(
            "stage 2 done: kept epoch {} (val MRR {:?})",
            outcome.best_epoch, outcome.best_val_mrr
        );
        outputs.push(path);
    }
    write_manifest(&cfg, &ds, "train", T::NAME, &outputs)
}

/// Loads the dataset and a checkpoint, with ablation switches taken from the current config.
fn prepare<T: Scalar>(
    common: &Common,
    checkpoint: &Option<PathBuf>,
    force: bool,
) -> Result<(RunConfig, Dataset, Model<T>)> {
    let cfg = run_config(common, None)?;
    init_workers(cfg.workers);
    let ds = Dataset::load_dir(&cfg.dataset, cfg.granularity)?;
    let shape = shape_of(&ds);
    let expected = cfg.train.architecture_fingerprint(
        shape.entity_count,
        shape.base_relation_count,
        shape.time_count,
    );
    let path = checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("stage2.ckpt"));
    let mut model = load_model::<T>(&path, &expected, force)?;
    if model.shape != shape {
        return Err(AmcenError::Checkpoint(format!(
            "checkpoint was trained on a dataset of shape {:?}, this one has {:?}",
            model.shape, shape
        )));
    }
    model.config.ablation = cfg.train.ablation;
    model.config.batch_size = cfg.train.batch_size;
    Ok((cfg, ds, model))
}

pub fn cmd_eval<T: Scalar>(args: &EvalArgs) -> Result<()> {
    let (cfg, ds, model) = prepare::<T>(&args.common, &args.checkpoint, args.force)?;
    let split: Split = args.split.into();
    let mode = match args.mode {
        ModeArg::Raw => RankMode::Raw,
        ModeArg::Filtered => RankMode::Filtered,
    };
    let seq = ds.augmented_snapshots();
    let scored = score_split(&model, &seq, &ds.vocab, split)?;
    let (results, report) = evaluate_scored(
        &scored,
        MaskPolicy::from_ablation(&model.config.ablation),
        None,
    );
    let rows = MetricsReport {
        rows: report
            .rows
            .iter()
            .filter(|r| r.mode == mode)
            .copied()
            .collect(),
    };
    for r in &rows.rows {
        println!(
            "{} {:<4} MRR {:.4}  Hits@1 {:.4}  Hits@3 {:.4}  Hits@10 {:.4}  classifier acc {:.4}  ({} queries)",
            r.mode, r.direction, r.mrr, r.hits1, r.hits3, r.hits10, r.classifier_accuracy, r.queries
        );
    }
    std::fs::create_dir_all(&cfg.out)?;
    let metrics_path = cfg
        .out
        .join(format!("metrics_{}_{}.json", split.name(), mode));
    let ranks_path = cfg.out.join(format!("ranks_{}.csv", split.name()));
    write_metrics_json(&metrics_path, &rows)?;
    write_rank_csv(&ranks_path, &results)?;
    write_manifest(&cfg, &ds, "eval", T::NAME, &[metrics_path, ranks_path])
}

/// Parses `entity,relation,time`.
pub fn parse_query(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || AmcenError::Config(format!("query {s:?} is not entity,relation,time"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
    Ok((n(0)?, n(1)?, n(2)?))
}

/// Ranked candidates for one query, as printed by `predict`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub candidates: Vec<(usize, f64)>,
    pub recurrence: f64,
    pub predicted_recurring: bool,
}

/// Scores `(entity, relation, ?, time)` after absorbing all facts before `time`.
pub fn predict_query<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    entity: usize,
    relation: usize,
    time: usize,
    direction: Direction,
    top_k: usize,
) -> Result<Prediction> {
    let v = &ds.vocab;
    if entity >= v.entity_count {
        return Err(AmcenError::IdOutOfRange {
            kind: "entity",
            id: entity,
            limit: v.entity_count,
        });
    }
    if relation >= v.base_relation_count {
        return Err(AmcenError::IdOutOfRange {
            kind: "relation",
            id: relation,
            limit: v.base_relation_count,
        });
    }
    let seq = ds.augmented_snapshots();
    if time > seq.len() {
        return Err(AmcenError::Validation(format!(
            "time {time} is beyond the known horizon {}",
            seq.len()
        )));
    }
    let rel = match direction {
        Direction::Object => relation,
        Direction::Subject => v.inverse_relation(relation),
    };
    let mut roll = Rollout::new(model.shape.entity_count, model.config.window);
    roll.skip_to(model, &seq, time)?;
    let (xe, xr) = model.encode_time(roll.prev_graph(&seq).as_ref(), roll.state())?;
    // the object slot is a placeholder; only the label depends on it
    let batch = QueryBatch::build(&[Quadruple::new(entity, rel, 0, time)], roll.index(), time)?;
    let scores = model.score_queries(&xe, &xr, &batch)?;
    let freq = batch.dense_frequency(0, model.shape.entity_count);
    let policy = match MaskPolicy::from_ablation(&model.config.ablation) {
        // no ground truth is known for a free-form query
        MaskPolicy::GroundTruth => MaskPolicy::Predicted,
        p => p,
    };
    let inf = infer(
        scores.logits.row(0),
        &freq,
        scores.recurrence[0],
        policy,
        None,
        &model.config.ablation,
    )?;
    let mut order: Vec<usize> = (0..inf.distribution.probabilities.len()).collect();
    let p = &inf.distribution.probabilities;
    order.sort_by(|&a, &b| {
        p[b].partial_cmp(&p[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(Prediction {
        candidates: order
            .into_iter()
            .take(top_k)
            .map(|o| (o, p[o].to_f64_lossy()))
            .collect(),
        recurrence: inf.recurrence.to_f64_lossy(),
        predicted_recurring: inf.predicted_recurring,
    })
}

pub fn cmd_predict<T: Scalar>(args: &PredictArgs) -> Result<()> {
    let (_, ds, model) = prepare::<T>(&args.common, &args.checkpoint, args.force)?;
    let (entity, relation, time) = parse_query(&args.query)?;
    let direction = match args.direction {
        DirectionArg::Obj => Direction::Object,
        DirectionArg::Subj => Direction::Subject,
    };
    let pred = predict_query(&model, &ds, entity, relation, time, direction, args.top_k)?;
    println!(
        "event type: {} (p_recurring = {:.4})",
        if pred.predicted_recurring {
            "recurring"
        } else {
            "new"
        },
        pred.recurrence
    );
    let names = ds.vocab.entity_names.as_ref();
    for (rank, (o, p)) in pred.candidates.iter().enumerate() {
        let name = names
            .and_then(|n| n.get(*o))
            .map(String::as_str)
            .unwrap_or("");
        println!("{:>3}. {o:>7} {p:.6} {name}", rank + 1);
    }
    Ok(())
}

//! Per-seed training runs and the `train` command.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tabdeco_core::data::synthetic::{generate, LABEL};
use tabdeco_core::data::{parse_schema_hint, prepare, Encoder, NormStats, RawTable, SchemaHint};
use tabdeco_core::model::HeadPooling;
use tabdeco_core::training::checkpoint::encode_checkpoint;
use tabdeco_core::training::{evaluate, train, Checkpoint, EpochRecord};
use tabdeco_core::{InputLayout, LossSpec, Metric, ModelConfig, TabDeco, TrainConfig, Variant};

use crate::config::{DataConfig, DataSource, RunConfig};
use crate::error::{CliError, Result};

/// A loaded table and the typing hints for it.
#[derive(Clone, Debug)]
pub struct Table {
    pub raw: RawTable,
    pub hint: SchemaHint,
}

fn data_err(msg: impl Into<String>) -> CliError {
    CliError::Core(tabdeco_core::Error::Data(msg.into()))
}

/// Reads (or generates) the table and merges the schema file with the
/// `[data]` overrides.
pub fn load_table(cfg: &DataConfig) -> Result<Table> {
    match &cfg.source {
        DataSource::Synthetic { rows, seed, rule } => Ok(Table {
            raw: generate(*rows, *seed, (*rule).into())?,
            hint: SchemaHint::with_label(LABEL),
        }),
        DataSource::Csv { path, schema } => {
            if !path.is_file() {
                return Err(data_err(format!("dataset file {} not found", path.display())));
            }
            let mut hint = match schema {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                    parse_schema_hint(&text)?
                }
                None => SchemaHint::default(),
            };
            if let Some(label) = &cfg.label {
                match &hint.label {
                    Some(l) if l != label => {
                        return Err(CliError::Config(format!(
                            "[data] label `{label}` conflicts with schema label `{l}`"
                        )))
                    }
                    _ => hint.label = Some(label.clone()),
                }
            }
            if cfg.task.is_some() {
                hint.task = cfg.task;
            }
            if cfg.positive_label.is_some() {
                hint.positive_label.clone_from(&cfg.positive_label);
            }
            if hint.label.is_none() {
                return Err(CliError::Config(
                    "no label column: set [data] label or mark one in the schema file".into(),
                ));
            }
            Ok(Table {
                raw: RawTable::read_csv(path)?,
                hint,
            })
        }
    }
}

/// Every setting that influenced one run.
#[derive(Clone, Debug, Serialize)]
pub struct ConfigEcho {
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Pooling the head actually used after resolving `auto`.
    pub head_pooling_applied: HeadPooling,
    pub train: TrainConfig,
}

/// One (configuration, seed) run.
#[derive(Clone, Debug, Serialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub variant: Variant,
    pub schemes: String,
    pub seed: u64,
    pub metric: Metric,
    pub test_metric: f64,
    pub best_val_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_clock_seconds: f64,
    pub config: ConfigEcho,
}

/// Caller data stored in checkpoints written by `train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointExtra {
    pub dataset: String,
    pub encoder: Encoder,
    pub norm: NormStats,
    pub batch_size: usize,
    pub metric: Metric,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub record: ResultRecord,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Vec<u8>,
}

/// One training run: split by `seed`, fit the preprocessing on the
/// training rows, train with validation-based selection, score the test rows.
pub fn run_seed(
    data: &DataConfig,
    table: &Table,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    schemes_label: &str,
    seed: u64,
) -> Result<SeedRun> {
    let start = Instant::now();
    let prepared = prepare(&table.raw, &table.hint, data.fractions, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let model = TabDeco::new(model_cfg.clone(), InputLayout::for_dataset(&prepared.train))?;
    let outcome = train(&model, &train_cfg, &prepared.train, &prepared.val)?;
    let test = evaluate(
        &model,
        &outcome.params,
        &prepared.test,
        train_cfg.batch_size,
        Some(outcome.metric),
    )?;
    let extra = CheckpointExtra {
        dataset: data.name.clone(),
        encoder: prepared.encoder.clone(),
        norm: prepared.norm.clone(),
        batch_size: train_cfg.batch_size,
        metric: outcome.metric,
    };
    let checkpoint = encode_checkpoint(&Checkpoint {
        model: model.clone(),
        params: outcome.params,
        extra: serde_json::to_value(&extra).expect("checkpoint extra serializes"),
    })?;
    let record = ResultRecord {
        dataset: data.name.clone(),
        variant: model_cfg.variant,
        schemes: schemes_label.to_owned(),
        seed,
        metric: outcome.metric,
        test_metric: test.value,
        best_val_metric: outcome.best_val_metric,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        config: ConfigEcho {
            data: data.clone(),
            model: model_cfg.clone(),
            head_pooling_applied: model_cfg.resolved_pooling(),
            train: train_cfg,
        },
    };
    Ok(SeedRun {
        record,
        history: outcome.history,
        checkpoint,
    })
}

/// Worker count from `TABDECO_THREADS`; unset means 1.
pub fn thread_count() -> Result<usize> {
    match std::env::var("TABDECO_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!(
                "TABDECO_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

/// Runs `f` over `jobs` on a pool of [`thread_count`] workers. Results come
/// back in job order; the first error in that order wins.
pub fn run_jobs<J: Sync, T: Send>(jobs: &[J], f: impl Fn(&J) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| jobs.par_iter().map(&f).collect());
    results.into_iter().collect()
}

/// Fails if any target exists and `overwrite` is off.
pub fn check_outputs(paths: &[PathBuf], overwrite: bool) -> Result<()> {
    if overwrite {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::OutputExists(p.clone())),
        None => Ok(()),
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn history_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("history_seed{seed}.json"))
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("model_seed{seed}.ckpt"))
}

/// `train`: one run per seed, then results, histories and checkpoints.
pub fn cmd_train(cfg: &RunConfig, overwrite: bool) -> Result<Vec<ResultRecord>> {
    let dir = &cfg.output_dir;
    let mut targets = vec![dir.join("results.json")];
    for &s in &cfg.seeds {
        targets.push(history_path(dir, s));
        targets.push(checkpoint_path(dir, s));
    }
    check_outputs(&targets, overwrite)?;
    let table = load_table(&cfg.data)?;
    let runs = run_jobs(&cfg.seeds, |&seed| {
        let run = run_seed(&cfg.data, &table, &cfg.model, &cfg.train, &cfg.schemes_label, seed)?;
        let r = &run.record;
        println!(
            "seed {seed}: test {} {:.4} (best val {:.4} at epoch {}, {} epochs, {:.1}s)",
            r.metric.as_str(),
            r.test_metric,
            r.best_val_metric,
            r.best_epoch,
            r.epochs_run,
            r.wall_clock_seconds
        );
        Ok(run)
    })?;

    for run in &runs {
        write_json(&history_path(dir, run.record.seed), &run.history)?;
        write_file(&checkpoint_path(dir, run.record.seed), &run.checkpoint)?;
    }
    let records: Vec<ResultRecord> = runs.into_iter().map(|r| r.record).collect();
    write_json(&dir.join("results.json"), &records)?;

    let values: Vec<f64> = records.iter().map(|r| r.test_metric).collect();
    let (mean, std) = mean_std(&values);
    let first = &records[0];
    println!(
        "{} {} {}: test {} {mean:.4} ± {std:.4} over {} seed(s)",
        first.dataset,
        first.variant.as_str(),
        first.schemes,
        first.metric.as_str(),
        records.len()
    );
    Ok(records)
}

/// Loss spec with the scheme set replaced.
pub fn with_schemes(loss: &LossSpec, schemes: std::collections::BTreeSet<tabdeco_core::Scheme>) -> LossSpec {
    LossSpec {
        schemes,
        ..loss.clone()
    }
}

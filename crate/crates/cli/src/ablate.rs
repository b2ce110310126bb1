//! The loss-combination ablation grid.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;
use tabdeco_core::losses::parse_schemes;
use tabdeco_core::{Metric, ModelConfig, Scheme, Variant};

use crate::config::RunConfig;
use crate::error::Result;
use crate::run::{
    check_outputs, load_table, mean_std, run_jobs, run_seed, with_schemes, write_file, write_json, ResultRecord,
};

/// Scheme combinations in report order; `none` is the supervised baseline.
pub const GRID: [&str; 13] = [
    "none", "f", "s", "f+s", "fs", "sf", "fs+sf", "all", "gg", "fs+gg", "sf+gg", "all+gg", "sf+fs+gg",
];

pub const BASELINE: &str = "none";

pub fn grid_schemes() -> Vec<(&'static str, BTreeSet<Scheme>)> {
    GRID.iter()
        .map(|&label| (label, parse_schemes(label).expect("grid labels parse")))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Cell {
    pub schemes: String,
    pub mean_test_metric: f64,
    pub std_test_metric: f64,
    pub n_seeds: usize,
}

/// One dataset × variant row of the ablation table.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub dataset: String,
    pub variant: Variant,
    pub metric: Metric,
    pub baseline: f64,
    pub cells: Vec<Cell>,
    /// Non-baseline combinations whose mean improves on the baseline mean.
    pub counts_beating_baseline: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub grid: Vec<String>,
    pub rows: Vec<AblationRow>,
}

pub fn summarize(records: &[ResultRecord], seeds: &[u64]) -> AblationReport {
    let mut rows = Vec::new();
    let mut keys: Vec<(String, Variant)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(d, v)| *d == r.dataset && *v == r.variant) {
            keys.push((r.dataset.clone(), r.variant));
        }
    }
    for (dataset, variant) in keys {
        let of = |label: &str| -> Vec<&ResultRecord> {
            records
                .iter()
                .filter(|r| r.dataset == dataset && r.variant == variant && r.schemes == label)
                .collect()
        };
        let metric = of(GRID[0]).first().map_or(Metric::Auroc, |r| r.metric);
        let cells: Vec<Cell> = GRID
            .iter()
            .filter_map(|&label| {
                let values: Vec<f64> = of(label).iter().map(|r| r.test_metric).collect();
                (!values.is_empty()).then(|| {
                    let (mean, std) = mean_std(&values);
                    Cell {
                        schemes: label.to_owned(),
                        mean_test_metric: mean,
                        std_test_metric: std,
                        n_seeds: values.len(),
                    }
                })
            })
            .collect();
        let baseline = cells
            .iter()
            .find(|c| c.schemes == BASELINE)
            .map_or(f64::NAN, |c| c.mean_test_metric);
        let counts_beating_baseline = cells
            .iter()
            .filter(|c| c.schemes != BASELINE && metric.improves(c.mean_test_metric, baseline))
            .count();
        rows.push(AblationRow {
            dataset,
            variant,
            metric,
            baseline,
            cells,
            counts_beating_baseline,
        });
    }
    AblationReport {
        seeds: seeds.to_vec(),
        grid: GRID.iter().map(|s| s.to_string()).collect(),
        rows,
    }
}

pub fn csv_table(records: &[ResultRecord]) -> String {
    let mut out = String::from("dataset,variant,schemes,seed,test_metric\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.dataset,
            r.variant.as_str(),
            r.schemes,
            r.seed,
            r.test_metric
        )
        .expect("writing to a string");
    }
    out
}

/// `ablate`: every variant × grid combination × seed.
pub fn cmd_ablate(cfg: &RunConfig, overwrite: bool) -> Result<AblationReport> {
    let dir = &cfg.output_dir;
    check_outputs(
        &[
            dir.join("results.json"),
            dir.join("ablation.csv"),
            dir.join("ablation.json"),
        ],
        overwrite,
    )?;
    let table = load_table(&cfg.data)?;
    let grid = grid_schemes();
    let mut jobs = Vec::new();
    for &variant in &cfg.ablate_variants {
        for (label, schemes) in &grid {
            for &seed in &cfg.seeds {
                jobs.push((variant, *label, schemes.clone(), seed));
            }
        }
    }
    let records = run_jobs(&jobs, |(variant, label, schemes, seed)| {
        let model = ModelConfig {
            variant: *variant,
            ..cfg.model.clone()
        };
        let train = tabdeco_core::TrainConfig {
            loss: with_schemes(&cfg.train.loss, schemes.clone()),
            ..cfg.train.clone()
        };
        let run = run_seed(&cfg.data, &table, &model, &train, label, *seed)?;
        let r = &run.record;
        println!(
            "{} {label} seed {seed}: test {} {:.4} ({:.1}s)",
            variant.as_str(),
            r.metric.as_str(),
            r.test_metric,
            r.wall_clock_seconds
        );
        Ok(run.record)
    })?;

    let report = summarize(&records, &cfg.seeds);
    write_json(&dir.join("results.json"), &records)?;
    write_file(&dir.join("ablation.csv"), csv_table(&records).as_bytes())?;
    write_json(&dir.join("ablation.json"), &report)?;
    for row in &report.rows {
        println!(
            "{} {}: baseline {:.4}, {} of {} combinations beat it",
            row.dataset,
            row.variant.as_str(),
            row.baseline,
            row.counts_beating_baseline,
            row.cells.len().saturating_sub(1)
        );
        for c in &row.cells {
            println!(
                "  {:<9} {:.4} ± {:.4}",
                c.schemes, c.mean_test_metric, c.std_test_metric
            );
        }
    }
    Ok(report)
}

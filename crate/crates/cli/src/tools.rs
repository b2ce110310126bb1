//! `evaluate`, `gradcheck` and `synth`.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use tabdeco_core::data::synthetic::{generate, LabelRule};
use tabdeco_core::data::{apply_normalization, RawTable};
use tabdeco_core::gradcheck::{run_suite, CheckResult};
use tabdeco_core::training::{evaluate, load_checkpoint};
use tabdeco_core::MetricsReport;

use crate::error::{CliError, Result};
use crate::run::{check_outputs, CheckpointExtra};

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutput {
    pub checkpoint: String,
    pub data: String,
    pub dataset: String,
    pub variant: tabdeco_core::Variant,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Scores every row of a CSV with a checkpoint written by `train`, using the
/// encoder and normalization stored inside it.
pub fn cmd_evaluate(checkpoint: &Path, data: &Path) -> Result<EvalOutput> {
    let ckpt = load_checkpoint(checkpoint)?;
    let extra: CheckpointExtra = serde_json::from_value(ckpt.extra.clone())
        .map_err(|e| tabdeco_core::Error::Checkpoint(format!("missing or malformed preprocessing metadata: {e}")))?;
    let raw = RawTable::read_csv(data)?;
    let rows: Vec<usize> = (0..raw.len()).collect();
    let encoded = extra.encoder.encode(&raw, &rows)?;
    let dataset = apply_normalization(&encoded, &extra.norm)?;
    let report = evaluate(
        &ckpt.model,
        &ckpt.params,
        &dataset,
        extra.batch_size,
        Some(extra.metric),
    )?;
    Ok(EvalOutput {
        checkpoint: checkpoint.display().to_string(),
        data: data.display().to_string(),
        dataset: extra.dataset,
        variant: ckpt.model.config.variant,
        report,
    })
}

/// Runs the finite-difference suite and prints one line per check. Fails
/// with every check over its threshold named.
pub fn cmd_gradcheck(fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let start = Instant::now();
    let results = run_suite(fault)?;
    for r in &results {
        println!(
            "{:<6} {:<28} max rel err {:.3e} (tol {:.0e}) {}",
            format!("{:?}", r.kind).to_lowercase(),
            r.name,
            r.report.max_rel_err,
            r.report.tol,
            if r.report.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.report.passed)
        .map(|r| r.name.as_str())
        .collect();
    println!("{} checks in {:.2}s", results.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

/// Writes the bundled synthetic table as CSV.
pub fn cmd_synth(rows: usize, seed: u64, rule: LabelRule, out: &Path, overwrite: bool) -> Result<()> {
    check_outputs(&[out.to_path_buf()], overwrite)?;
    let table = generate(rows, seed, rule)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(table.write_csv(out)?)
}

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Minimum standard deviation used when scaling.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-numerical-column mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub columns: Vec<String>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub fn fit_normalization(train: &Dataset) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::Data("cannot fit normalization on an empty dataset".into()));
    }
    let m = train.schema.n_numerical();
    let n = train.len() as f64;
    let mut mean = vec![0.0f64; m];
    for row in train.numerical.chunks(m.max(1)).take(train.len()) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0f64; m];
    for row in train.numerical.chunks(m.max(1)).take(train.len()) {
        for ((acc, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v as f64 - mu).powi(2);
        }
    }
    Ok(NormStats {
        columns: train.schema.numerical_columns().map(|c| c.name.clone()).collect(),
        mean: mean.iter().map(|&v| v as f32).collect(),
        std: var.iter().map(|&v| (v / n).sqrt().max(STD_FLOOR) as f32).collect(),
    })
}

/// Applies `(x - mean) / std` to every numerical column.
pub fn apply_normalization(dataset: &Dataset, stats: &NormStats) -> Result<Dataset> {
    let names: Vec<&str> = dataset.schema.numerical_columns().map(|c| c.name.as_str()).collect();
    if names.len() != stats.columns.len() || names.iter().zip(&stats.columns).any(|(a, b)| a != b) {
        return Err(Error::Data(format!(
            "normalization stats for columns {:?} do not match dataset columns {names:?}",
            stats.columns
        )));
    }
    let m = names.len();
    let mut out = dataset.clone();
    for (i, v) in out.numerical.iter_mut().enumerate() {
        let j = i % m;
        *v = ((*v as f64 - stats.mean[j] as f64) / stats.std[j] as f64) as f32;
    }
    out.normalization = Some(stats.clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::data::{Column, ColumnKind, LabelColumn, Schema, Targets, Task};

    fn numeric(cols: &[&str], values: Vec<f32>) -> Dataset {
        let n = values.len() / cols.len();
        Dataset {
            schema: Schema {
                columns: cols
                    .iter()
                    .map(|c| Column {
                        name: c.to_string(),
                        kind: ColumnKind::Numerical,
                    })
                    .collect(),
                label: LabelColumn {
                    name: "y".into(),
                    task: Task::Regression,
                },
                cardinalities: BTreeMap::new(),
            },
            categorical: vec![],
            numerical: values,
            targets: Targets::Values(vec![0.0; n]),
            row_ids: (0..n).collect(),
            normalization: None,
        }
    }

    #[test]
    fn population_std() {
        let ds = numeric(&["a"], vec![2.0, 4.0, 6.0]);
        let stats = fit_normalization(&ds).unwrap();
        assert_eq!(stats.mean, vec![4.0]);
        assert!((stats.std[0] as f64 - (8.0f64 / 3.0).sqrt()).abs() < 1e-6);
        let out = apply_normalization(&ds, &stats).unwrap();
        for (v, e) in out.numerical.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((v - e).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_column_becomes_zero() {
        let ds = numeric(&["a", "b"], vec![5.0, 1.0, 5.0, 2.0]);
        let stats = fit_normalization(&ds).unwrap();
        assert!(stats.std[0] >= 1e-8);
        let out = apply_normalization(&ds, &stats).unwrap();
        assert_eq!(out.numerical[0], 0.0);
        assert_eq!(out.numerical[2], 0.0);
    }

    #[test]
    fn other_splits_use_training_stats() {
        let train = numeric(&["a"], vec![0.0, 2.0]);
        let test = numeric(&["a"], vec![10.0, 12.0]);
        let stats = fit_normalization(&train).unwrap();
        let out = apply_normalization(&test, &stats).unwrap();
        assert_eq!(out.numerical, vec![9.0, 11.0]);
    }

    #[test]
    fn mismatched_schema() {
        let stats = fit_normalization(&numeric(&["a"], vec![0.0, 2.0])).unwrap();
        assert!(apply_normalization(&numeric(&["b"], vec![0.0, 2.0]), &stats).is_err());
    }
}

//! Tabular datasets: CSV ingestion, schema handling, encoding, splitting,
//! normalization and mini-batching.

mod batch;
mod encode;
mod normalize;
mod prepare;
mod split;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use batch::{batches, epoch_seed, Batch};
pub use encode::{load_csv, parse_schema_hint, Encoder, RawTable, SchemaHint};
pub use normalize::{apply_normalization, fit_normalization, NormStats};
pub use prepare::{prepare, Prepared};
pub use split::{split, split_indices, SplitFractions};

/// Value reserved for categorical cells that are empty or marked missing.
pub const MISSING_CATEGORY: &str = "<missing>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Categorical,
    Numerical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Binary,
    Multiclass,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelColumn {
    pub name: String,
    pub task: Task,
}

/// Typed description of a table. `cardinalities` counts the distinct
/// training values of each categorical column plus one reserved bucket for
/// values never seen in training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
    pub label: LabelColumn,
    pub cardinalities: BTreeMap<String, usize>,
}

/// How one input column enters the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSlot {
    /// Offset into the batch's categorical codes, and the column's cardinality.
    Categorical { offset: usize, cardinality: usize },
    /// Offset into the batch's numerical values.
    Numerical { offset: usize },
}

impl Schema {
    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn categorical_columns(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.kind == ColumnKind::Categorical)
    }

    pub fn numerical_columns(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.kind == ColumnKind::Numerical)
    }

    pub fn n_categorical(&self) -> usize {
        self.categorical_columns().count()
    }

    pub fn n_numerical(&self) -> usize {
        self.numerical_columns().count()
    }

    /// Input slots in column order.
    pub fn feature_layout(&self) -> Vec<FeatureSlot> {
        let (mut cat, mut num) = (0, 0);
        self.columns
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Categorical => {
                    let slot = FeatureSlot::Categorical {
                        offset: cat,
                        cardinality: self.cardinalities.get(&c.name).copied().unwrap_or(1),
                    };
                    cat += 1;
                    slot
                }
                ColumnKind::Numerical => {
                    let slot = FeatureSlot::Numerical { offset: num };
                    num += 1;
                    slot
                }
            })
            .collect()
    }
}

/// Encoded prediction targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Values(Vec<f32>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                n_classes: *n_classes,
            },
            Targets::Values(v) => Targets::Values(rows.iter().map(|&r| v[r]).collect()),
        }
    }

    /// Number of model outputs: class count, or 1 for regression.
    pub fn n_outputs(&self) -> usize {
        match self {
            Targets::Classes { n_classes, .. } => *n_classes,
            Targets::Values(_) => 1,
        }
    }
}

/// Encoded rows. Categorical codes and numerical values are stored row-major
/// as `len × n_categorical` and `len × n_numerical` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub categorical: Vec<u32>,
    pub numerical: Vec<f32>,
    pub targets: Targets,
    pub row_ids: Vec<usize>,
    pub normalization: Option<NormStats>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    /// Rows at the given positions (not row ids), in that order.
    pub fn subset(&self, positions: &[usize]) -> Dataset {
        let (mc, mn) = (self.schema.n_categorical(), self.schema.n_numerical());
        let mut categorical = Vec::with_capacity(positions.len() * mc);
        let mut numerical = Vec::with_capacity(positions.len() * mn);
        for &p in positions {
            categorical.extend_from_slice(&self.categorical[p * mc..(p + 1) * mc]);
            numerical.extend_from_slice(&self.numerical[p * mn..(p + 1) * mn]);
        }
        Dataset {
            schema: self.schema.clone(),
            categorical,
            numerical,
            targets: self.targets.subset(positions),
            row_ids: positions.iter().map(|&p| self.row_ids[p]).collect(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn task(&self) -> Task {
        self.schema.label.task
    }
}

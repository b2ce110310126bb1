use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Column, ColumnKind, Dataset, LabelColumn, Schema, Targets, Task, MISSING_CATEGORY};
use crate::error::{Error, Result};

const MISSING_TOKENS: &[&str] = &["", "NA", "N/A", "?", "nan", "NaN", "null"];

fn is_missing(cell: &str) -> bool {
    MISSING_TOKENS.contains(&cell)
}

/// A CSV file as strings, header first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(file);
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_owned)
            .collect();
        if header.is_empty() || header.iter().all(String::is_empty) {
            return Err(Error::Data(format!("{}: empty file or missing header", path.display())));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            rows.push(record.iter().map(str::to_owned).collect());
        }
        Self::from_rows(header, rows)
    }

    pub fn from_rows(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = header.iter().find(|h| !seen.insert(h.as_str())) {
            return Err(Error::Data(format!("duplicate column name `{dup}`")));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != header.len()) {
            return Err(Error::Data(format!(
                "row {} has {} fields, header has {}",
                i + 1,
                r.len(),
                header.len()
            )));
        }
        if rows.len() < 2 {
            return Err(Error::Data(format!("need at least 2 data rows, found {}", rows.len())));
        }
        Ok(Self { header, rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// User-supplied typing information. Columns not mentioned are inferred.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SchemaHint {
    pub kinds: BTreeMap<String, ColumnKind>,
    pub label: Option<String>,
    pub task: Option<Task>,
    /// Raw label value treated as the positive class of a binary task.
    pub positive_label: Option<String>,
}

impl SchemaHint {
    pub fn with_label(label: impl Into<String>) -> Self {
        Self {
            label: Some(label.into()),
            ..Self::default()
        }
    }
}

/// Parses hint lines of the form `column:categorical|numerical|label_binary|
/// label_multiclass|label_regression`. Blank lines and `#` comments are
/// ignored.
pub fn parse_schema_hint(text: &str) -> Result<SchemaHint> {
    let mut hint = SchemaHint::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, kind) = line
            .rsplit_once(':')
            .ok_or_else(|| Error::Config(format!("schema hint line {}: expected `name:kind`", n + 1)))?;
        let name = name.trim().to_owned();
        match kind.trim() {
            "categorical" => {
                hint.kinds.insert(name, ColumnKind::Categorical);
            }
            "numerical" => {
                hint.kinds.insert(name, ColumnKind::Numerical);
            }
            label_kind @ ("label_binary" | "label_multiclass" | "label_regression") => {
                if hint.label.is_some() {
                    return Err(Error::Config(format!(
                        "schema hint line {}: second label column",
                        n + 1
                    )));
                }
                hint.task = Some(match label_kind {
                    "label_binary" => Task::Binary,
                    "label_multiclass" => Task::Multiclass,
                    _ => Task::Regression,
                });
                hint.label = Some(name);
            }
            other => {
                return Err(Error::Config(format!(
                    "schema hint line {}: unknown kind `{other}`",
                    n + 1
                )))
            }
        }
    }
    Ok(hint)
}

/// Vocabularies, imputation values and label classes fitted on training rows.
/// Serialized into checkpoints so raw CSVs can be encoded at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub columns: Vec<Column>,
    pub label: LabelColumn,
    /// Per categorical column, the training values in order of first
    /// appearance. Code `vocab.len()` is the unseen bucket.
    pub vocab: Vec<Vec<String>>,
    /// Per numerical column, the training mean used for missing cells.
    pub numeric_fill: Vec<f32>,
    /// Class names by code; for binary tasks `[negative, positive]`.
    pub classes: Vec<String>,
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn infer_columns(raw: &RawTable, hint: &SchemaHint) -> Result<(Vec<Column>, LabelColumn)> {
    let label_name = hint
        .label
        .clone()
        .ok_or_else(|| Error::Config("no label column specified".into()))?;
    let label_idx = raw
        .column_index(&label_name)
        .ok_or_else(|| Error::Data(format!("label column `{label_name}` not found in header")))?;
    for name in hint.kinds.keys() {
        if raw.column_index(name).is_none() {
            return Err(Error::Data(format!("schema hint names unknown column `{name}`")));
        }
    }
    if hint.kinds.contains_key(&label_name) {
        return Err(Error::Data(format!(
            "label column `{label_name}` also declared as a feature"
        )));
    }
    let mut columns = Vec::new();
    for (i, name) in raw.header.iter().enumerate() {
        if i == label_idx {
            continue;
        }
        let kind = match hint.kinds.get(name) {
            Some(&k) => k,
            None => {
                let numeric = raw
                    .rows
                    .iter()
                    .map(|r| r[i].as_str())
                    .filter(|c| !is_missing(c))
                    .all(|c| parse_number(c).is_some());
                if numeric {
                    ColumnKind::Numerical
                } else {
                    ColumnKind::Categorical
                }
            }
        };
        columns.push(Column {
            name: name.clone(),
            kind,
        });
    }
    if columns.is_empty() {
        return Err(Error::Data("no feature columns".into()));
    }
    let task = match hint.task {
        Some(t) => t,
        None => {
            let distinct: std::collections::BTreeSet<&str> = raw.rows.iter().map(|r| r[label_idx].as_str()).collect();
            if distinct.len() == 2 {
                Task::Binary
            } else {
                Task::Multiclass
            }
        }
    };
    Ok((columns, LabelColumn { name: label_name, task }))
}

impl Encoder {
    /// Types the columns of `raw` (hint first, inference otherwise) and fits
    /// vocabularies, imputation means and label classes on `train_rows`.
    pub fn fit(raw: &RawTable, hint: &SchemaHint, train_rows: &[usize]) -> Result<Self> {
        if train_rows.is_empty() {
            return Err(Error::Data("cannot fit an encoder on zero rows".into()));
        }
        let (columns, label) = infer_columns(raw, hint)?;
        let mut vocab = Vec::new();
        let mut numeric_fill = Vec::new();
        for col in &columns {
            let idx = raw.column_index(&col.name).expect("inferred column exists");
            match col.kind {
                ColumnKind::Categorical => {
                    let mut values: Vec<String> = Vec::new();
                    let mut seen = std::collections::HashSet::new();
                    for &r in train_rows {
                        let cell = &raw.rows[r][idx];
                        let v = if is_missing(cell) {
                            MISSING_CATEGORY
                        } else {
                            cell.as_str()
                        };
                        if seen.insert(v.to_owned()) {
                            values.push(v.to_owned());
                        }
                    }
                    vocab.push(values);
                }
                ColumnKind::Numerical => {
                    let (mut sum, mut count) = (0.0f64, 0usize);
                    for &r in train_rows {
                        let cell = &raw.rows[r][idx];
                        if is_missing(cell) {
                            continue;
                        }
                        sum += parse_number(cell).ok_or_else(|| not_a_number(r, &col.name, cell))?;
                        count += 1;
                    }
                    numeric_fill.push(if count == 0 { 0.0 } else { (sum / count as f64) as f32 });
                }
            }
        }
        let label_idx = raw.column_index(&label.name).expect("label exists");
        let classes = match label.task {
            Task::Regression => Vec::new(),
            Task::Binary => {
                let distinct: std::collections::BTreeSet<&str> =
                    train_rows.iter().map(|&r| raw.rows[r][label_idx].as_str()).collect();
                if distinct.len() != 2 {
                    return Err(Error::Data(format!(
                        "binary label `{}` has {} distinct training values",
                        label.name,
                        distinct.len()
                    )));
                }
                let mut sorted: Vec<String> = distinct.into_iter().map(str::to_owned).collect();
                if let Some(pos) = &hint.positive_label {
                    let at = sorted.iter().position(|c| c == pos).ok_or_else(|| {
                        Error::Data(format!("positive label `{pos}` does not occur in training data"))
                    })?;
                    sorted.swap(at, 1);
                }
                sorted
            }
            Task::Multiclass => {
                let mut classes: Vec<String> = Vec::new();
                for &r in train_rows {
                    let v = &raw.rows[r][label_idx];
                    if !classes.contains(v) {
                        classes.push(v.clone());
                    }
                }
                if classes.len() < 2 {
                    return Err(Error::Data(format!("label `{}` has a single class", label.name)));
                }
                classes
            }
        };
        Ok(Self {
            columns,
            label,
            vocab,
            numeric_fill,
            classes,
        })
    }

    pub fn schema(&self) -> Schema {
        let cardinalities = self
            .columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Categorical)
            .zip(&self.vocab)
            .map(|(c, v)| (c.name.clone(), v.len() + 1))
            .collect();
        Schema {
            columns: self.columns.clone(),
            label: self.label.clone(),
            cardinalities,
        }
    }

    /// Encodes `rows` of `raw`. Columns are matched by name, so the header
    /// order may differ from the training file.
    pub fn encode(&self, raw: &RawTable, rows: &[usize]) -> Result<Dataset> {
        let lookup = |name: &str| {
            raw.column_index(name)
                .ok_or_else(|| Error::Data(format!("schema mismatch: column `{name}` not found")))
        };
        let cat_idx: Vec<usize> = self
            .columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Categorical)
            .map(|c| lookup(&c.name))
            .collect::<Result<_>>()?;
        let num_cols: Vec<&Column> = self
            .columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Numerical)
            .collect();
        let num_idx: Vec<usize> = num_cols.iter().map(|c| lookup(&c.name)).collect::<Result<_>>()?;
        let label_idx = lookup(&self.label.name)?;

        let codes: Vec<HashMap<&str, u32>> = self
            .vocab
            .iter()
            .map(|v| v.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect())
            .collect();

        let mut categorical = Vec::with_capacity(rows.len() * cat_idx.len());
        let mut numerical = Vec::with_capacity(rows.len() * num_idx.len());
        for &r in rows {
            let row = &raw.rows[r];
            for (k, &ci) in cat_idx.iter().enumerate() {
                let cell = row[ci].as_str();
                let v = if is_missing(cell) { MISSING_CATEGORY } else { cell };
                categorical.push(codes[k].get(v).copied().unwrap_or(self.vocab[k].len() as u32));
            }
            for (k, &ni) in num_idx.iter().enumerate() {
                let cell = row[ni].as_str();
                let v = if is_missing(cell) {
                    self.numeric_fill[k]
                } else {
                    parse_number(cell).ok_or_else(|| not_a_number(r, &num_cols[k].name, cell))? as f32
                };
                numerical.push(v);
            }
        }

        let targets = match self.label.task {
            Task::Regression => Targets::Values(
                rows.iter()
                    .map(|&r| {
                        let cell = &raw.rows[r][label_idx];
                        parse_number(cell)
                            .map(|v| v as f32)
                            .ok_or_else(|| not_a_number(r, &self.label.name, cell))
                    })
                    .collect::<Result<_>>()?,
            ),
            Task::Binary | Task::Multiclass => Targets::Classes {
                labels: rows
                    .iter()
                    .map(|&r| {
                        let cell = &raw.rows[r][label_idx];
                        self.classes.iter().position(|c| c == cell).ok_or_else(|| {
                            Error::Data(format!("row {}: label `{cell}` was not seen in training data", r + 1))
                        })
                    })
                    .collect::<Result<_>>()?,
                n_classes: self.classes.len(),
            },
        };

        Ok(Dataset {
            schema: self.schema(),
            categorical,
            numerical,
            targets,
            row_ids: rows.to_vec(),
            normalization: None,
        })
    }
}

fn not_a_number(row: usize, column: &str, cell: &str) -> Error {
    Error::Data(format!("row {}, column `{column}`: `{cell}` is not a number", row + 1))
}

/// Reads a CSV and encodes every row, treating the whole file as training
/// data for vocabulary and class fitting.
pub fn load_csv(path: impl AsRef<Path>, hint: &SchemaHint) -> Result<Dataset> {
    let raw = RawTable::read_csv(path)?;
    let all: Vec<usize> = (0..raw.len()).collect();
    Encoder::fit(&raw, hint, &all)?.encode(&raw, &all)
}

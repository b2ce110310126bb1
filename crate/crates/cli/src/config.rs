//! Run configuration: a flat `key = value` file split into sections.
//!
//! ```text
//! # comment
//! [run]
//! output_dir = runs/demo
//! seeds = 0, 1, 2
//!
//! [data]
//! source = synthetic
//! synthetic_rows = 2000
//!
//! [model]
//! d = 16
//!
//! [loss]
//! schemes = sf, fs, gg
//! ```
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Keys are
//! unique within a section, unknown sections and keys are errors, and
//! relative paths are resolved against the directory of the config file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use tabdeco_core::data::synthetic::LabelRule;
use tabdeco_core::data::SplitFractions;
use tabdeco_core::losses::{format_schemes, parse_schemes};
use tabdeco_core::model::HeadPooling;
use tabdeco_core::training::AdamWConfig;
use tabdeco_core::{LossSpec, Metric, ModelConfig, Task, TrainConfig, Variant};

use crate::error::{CliError, Result};

const SECTIONS: &[&str] = &["run", "data", "model", "train", "loss", "ablate"];

#[derive(Debug, Default)]
struct Section {
    /// key → (value, line number)
    entries: BTreeMap<String, (String, usize)>,
}

/// Raw sections of a config file, before typing.
#[derive(Debug, Default)]
pub struct ConfigText {
    sections: BTreeMap<String, Section>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ConfigText {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = ConfigText::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(format!("line {n}: unterminated section header")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(config_err(format!(
                        "line {n}: unknown section [{name}] (expected one of {})",
                        SECTIONS.join(", ")
                    )));
                }
                if out.sections.contains_key(name) {
                    return Err(config_err(format!("line {n}: section [{name}] appears twice")));
                }
                out.sections.insert(name.to_owned(), Section::default());
                current = Some(name.to_owned());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {n}: expected `key = value`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(config_err(format!("line {n}: empty key")));
            }
            let section = current
                .as_ref()
                .ok_or_else(|| config_err(format!("line {n}: `{key}` appears before any section header")))?;
            let entries = &mut out.sections.get_mut(section).expect("section inserted").entries;
            if entries.contains_key(key) {
                return Err(config_err(format!("line {n}: duplicate key `{key}` in [{section}]")));
            }
            entries.insert(key.to_owned(), (value.trim().to_owned(), n));
        }
        Ok(out)
    }

    fn take(&mut self, section: &str) -> Fields {
        Fields {
            section: section.to_owned(),
            entries: self.sections.remove(section).unwrap_or_default().entries,
        }
    }
}

/// Typed access to one section; every key must be consumed.
struct Fields {
    section: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl Fields {
    fn raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| config_err(format!("line {line}: [{}] {key} = {v}: {e}", self.section))),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// `none` (any case) maps to `None`.
    fn optional<T: FromStr>(&mut self, key: &str, default: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some((v, _)) if v.eq_ignore_ascii_case("none") => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| config_err(format!("line {line}: [{}] {key} = {v}: {e}", self.section))),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some((v, line)) = self.raw(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| config_err(format!("line {line}: [{}] {key}: `{s}`: {e}", self.section)))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn finish(&mut self) -> Result<()> {
        match std::mem::take(&mut self.entries).into_iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(config_err(format!(
                "line {line}: unknown key `{key}` in [{}]",
                self.section
            ))),
        }
    }
}

/// Where the table comes from.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        schema: Option<PathBuf>,
    },
    /// The bundled generator; see `tabdeco_core::data::synthetic`.
    Synthetic {
        rows: usize,
        seed: u64,
        rule: SyntheticRule,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticRule {
    Logistic { scale: f64 },
    Threshold,
}

impl From<SyntheticRule> for LabelRule {
    fn from(r: SyntheticRule) -> Self {
        match r {
            SyntheticRule::Logistic { scale } => LabelRule::Logistic { scale },
            SyntheticRule::Threshold => LabelRule::Threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataConfig {
    /// Dataset name reported in results.
    pub name: String,
    #[serde(flatten)]
    pub source: DataSource,
    pub label: Option<String>,
    pub task: Option<Task>,
    pub positive_label: Option<String>,
    pub fractions: SplitFractions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// `seed` is overwritten per run from `seeds`.
    pub train: TrainConfig,
    /// The `[loss] schemes` list as written, joined with `+`.
    pub schemes_label: String,
    /// Variants swept by `ablate`; defaults to `[model] variant`.
    pub ablate_variants: Vec<Variant>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "binary" => Ok(Task::Binary),
        "multiclass" => Ok(Task::Multiclass),
        "regression" => Ok(Task::Regression),
        other => Err(format!(
            "unknown task `{other}` (expected binary, multiclass or regression)"
        )),
    }
}

fn parse_pooling(s: &str) -> std::result::Result<HeadPooling, String> {
    match s {
        "auto" => Ok(HeadPooling::Auto),
        "cls" => Ok(HeadPooling::Cls),
        "mean" => Ok(HeadPooling::Mean),
        other => Err(format!("unknown head pooling `{other}` (expected auto, cls or mean)")),
    }
}

/// A plain string wrapper so enum parsers fit the `FromStr` helpers.
struct Word(String);

impl FromStr for Word {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(Word(s.to_owned()))
    }
}

fn word_with<T>(f: &mut Fields, key: &str, parse: fn(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
    let line = f.entries.get(key).map(|(_, l)| *l);
    match f.get::<Word>(key)? {
        None => Ok(None),
        Some(Word(w)) => parse(&w)
            .map(Some)
            .map_err(|e| config_err(format!("line {}: [{}] {key}: {e}", line.unwrap_or(0), f.section))),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut t = ConfigText::parse(text)?;

        let mut run = t.take("run");
        let output_dir = resolve(base, &run.or::<String>("output_dir", "runs".into())?);
        let seeds = run.list::<u64>("seeds")?.unwrap_or_else(|| vec![0]);
        run.finish()?;
        if seeds.is_empty() {
            return Err(config_err("[run] seeds must list at least one seed"));
        }
        let unique: BTreeSet<u64> = seeds.iter().copied().collect();
        if unique.len() != seeds.len() {
            return Err(config_err("[run] seeds contains duplicates"));
        }

        let data = Self::data_section(&mut t.take("data"), base)?;

        let mut m = t.take("model");
        let dm = ModelConfig::default();
        let model = ModelConfig {
            d: m.or("d", dm.d)?,
            layers: m.or("layers", dm.layers)?,
            heads: m.or("heads", dm.heads)?,
            variant: m.or("variant", dm.variant)?,
            ffn_multiplier: m.or("ffn_multiplier", dm.ffn_multiplier)?,
            dropout: m.or("dropout", dm.dropout)?,
            head_hidden: m.optional("head_hidden", dm.head_hidden)?,
            head_pooling: word_with(&mut m, "head_pooling", parse_pooling)?.unwrap_or(dm.head_pooling),
            detach_head_projections: m.or("detach_head_projections", dm.detach_head_projections)?,
        };
        m.finish()?;
        model.validate().map_err(|e| config_err(e.to_string()))?;

        let mut l = t.take("loss");
        let dl = LossSpec::default();
        let (schemes, schemes_label) = match l.raw("schemes") {
            None => (dl.schemes.clone(), format_schemes(&dl.schemes)),
            Some((v, line)) => {
                let set = parse_schemes(&v).map_err(|e| config_err(format!("line {line}: [loss] schemes: {e}")))?;
                let written: Vec<&str> = v.split([',', '+']).map(str::trim).filter(|s| !s.is_empty()).collect();
                let label = if set.is_empty() {
                    "none".to_owned()
                } else {
                    written.join("+")
                };
                (set, label)
            }
        };
        let loss = LossSpec {
            schemes,
            tau: l.or("tau", dl.tau)?,
            alpha: l.or("alpha", dl.alpha)?,
            include_cls: l.or("include_cls", dl.include_cls)?,
            exclude_self: l.or("exclude_self", dl.exclude_self)?,
        };
        l.finish()?;

        let mut tr = t.take("train");
        let dt = TrainConfig::default();
        let train = TrainConfig {
            optimizer: AdamWConfig {
                learning_rate: tr.or("learning_rate", dt.optimizer.learning_rate)?,
                beta1: tr.or("beta1", dt.optimizer.beta1)?,
                beta2: tr.or("beta2", dt.optimizer.beta2)?,
                weight_decay: tr.or("weight_decay", dt.optimizer.weight_decay)?,
            },
            batch_size: tr.or("batch_size", dt.batch_size)?,
            epochs: tr.or("epochs", dt.epochs)?,
            patience: tr.or("patience", dt.patience)?,
            seed: seeds[0],
            loss,
            eval_metric: tr.optional::<Metric>("eval_metric", dt.eval_metric)?,
            grad_clip: tr.optional("grad_clip", dt.grad_clip)?,
        };
        tr.finish()?;
        train.validate().map_err(|e| config_err(e.to_string()))?;

        let mut a = t.take("ablate");
        let ablate_variants = a.list::<Variant>("variants")?.unwrap_or_else(|| vec![model.variant]);
        a.finish()?;
        if ablate_variants.is_empty() {
            return Err(config_err("[ablate] variants must not be empty"));
        }

        Ok(RunConfig {
            output_dir,
            seeds,
            data,
            model,
            train,
            schemes_label,
            ablate_variants,
        })
    }

    fn data_section(f: &mut Fields, base: &Path) -> Result<DataConfig> {
        let source_kind: String = f.or("source", "csv".to_owned())?;
        let source = match source_kind.as_str() {
            "csv" => {
                let path: String = f
                    .get("path")?
                    .ok_or_else(|| config_err("[data] path is required for source = csv"))?;
                DataSource::Csv {
                    path: resolve(base, &path),
                    schema: f.get::<String>("schema")?.map(|s| resolve(base, &s)),
                }
            }
            "synthetic" => {
                let rule = match f.or("synthetic_rule", "logistic".to_owned())?.as_str() {
                    "logistic" => SyntheticRule::Logistic {
                        scale: f.or("synthetic_scale", 4.0)?,
                    },
                    "threshold" => SyntheticRule::Threshold,
                    other => {
                        return Err(config_err(format!(
                            "[data] synthetic_rule `{other}` (expected logistic or threshold)"
                        )))
                    }
                };
                DataSource::Synthetic {
                    rows: f.or("synthetic_rows", 2000)?,
                    seed: f.or("synthetic_seed", 0)?,
                    rule,
                }
            }
            other => {
                return Err(config_err(format!(
                    "[data] source `{other}` (expected csv or synthetic)"
                )))
            }
        };
        let default_name = match &source {
            DataSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".into()),
            DataSource::Synthetic { .. } => "synthetic".into(),
        };
        let df = SplitFractions::default();
        let fractions = SplitFractions {
            train: f.or("train_fraction", df.train)?,
            val: f.or("val_fraction", df.val)?,
            test: f.or("test_fraction", df.test)?,
        };
        fractions.validate().map_err(|e| config_err(e.to_string()))?;
        let cfg = DataConfig {
            name: f.or("name", default_name)?,
            label: f.get("label")?,
            task: word_with(f, "task", parse_task)?,
            positive_label: f.get("positive_label")?,
            source,
            fractions,
        };
        f.finish()?;
        if matches!(cfg.source, DataSource::Synthetic { .. }) && cfg.label.is_some() {
            return Err(config_err("[data] label cannot be set for synthetic data"));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tabdeco_core::Scheme;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn defaults_from_minimal_file() {
        let c = parse("[data]\nsource = synthetic\n").unwrap();
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train.loss, LossSpec::default());
        assert_eq!(c.output_dir, PathBuf::from("/base/runs"));
        assert_eq!(c.data.name, "synthetic");
        assert_eq!(c.ablate_variants, vec![Variant::Both]);
    }

    #[test]
    fn full_file() {
        let text = "
# demo
[run]
output_dir = out
seeds = 3, 4 ,5

[data]
path = t.csv
schema = /abs/t.schema
label = target
task = binary
positive_label = yes
train_fraction = 0.6
val_fraction = 0.2
test_fraction = 0.2

[model]
d = 16
layers = 2
heads = 4
variant = instance_only
head_hidden = none
head_pooling = mean

[train]
learning_rate = 0.001
epochs = 30
grad_clip = none
eval_metric = auroc

[loss]
schemes = sf, fs, gg
alpha = 0.2

[ablate]
variants = both, feature_only
";
        let c = parse(text).unwrap();
        assert_eq!(c.seeds, vec![3, 4, 5]);
        assert_eq!(c.output_dir, PathBuf::from("/base/out"));
        assert_eq!(
            c.data.source,
            DataSource::Csv {
                path: "/base/t.csv".into(),
                schema: Some("/abs/t.schema".into())
            }
        );
        assert_eq!(c.data.name, "t");
        assert_eq!(c.data.task, Some(Task::Binary));
        assert_eq!(c.model.variant, Variant::InstanceOnly);
        assert_eq!(c.model.head_pooling, HeadPooling::Mean);
        assert_eq!(c.train.grad_clip, None);
        assert_eq!(c.train.eval_metric, Some(Metric::Auroc));
        assert_eq!(
            c.train.loss.schemes,
            [Scheme::Sf, Scheme::Fs, Scheme::Gg].into_iter().collect()
        );
        assert_eq!(c.schemes_label, "sf+fs+gg");
        assert_eq!(c.ablate_variants, vec![Variant::Both, Variant::FeatureOnly]);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, needle) in [
            ("[data]\nsource = synthetic\n[model]\nd = x\n", "line 4"),
            ("d = 3\n", "before any section"),
            ("[nope]\n", "unknown section"),
            ("[data]\nsource = synthetic\nbogus = 1\n", "unknown key `bogus`"),
            ("[data]\nsource = synthetic\n[model]\nd = 2\nd = 3\n", "duplicate key"),
            ("[data]\nsource = synthetic\n[loss]\nschemes = f, q\n", "line 4"),
            ("[data]\nsource = synthetic\n[model]\nd = 10\nheads = 4\n", "divisible"),
            ("[run]\nseeds = 1, 1\n[data]\nsource = synthetic\n", "duplicates"),
            ("[data]\n", "path is required"),
            (
                "[data]\nsource = synthetic\n[model]\nhead_pooling = max\n",
                "head pooling",
            ),
        ] {
            let err = parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?}: {err}");
        }
    }
}

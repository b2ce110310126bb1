//! The supervised training loop with auxiliary contrastive losses,
//! validation-based model selection and evaluation.

pub mod checkpoint;
pub mod optim;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{batches, epoch_seed, Batch, Dataset, Targets, Task};
use crate::error::{Error, Result};
use crate::losses::{contrast_total, supervised_loss, total_loss, ContrastTriple, LossSpec, Scheme};
use crate::metrics::{accuracy, auroc, mse, positive_scores, Metric, MetricsReport};
use crate::model::{ForwardMode, ModelParams, TabDeco};
use crate::rng::{stream, Purpose};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamWConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossSpec,
    /// `None` picks the task default (AUROC, accuracy or MSE).
    pub eval_metric: Option<Metric>,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 128,
            epochs: 100,
            patience: 10,
            seed: 0,
            loss: LossSpec::default(),
            eval_metric: None,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.batch_size < 2 && !self.loss.schemes.is_empty() {
            return Err(Error::Config("contrastive schemes need batch_size >= 2".into()));
        }
        if self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config("epochs and patience must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

pub fn default_metric(task: Task) -> Metric {
    match task {
        Task::Binary => Metric::Auroc,
        Task::Multiclass => Metric::Accuracy,
        Task::Regression => Metric::Mse,
    }
}

fn check_metric(metric: Metric, task: Task) -> Result<()> {
    let ok = match metric {
        Metric::Auroc => task == Task::Binary,
        Metric::Accuracy => task != Task::Regression,
        Metric::Mse => task == Task::Regression,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "metric {} does not apply to a {task:?} task",
            metric.as_str()
        )))
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_sup_loss: f64,
    /// Per scheme: attract + repel + cross, averaged over rows.
    pub train_contrast_losses: BTreeMap<String, f64>,
    pub train_total_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    /// Mean global gradient norm before clipping.
    pub mean_grad_norm: f64,
    pub clipped_steps: usize,
    /// Batches too small to contrast, skipped this epoch.
    pub skipped_batches: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub metric: Metric,
    pub best_epoch: usize,
    pub best_val_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub sup: f64,
    pub contrast: Vec<(Scheme, ContrastTriple<f64>)>,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Parameters the loss cannot reach under this configuration; they get a
/// zero gradient instead of a missing-gradient error.
fn unreachable_params(model: &TabDeco, spec: &LossSpec) -> impl Fn(&str) -> bool {
    let no_gg = !spec.schemes.contains(&Scheme::Gg);
    let no_projectors = spec.schemes.is_empty() && model.config.detach_head_projections;
    move |name: &str| (no_gg && name == "global_table") || (no_projectors && name.starts_with("projector_"))
}

fn check_finite(value: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// Forward, loss, backward and one AdamW update on `batch`.
pub fn train_step(
    model: &TabDeco,
    params: &mut ModelParams,
    state: &mut OptimizerState,
    config: &TrainConfig,
    batch: &Batch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<StepStats> {
    let spec = &config.loss;
    let mut g = Graph::<f32>::new();
    let p = model.bind(&mut g, params);
    let fwd = model.forward(&mut g, &p, batch, &mut ForwardMode { dropout_rng })?;
    let sup = supervised_loss(&mut g, fwd.logits, &batch.targets)?;
    let sup_value = check_finite(g.scalar_value(sup).as_f64(), || "supervised loss".into())?;
    let contrast = contrast_total(&mut g, fwd.global, fwd.local, p.global_table, spec)?;
    let mut parts = Vec::with_capacity(contrast.per_scheme.len());
    for (scheme, triple) in &contrast.per_scheme {
        let v = triple.values(&g);
        for (component, x) in [("attract", v.attract), ("repel", v.repel), ("cross", v.cross)] {
            check_finite(x, || format!("{component} component of scheme {scheme}"))?;
        }
        parts.push((*scheme, v));
    }
    let total = total_loss(&mut g, sup, contrast.total, spec.alpha)?;
    let total_value = check_finite(g.scalar_value(total).as_f64(), || "total loss".into())?;
    g.backward(total)?;

    let skip = unreachable_params(model, spec);
    let mut grads = p.try_map(&mut |name, v: &Var| match g.grad(*v) {
        Some(t) => Ok(Some(t)),
        None if skip(name) => Ok(Some(Tensor::zeros(g.shape(*v).to_vec()))),
        None => Ok(None),
    })?;
    let grad_norm = match config.grad_clip {
        Some(c) => clip_global_norm(&mut grads, c),
        None => global_norm(&grads),
    };
    check_finite(grad_norm, || "gradient norm".into())?;
    adamw_step(params, &grads, state, &config.optimizer)?;
    Ok(StepStats {
        sup: sup_value,
        contrast: parts,
        total: total_value,
        grad_norm,
        clipped: config.grad_clip.is_some_and(|c| grad_norm > c),
    })
}

/// Logits for every row, in dataset order, using unshuffled batches of
/// `batch_size` (the last one may be smaller).
pub fn predict_logits(model: &TabDeco, params: &ModelParams, dataset: &Dataset, batch_size: usize) -> Result<Tensor> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let width = model.layout.n_outputs;
    let mut out = Vec::with_capacity(dataset.len() * width);
    for batch in batches(dataset, batch_size, false, 0, false)? {
        let mut g = Graph::<f32>::new();
        let p = params.try_map(&mut |_, t| Ok(g.constant(t.clone())))?;
        let fwd = model.forward(&mut g, &p, &batch, &mut ForwardMode::eval())?;
        out.extend_from_slice(g.value(fwd.logits).data());
    }
    Tensor::new([dataset.len(), width], out)
}

/// Metric and mean supervised loss over `dataset`.
pub fn evaluate(
    model: &TabDeco,
    params: &ModelParams,
    dataset: &Dataset,
    batch_size: usize,
    metric: Option<Metric>,
) -> Result<MetricsReport> {
    let task = dataset.task();
    let metric = metric.unwrap_or(default_metric(task));
    check_metric(metric, task)?;
    if dataset.targets.n_outputs() != model.layout.n_outputs {
        return Err(Error::Data(format!(
            "dataset has {} outputs, model predicts {}",
            dataset.targets.n_outputs(),
            model.layout.n_outputs
        )));
    }
    let logits = predict_logits(model, params, dataset, batch_size)?;
    let n = dataset.len();
    let mut g = Graph::<f64>::new();
    let lv = g.constant(logits.cast());
    let sup = supervised_loss(&mut g, lv, &dataset.targets)?;
    let sup_loss = g.scalar_value(sup);
    let (value, positive_count) = match (&dataset.targets, metric) {
        (Targets::Classes { labels, .. }, Metric::Auroc) => {
            let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            let pos = truth.iter().filter(|&&t| t).count();
            (auroc(&positive_scores(logits.data()), &truth)?, Some(pos))
        }
        (Targets::Classes { labels, n_classes }, Metric::Accuracy) => {
            (accuracy(logits.data(), *n_classes, labels)?, None)
        }
        (Targets::Values(values), Metric::Mse) => (mse(logits.data(), values)?, None),
        _ => return Err(Error::Data(format!("targets do not match metric {}", metric.as_str()))),
    };
    Ok(MetricsReport {
        metric_name: metric,
        value,
        n_samples: n,
        positive_count,
        sup_loss,
    })
}

/// Trains from a fresh initialization seeded by `config.seed`.
pub fn train(model: &TabDeco, config: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    let params = model.init(config.seed);
    train_from(model, config, params, train_set, val_set)
}

/// Runs the epoch loop starting from `params`, keeping the parameters of
/// the best validation epoch and stopping after `patience` epochs without
/// improvement.
pub fn train_from(
    model: &TabDeco,
    config: &TrainConfig,
    mut params: ModelParams,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.check_params(&params)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    if train_set.schema != val_set.schema {
        return Err(Error::Data("training and validation schemas differ".into()));
    }
    let task = train_set.task();
    let metric = config.eval_metric.unwrap_or(default_metric(task));
    check_metric(metric, task)?;
    if train_set.targets.n_outputs() != model.layout.n_outputs {
        return Err(Error::Data(format!(
            "dataset has {} outputs, model predicts {}",
            train_set.targets.n_outputs(),
            model.layout.n_outputs
        )));
    }

    let contrasting = !config.loss.schemes.is_empty();
    let mut state = OptimizerState::new(&params);
    let mut dropout_rng = stream(config.seed, Purpose::Dropout);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        let epoch_batches = batches(
            train_set,
            config.batch_size,
            true,
            epoch_seed(config.seed, epoch),
            false,
        )?;
        let mut rows = 0usize;
        let mut sup_sum = 0.0;
        let mut total_sum = 0.0;
        let mut contrast_sum: BTreeMap<String, f64> = BTreeMap::new();
        let (mut norm_sum, mut steps, mut clipped, mut skipped) = (0.0, 0usize, 0usize, 0usize);
        for (k, batch) in epoch_batches.iter().enumerate() {
            if contrasting && batch.size() < 2 {
                skipped += 1;
                continue;
            }
            let rng = (model.config.dropout > 0.0).then_some(&mut dropout_rng);
            let stats = train_step(model, &mut params, &mut state, config, batch, rng).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {k})")),
                other => other,
            })?;
            let w = batch.size() as f64;
            rows += batch.size();
            sup_sum += stats.sup * w;
            total_sum += stats.total * w;
            for (scheme, t) in &stats.contrast {
                *contrast_sum.entry(scheme.to_string()).or_default() += t.sum() * w;
            }
            norm_sum += stats.grad_norm;
            steps += 1;
            clipped += usize::from(stats.clipped);
        }
        if rows == 0 {
            return Err(Error::Data("no trainable batch in an epoch".into()));
        }
        let report = evaluate(model, &params, val_set, config.batch_size, Some(metric))?;
        let val = check_finite(report.value, || format!("validation metric (epoch {epoch})"))?;
        let rows_f = rows as f64;
        history.push(EpochRecord {
            epoch,
            train_sup_loss: sup_sum / rows_f,
            train_contrast_losses: contrast_sum.into_iter().map(|(k, v)| (k, v / rows_f)).collect(),
            train_total_loss: total_sum / rows_f,
            val_metric: val,
            lr: config.optimizer.learning_rate,
            grad_clip: config.grad_clip,
            mean_grad_norm: norm_sum / steps as f64,
            clipped_steps: clipped,
            skipped_batches: skipped,
        });
        let improved = best.as_ref().is_none_or(|(_, b, _)| metric.improves(val, *b));
        if improved {
            best = Some((epoch, val, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_metric, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        history,
        metric,
        best_epoch,
        best_val_metric,
    })
}

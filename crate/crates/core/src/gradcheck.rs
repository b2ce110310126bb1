//! Central finite-difference checks of the reverse-mode gradients, run in
//! 64-bit, and the suite used by the `gradcheck` command.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var, OP_NAMES};
use crate::data::{Batch, FeatureSlot, Targets};
use crate::error::{Error, Result};
use crate::losses::{contrast_total, scheme_triple, supervised_loss, total_loss, LossSpec, Scheme};
use crate::model::{ForwardMode, InputLayout, ModelConfig, ModelParams, TabDeco, Variant};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 5e-3;

/// A scalar function of the bound inputs.
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Backward rule to corrupt in the analytic pass.
    pub fault: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: OP_TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InputReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst entry.
    pub worst: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

fn evaluate(f: &LossFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok(g.scalar_value(out))
}

/// Compares analytic gradients of `f` at `inputs` with central differences.
/// The relative error of an entry is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(f: &LossFn, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradReport> {
    let first = evaluate(f, inputs)?;
    let second = evaluate(f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = match &opts.fault {
        Some(op) => Graph::<f64>::with_fault(op.clone()),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut rep = InputReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: 0,
        };
        for k in 0..input.numel() {
            let x = input.data()[k];
            probe[i].data_mut()[k] = x + opts.eps;
            let up = evaluate(f, &probe)?;
            probe[i].data_mut()[k] = x - opts.eps;
            let down = evaluate(f, &probe)?;
            probe[i].data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[i].data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            if rel > rep.max_rel_err || rel.is_nan() {
                rep.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                rep.worst = k;
            }
            rep.max_abs_err = rep.max_abs_err.max(abs);
        }
        reports.push(rep);
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        inputs: reports,
        max_rel_err,
        tol: opts.tol,
        passed: max_rel_err < opts.tol,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Op,
    Scheme,
    Model,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub report: GradReport,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ y` with fixed pseudo-random weights, so every output entry gets a
/// distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |i| {
        let mag = 0.3 + ((i * 37 + 11) % 17) as f64 / 10.0;
        if i % 3 == 0 {
            -mag
        } else {
            mag
        }
    });
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpCase = (Vec<Tensor<f64>>, Box<LossFn<'static>>);

/// Inputs and loss function exercising one op.
fn op_case(op: &str, rng: &mut ChaCha8Rng) -> OpCase {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| random(rng, s, -1.5, 1.5);
    match op {
        "add" => (
            vec![r(rng, &[3, 4]), r(rng, &[3, 4])],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                weighted(g, y)
            }),
        ),
        "sub" => (
            vec![r(rng, &[3, 4]), r(rng, &[3, 4])],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted(g, y)
            }),
        ),
        "mul" => (
            vec![r(rng, &[3, 4]), r(rng, &[3, 4])],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted(g, y)
            }),
        ),
        "scale" => (
            vec![r(rng, &[5])],
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.7);
                weighted(g, y)
            }),
        ),
        "exp" => (
            vec![r(rng, &[2, 3])],
            Box::new(|g, v| {
                let y = g.exp(v[0]);
                weighted(g, y)
            }),
        ),
        "log" => (
            vec![random(rng, &[2, 3], 0.5, 2.0)],
            Box::new(|g, v| {
                let y = g.log(v[0]);
                weighted(g, y)
            }),
        ),
        "relu" => (
            vec![away_from_zero(rng, &[2, 5])],
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                weighted(g, y)
            }),
        ),
        "gelu" => (
            vec![random(rng, &[2, 5], -3.0, 3.0)],
            Box::new(|g, v| {
                let y = g.gelu(v[0]);
                weighted(g, y)
            }),
        ),
        "sum" => (
            vec![r(rng, &[2, 3])],
            Box::new(|g, v| {
                let s = g.sum(v[0]);
                g.mul(s, s)
            }),
        ),
        "mean" => (
            vec![r(rng, &[2, 3])],
            Box::new(|g, v| {
                let s = g.mean(v[0]);
                g.mul(s, s)
            }),
        ),
        "sum_axis" => (
            vec![r(rng, &[2, 3, 4])],
            Box::new(|g, v| {
                let y = g.sum_axis(v[0], 1)?;
                weighted(g, y)
            }),
        ),
        "mean_axis" => (
            vec![r(rng, &[2, 3, 4])],
            Box::new(|g, v| {
                let y = g.mean_axis(v[0], 2)?;
                weighted(g, y)
            }),
        ),
        "concat" => (
            vec![r(rng, &[2, 3]), r(rng, &[2, 2])],
            Box::new(|g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                weighted(g, y)
            }),
        ),
        "reshape" => (
            vec![r(rng, &[2, 6])],
            Box::new(|g, v| {
                let y = g.reshape(v[0], &[3, 4])?;
                weighted(g, y)
            }),
        ),
        "permute" => (
            vec![r(rng, &[2, 3, 4])],
            Box::new(|g, v| {
                let y = g.permute(v[0], &[2, 0, 1])?;
                weighted(g, y)
            }),
        ),
        "narrow" => (
            vec![r(rng, &[3, 5])],
            Box::new(|g, v| {
                let y = g.narrow(v[0], 1, 1, 3)?;
                weighted(g, y)
            }),
        ),
        "gather_rows" => (
            vec![r(rng, &[4, 3])],
            Box::new(|g, v| {
                let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
                weighted(g, y)
            }),
        ),
        "matmul" => (
            vec![r(rng, &[2, 3, 4]), r(rng, &[4, 2]), r(rng, &[2, 2, 3])],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                let z = g.matmul(v[2], y)?;
                weighted(g, z)
            }),
        ),
        "softmax" => (
            vec![r(rng, &[3, 4])],
            Box::new(|g, v| {
                let y = g.softmax(v[0], 1)?;
                weighted(g, y)
            }),
        ),
        "log_softmax" => (
            vec![r(rng, &[4, 3])],
            Box::new(|g, v| {
                let y = g.log_softmax(v[0], 1)?;
                weighted(g, y)
            }),
        ),
        "layer_norm" => (
            vec![r(rng, &[3, 5]), random(rng, &[5], 0.5, 1.5), r(rng, &[5])],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted(g, y)
            }),
        ),
        "l2_normalize" => (
            vec![r(rng, &[3, 4])],
            Box::new(|g, v| {
                let y = g.l2_normalize(v[0], 1e-8)?;
                weighted(g, y)
            }),
        ),
        "cosine_sim" => (
            vec![r(rng, &[3, 4]), r(rng, &[3, 4])],
            Box::new(|g, v| {
                let y = g.cosine_sim(v[0], v[1], 1e-8)?;
                weighted(g, y)
            }),
        ),
        "add_bias" => (
            vec![r(rng, &[2, 3, 4]), r(rng, &[4])],
            Box::new(|g, v| {
                let y = g.add_bias(v[0], v[1])?;
                weighted(g, y)
            }),
        ),
        "take_along_last" => (
            vec![r(rng, &[2, 3, 4])],
            Box::new(|g, v| {
                let y = g.take_along_last(v[0], &[3, 0, 1, 1, 2, 0])?;
                weighted(g, y)
            }),
        ),
        "mask_fill" => (
            vec![r(rng, &[2, 3])],
            Box::new(|g, v| {
                let y = g.mask_fill(v[0], &[true, false, false, true, false, false], -2.0)?;
                weighted(g, y)
            }),
        ),
        "mul_const" => (
            vec![r(rng, &[2, 3])],
            Box::new(|g, v| {
                let y = g.mul_const(v[0], vec![0.0, 2.0, 1.0, -0.5, 2.0, 3.0])?;
                weighted(g, y)
            }),
        ),
        other => panic!("no gradient case for op `{other}`"),
    }
}

/// One check per differentiable op.
pub fn op_checks(fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut rng = stream(0, Purpose::Fixture);
    let opts = GradCheckOptions {
        fault: fault.map(str::to_owned),
        ..GradCheckOptions::default()
    };
    OP_NAMES
        .iter()
        .map(|&op| {
            let (inputs, f) = op_case(op, &mut rng);
            Ok(CheckResult {
                name: op.to_owned(),
                kind: CheckKind::Op,
                report: grad_check(f.as_ref(), &inputs, &opts)?,
            })
        })
        .collect()
}

/// One check per contrastive scheme: attract + repel + cross on random
/// `g`, `l` (and table) of shape `(b, m+1, d) = (3, 3, 4)`.
pub fn scheme_checks(fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut rng = stream(1, Purpose::Fixture);
    let opts = GradCheckOptions {
        fault: fault.map(str::to_owned),
        ..GradCheckOptions::default()
    };
    Scheme::ALL
        .iter()
        .map(|&scheme| {
            let mut inputs = vec![
                random(&mut rng, &[3, 3, 4], -1.0, 1.0),
                random(&mut rng, &[3, 3, 4], -1.0, 1.0),
            ];
            if scheme == Scheme::Gg {
                inputs.push(random(&mut rng, &[3, 4], -1.0, 1.0));
            }
            let spec = LossSpec::with_schemes([scheme]);
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let table = if v.len() > 2 {
                    v[2]
                } else {
                    g.constant(Tensor::ones([3, 4]))
                };
                let t = scheme_triple(g, scheme, v[0], v[1], table, &spec)?;
                t.sum(g)
            };
            Ok(CheckResult {
                name: format!("scheme_{scheme}"),
                kind: CheckKind::Scheme,
                report: grad_check(&f, &inputs, &opts)?,
            })
        })
        .collect()
}

/// A tiny model: one numerical and one categorical feature (m = 2).
pub fn tiny_model(variant: Variant) -> TabDeco {
    TabDeco::new(
        ModelConfig {
            d: 4,
            layers: 1,
            heads: 2,
            variant,
            ..ModelConfig::default()
        },
        InputLayout {
            features: vec![
                FeatureSlot::Numerical { offset: 0 },
                FeatureSlot::Categorical {
                    offset: 0,
                    cardinality: 3,
                },
            ],
            n_outputs: 2,
        },
    )
    .expect("valid tiny model")
}

pub fn tiny_batch() -> Batch {
    Batch {
        categorical: vec![0, 2, 1],
        numerical: vec![0.7, -1.1, 0.3],
        targets: Targets::Classes {
            labels: vec![1, 0, 1],
            n_classes: 2,
        },
        row_ids: vec![0, 1, 2],
        n_categorical: 1,
        n_numerical: 1,
    }
}

/// Full forward + supervised + all-scheme contrastive loss of the tiny
/// model, checked against every parameter.
pub fn model_check(variant: Variant, fault: Option<&str>) -> Result<CheckResult> {
    let model = tiny_model(variant);
    let params = model.init(3);
    let batch = tiny_batch();
    let spec = LossSpec {
        alpha: 1.0,
        ..LossSpec::with_schemes(Scheme::ALL)
    };
    let inputs: Vec<Tensor<f64>> = params.to_vec().into_iter().map(|t| t.cast()).collect();
    let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let mut it = v.iter().copied();
        let p: ModelParams<Var> = params.try_map(&mut |_, _| Ok(it.next().expect("one var per parameter")))?;
        let fwd = model.forward(g, &p, &batch, &mut ForwardMode::eval())?;
        let sup = supervised_loss(g, fwd.logits, &batch.targets)?;
        let c = contrast_total(g, fwd.global, fwd.local, p.global_table, &spec)?;
        total_loss(g, sup, c.total, spec.alpha)
    };
    let opts = GradCheckOptions {
        eps: 1e-5,
        tol: MODEL_TOLERANCE,
        fault: fault.map(str::to_owned),
    };
    Ok(CheckResult {
        name: format!("model_{}", variant.as_str()),
        kind: CheckKind::Model,
        report: grad_check(&f, &inputs, &opts)?,
    })
}

/// Every op, every scheme and the tiny model in all three variants.
pub fn run_suite(fault: Option<&str>) -> Result<Vec<CheckResult>> {
    if let Some(op) = fault {
        if !OP_NAMES.contains(&op) {
            return Err(Error::Config(format!("unknown op `{op}` for fault injection")));
        }
    }
    let mut out = op_checks(fault)?;
    out.extend(scheme_checks(fault)?);
    for variant in Variant::ALL {
        out.push(model_check(variant, fault)?);
    }
    Ok(out)
}

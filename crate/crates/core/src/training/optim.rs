//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First and second moments per parameter, and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = params
            .try_map(&mut |_, p| Ok(Tensor::zeros(p.shape().to_vec())))
            .expect("infallible");
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update. Every parameter needs a gradient.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams<Option<Tensor>>,
    state: &mut OptimizerState,
    config: &AdamWConfig,
) -> Result<()> {
    let grads = grads.try_map(&mut |name, g| g.as_ref().ok_or_else(|| Error::MissingGradient(name.to_owned())))?;
    let grads = grads.to_vec();
    let names = params.names();
    for ((name, p), g) in names.iter().zip(params.to_vec()).zip(&grads) {
        if g.shape() != p.shape() {
            return Err(Error::invalid(
                "adamw_step",
                format!("gradient {:?} for `{name}` of shape {:?}", g.shape(), p.shape()),
            ));
        }
    }
    let t = state.t + 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let lr = config.learning_rate;
    let decay = 1.0 - lr * config.weight_decay;
    let targets = params
        .to_vec_mut()
        .into_iter()
        .zip(state.m.to_vec_mut())
        .zip(state.v.to_vec_mut());
    for (((p, m), v), g) in targets.zip(grads) {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            let gk = gk as f64;
            let mk = b1 * md[k] as f64 + (1.0 - b1) * gk;
            let vk = b2 * vd[k] as f64 + (1.0 - b2) * gk * gk;
            md[k] = mk as f32;
            vd[k] = vk as f32;
            let step = lr * (mk / c1) / ((vk / c2).sqrt() + ADAM_EPS);
            pd[k] = (pd[k] as f64 * decay - step) as f32;
        }
    }
    state.t = t;
    Ok(())
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &ModelParams<Option<Tensor>>) -> f64 {
    grads
        .to_vec()
        .into_iter()
        .flatten()
        .flat_map(|t| t.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams<Option<Tensor>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        grads.for_each_mut(&mut |_, g| {
            if let Some(g) = g {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSlot;
    use crate::model::{InputLayout, ModelConfig, TabDeco};

    fn params() -> ModelParams {
        let m = TabDeco::new(
            ModelConfig {
                d: 4,
                layers: 1,
                heads: 2,
                ..ModelConfig::default()
            },
            InputLayout {
                features: vec![FeatureSlot::Numerical { offset: 0 }],
                n_outputs: 2,
            },
        )
        .unwrap();
        m.init(0)
    }

    fn filled(p: &ModelParams, v: f32) -> ModelParams {
        p.try_map(&mut |_, t| Ok(Tensor::full(t.shape().to_vec(), v))).unwrap()
    }

    fn some(p: &ModelParams) -> ModelParams<Option<Tensor>> {
        p.try_map(&mut |_, t| Ok(Some(t.clone()))).unwrap()
    }

    #[test]
    fn decay_only_step() {
        let mut p = filled(&params(), 1.0);
        let g = some(&filled(&p, 0.0));
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &g, &mut st, &AdamWConfig::default()).unwrap();
        assert_eq!(st.t, 1);
        for t in p.to_vec() {
            assert!(t.data().iter().all(|&v| v == 0.999_999f32));
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = filled(&params(), 0.0);
        let g = some(&filled(&p, 1.0));
        let mut st = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
        let expected = (-1e-4 / (1.0 + 1e-8)) as f32;
        for t in p.to_vec() {
            assert!(t.data().iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut p = params();
        let mut g = some(&p);
        g.global_table = None;
        let mut st = OptimizerState::new(&p);
        let before = p.clone();
        match adamw_step(&mut p, &g, &mut st, &AdamWConfig::default()) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "global_table"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let p = params();
        let mut g = some(&filled(&p, 1.0));
        let n = p.n_values() as f64;
        let before = clip_global_norm(&mut g, 5.0);
        assert!((before - n.sqrt()).abs() < 1e-9);
        assert!((global_norm(&g) - 5.0).abs() < 1e-4);
        let untouched = clip_global_norm(&mut g, 100.0);
        assert!((untouched - 5.0).abs() < 1e-4);
    }
}

//! Single-component optimization probe: random global and local embeddings
//! `[b, n, d]` are the free variables, and 50 plain gradient steps at lr 0.01
//! are taken on one InfoNCE component of the `all` scheme while tracking the
//! similarity that component acts on.

use rand_distr::{Distribution, StandardNormal};
use tabdeco_core::losses::{scheme_all, LossSpec};
use tabdeco_core::rng::{stream, Purpose};
use tabdeco_core::{Graph, Tensor};

pub const FIXTURE_SEED: u64 = 17;
pub const STEPS: usize = 50;
pub const LR: f64 = 0.01;
pub const SHAPE: [usize; 3] = [4, 3, 8];
/// Standard deviation of the random embeddings.
pub const SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Attract,
    Repel,
    Cross,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean cosine of the pairs `component` targets: cyclic next-instance pairs
/// of g (attract) or l (repel), and same-token g/l pairs (cross).
pub fn measure(component: Component, g: &Tensor<f64>, l: &Tensor<f64>) -> f64 {
    let [b, n, d] = SHAPE;
    let tok = |t: &Tensor<f64>, i: usize, j: usize| t.data()[(i * n + j) * d..(i * n + j + 1) * d].to_vec();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..n {
            total += match component {
                Component::Attract => cosine(&tok(g, i, j), &tok(g, (i + 1) % b, j)),
                Component::Repel => cosine(&tok(l, i, j), &tok(l, (i + 1) % b, j)),
                Component::Cross => cosine(&tok(g, i, j), &tok(l, i, j)),
            };
        }
    }
    total / (b * n) as f64
}

fn random_field(seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, Purpose::Fixture);
    Tensor::from_fn(SHAPE.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        SCALE * z
    })
}

/// Mean targeted cosine before and after descending on `component` alone.
pub fn run(component: Component) -> (f64, f64) {
    run_seeded(component, FIXTURE_SEED)
}

pub fn run_seeded(component: Component, seed: u64) -> (f64, f64) {
    let mut gt = random_field(2 * seed);
    let mut lt = random_field(2 * seed + 1);
    let before = measure(component, &gt, &lt);
    let spec = LossSpec::default();
    for _ in 0..STEPS {
        let mut g = Graph::<f64>::new();
        let gv = g.param(gt.clone());
        let lv = g.param(lt.clone());
        let t = scheme_all(&mut g, gv, lv, &spec).unwrap();
        let loss = match component {
            Component::Attract => t.attract,
            Component::Repel => t.repel,
            Component::Cross => t.cross,
        };
        g.backward(loss).unwrap();
        for (value, var) in [(&mut gt, gv), (&mut lt, lv)] {
            if let Some(grad) = g.grad(var) {
                for (x, dx) in value.data_mut().iter_mut().zip(grad.data()) {
                    *x -= LR * dx;
                }
            }
        }
    }
    (before, measure(component, &gt, &lt))
}

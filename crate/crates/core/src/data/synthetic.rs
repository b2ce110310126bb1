//! Bundled synthetic binary classification data: two informative numerical
//! features, four numerical noise features and two categorical features that
//! are independent of the label.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::RawTable;
use crate::error::Result;
use crate::rng::{stream, Purpose};

pub const LABEL: &str = "y";

/// How labels are drawn from the informative features `x0`, `x1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelRule {
    /// `y ~ Bernoulli(sigmoid(scale * (x0 - x1)))`.
    Logistic { scale: f64 },
    /// `y = [x0 - x1 > 0]`: linearly separable.
    Threshold,
}

impl Default for LabelRule {
    fn default() -> Self {
        LabelRule::Logistic { scale: 4.0 }
    }
}

pub fn generate(rows: usize, seed: u64, rule: LabelRule) -> Result<RawTable> {
    let mut rng = stream(seed, Purpose::Synthetic);
    let header = [
        "informative_0",
        "informative_1",
        "noise_0",
        "noise_1",
        "noise_2",
        "noise_3",
        "color",
        "shape",
        LABEL,
    ]
    .map(str::to_owned)
    .to_vec();
    const COLORS: [&str; 3] = ["red", "green", "blue"];
    const SHAPES: [&str; 4] = ["circle", "square", "triangle", "hexagon"];
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let x: [f64; 6] = std::array::from_fn(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            (v * 1e6).round() / 1e6
        });
        let color = COLORS[rng.random_range(0..COLORS.len())];
        let shape = SHAPES[rng.random_range(0..SHAPES.len())];
        let margin = x[0] - x[1];
        let y = match rule {
            LabelRule::Logistic { scale } => {
                let p = 1.0 / (1.0 + (-scale * margin).exp());
                rng.random::<f64>() < p
            }
            LabelRule::Threshold => margin > 0.0,
        };
        let mut row: Vec<String> = x.iter().map(|v| format!("{v:.6}")).collect();
        row.push(color.to_owned());
        row.push(shape.to_owned());
        row.push(if y { "1" } else { "0" }.to_owned());
        out.push(row);
    }
    RawTable::from_rows(header, out)
}

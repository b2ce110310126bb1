use rand::seq::SliceRandom;

use super::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// A mini-batch of encoded rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `size × n_categorical`, row-major.
    pub categorical: Vec<u32>,
    /// `size × n_numerical`, row-major.
    pub numerical: Vec<f32>,
    pub targets: Targets,
    pub row_ids: Vec<usize>,
    pub n_categorical: usize,
    pub n_numerical: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.row_ids.len()
    }

    pub fn from_dataset(dataset: &Dataset, positions: &[usize]) -> Batch {
        let sub = dataset.subset(positions);
        Batch {
            categorical: sub.categorical,
            numerical: sub.numerical,
            targets: sub.targets,
            row_ids: sub.row_ids,
            n_categorical: dataset.schema.n_categorical(),
            n_numerical: dataset.schema.n_numerical(),
        }
    }

    /// Reorders rows: row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Batch {
        let (mc, mn) = (self.n_categorical, self.n_numerical);
        Batch {
            categorical: order
                .iter()
                .flat_map(|&r| self.categorical[r * mc..(r + 1) * mc].iter().copied())
                .collect(),
            numerical: order
                .iter()
                .flat_map(|&r| self.numerical[r * mn..(r + 1) * mn].iter().copied())
                .collect(),
            targets: self.targets.subset(order),
            row_ids: order.iter().map(|&r| self.row_ids[r]).collect(),
            n_categorical: mc,
            n_numerical: mn,
        }
    }
}

/// Shuffle seed for a given epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ epoch as u64
}

/// Cuts `dataset` into batches of `size` rows, optionally in a seeded random
/// order. With `drop_last` the trailing partial batch is discarded.
pub fn batches(dataset: &Dataset, size: usize, shuffle: bool, seed: u64, drop_last: bool) -> Result<Vec<Batch>> {
    if size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if drop_last && size > dataset.len() {
        return Err(Error::Data(format!(
            "batch size {size} exceeds {} rows with drop_last set",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(&mut stream(seed, Purpose::Shuffle));
    }
    Ok(order
        .chunks(size)
        .filter(|c| !drop_last || c.len() == size)
        .map(|c| Batch::from_dataset(dataset, c))
        .collect())
}

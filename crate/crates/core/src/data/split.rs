use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Train/validation/test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.65,
            val: 0.15,
            test: 0.20,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| f.is_nan() || f <= 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be positive, got {parts:?}"
            )));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Partitions `0..n` by a seeded permutation. Validation and test get
/// `floor(f * n)` rows; train gets the rest. Each part is returned sorted.
pub fn split_indices(n: usize, fractions: SplitFractions, seed: u64) -> Result<[Vec<usize>; 3]> {
    fractions.validate()?;
    let n_val = (fractions.val * n as f64 + 1e-9).floor() as usize;
    let n_test = (fractions.test * n as f64 + 1e-9).floor() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Data(format!(
            "split of {n} rows leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, Purpose::Split));
    let mut train = perm[..n_train].to_vec();
    let mut val = perm[n_train..n_train + n_val].to_vec();
    let mut test = perm[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok([train, val, test])
}

/// Splits an encoded dataset into disjoint train/validation/test parts.
pub fn split(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<[Dataset; 3]> {
    let [a, b, c] = split_indices(dataset.len(), fractions, seed)?;
    Ok([dataset.subset(&a), dataset.subset(&b), dataset.subset(&c)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let [a, b, c] = split_indices(100, SplitFractions::default(), 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (65, 15, 20));
        let [a, b, c] = split_indices(10, SplitFractions::default(), 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
    }

    #[test]
    fn split_is_seeded_partition() {
        let first = split_indices(57, SplitFractions::default(), 9).unwrap();
        assert_eq!(first, split_indices(57, SplitFractions::default(), 9).unwrap());
        assert_ne!(first, split_indices(57, SplitFractions::default(), 10).unwrap());
        let mut all: Vec<usize> = first.concat();
        all.sort_unstable();
        assert_eq!(all, (0..57).collect::<Vec<_>>());
    }

    #[test]
    fn bad_fractions() {
        let bad = SplitFractions {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(split_indices(100, bad, 0).is_err());
        let neg = SplitFractions {
            train: 1.1,
            val: -0.1,
            test: 0.0,
        };
        assert!(split_indices(100, neg, 0).is_err());
        assert!(split_indices(4, SplitFractions::default(), 0).is_err());
    }
}

use rand::seq::SliceRandom;

use super::Split;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// Assigns each of `n` samples to a split after a seeded shuffle.
/// Validation and test counts are rounded down; the remainder goes to
/// training.
pub fn split_dataset(n: usize, fractions: SplitFractions, seed: u64) -> Result<Vec<Split>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let SplitFractions { train, val, test } = fractions;
    if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f))
        || (train + val + test - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be in [0,1] and sum to 1, got ({train}, {val}, {test})"
        )));
    }
    // the epsilon absorbs products such as 0.1 * 30 = 3.0000000000000004
    let n_val = (n as f64 * val + 1e-9).floor() as usize;
    let n_test = (n as f64 * test + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_val {
            out[i] = Split::Val;
        } else if rank < n_val + n_test {
            out[i] = Split::Test;
        }
    }
    Ok(out)
}

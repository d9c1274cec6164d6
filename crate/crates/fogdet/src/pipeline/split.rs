//! Deterministic train/valid/test splitting.
//!
//! The shuffle is driven by the `"split"` seed stream, so the partition
//! depends only on (seed, item count) — never on epoch order or on any
//! other randomness consumed elsewhere.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// A three-way partition of dataset indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle `0..n` with the `"split"` stream of `seed` and cut it into
/// train/valid/test according to `fractions` (train, valid, test).
///
/// Counts are `floor(n * fraction)` for the validation and test parts (with
/// a tiny epsilon so exact products like 0.1 * 10 do not round down), and
/// the remainder goes to train. Small sets therefore degrade gracefully:
/// 7 items at 80/10/10 yield 7/0/0.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be >= 0 and sum to 1, got {fractions:?}"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    let nonzero = fractions.iter().filter(|f| **f > 0.0).count();
    if n < nonzero {
        return Err(Error::invalid(format!(
            "{n} items cannot fill {nonzero} nonzero split parts"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, "split");
    order.shuffle(&mut rng);

    let n_valid = (n as f64 * fractions[1] + 1e-9).floor() as usize;
    let n_test = (n as f64 * fractions[2] + 1e-9).floor() as usize;
    let n_train = n - n_valid - n_test;

    let train = order[..n_train].to_vec();
    let valid = order[n_train..n_train + n_valid].to_vec();
    let test = order[n_train + n_valid..].to_vec();
    Ok(SplitIndices { train, valid, test })
}

/// Apply [`split_indices`] to a slice, cloning items into the three parts.
pub fn split_dataset<T: Clone>(
    items: &[T],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let idx = split_indices(items.len(), fractions, seed)?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((pick(&idx.train), pick(&idx.valid), pick(&idx.test)))
}

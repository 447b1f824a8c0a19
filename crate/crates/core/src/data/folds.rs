//! K-fold rotation over a pool of `n` examples.
//!
//! Validation blocks are contiguous and balanced: the first `n % k` folds
//! hold `ceil(n/k)` examples, the rest `floor(n/k)`. With a seed, the pool
//! is permuted once before it is cut into blocks.

use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid fold split: fold {fold} of k = {k} over n = {n} (need 0 <= fold < k <= n, k >= 2)")]
pub struct FoldError {
    pub n: usize,
    pub k: usize,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub n: usize,
    pub k: usize,
    pub fold_index: usize,
    pub val_ids: Vec<usize>,
    pub train_ids: Vec<usize>,
}

/// Index range of block `fold`.
pub fn block(n: usize, k: usize, fold: usize) -> std::ops::Range<usize> {
    let (base, extra) = (n / k, n % k);
    let start = fold * base + fold.min(extra);
    start..start + base + usize::from(fold < extra)
}

pub fn fold_split(n: usize, k: usize, fold_index: usize) -> Result<FoldPlan, FoldError> {
    split_order(&(0..n).collect::<Vec<_>>(), k, fold_index)
}

/// As [`fold_split`] after a seeded shuffle of `0..n`.
pub fn fold_split_shuffled(n: usize, k: usize, fold_index: usize, seed: u64) -> Result<FoldPlan, FoldError> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    split_order(&order, k, fold_index)
}

fn split_order(order: &[usize], k: usize, fold: usize) -> Result<FoldPlan, FoldError> {
    let n = order.len();
    if k < 2 || k > n || fold >= k {
        return Err(FoldError { n, k, fold });
    }
    let r = block(n, k, fold);
    let val_ids = order[r.clone()].to_vec();
    let train_ids = order[..r.start].iter().chain(&order[r.end..]).copied().collect();
    Ok(FoldPlan { n, k, fold_index: fold, val_ids, train_ids })
}

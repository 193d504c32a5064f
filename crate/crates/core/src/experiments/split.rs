use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Held-out test indices plus `k` validation folds over the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub test: Vec<usize>,
    /// Validation indices of each fold; together they partition the
    /// training-validation set.
    pub folds: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl FoldPlan {
    pub fn train_val(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    /// `(train, validation)` for fold `i`.
    pub fn fold(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let val = self.folds[i].clone();
        let mut train: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        train.sort_unstable();
        (train, val)
    }
}

/// Largest-remainder apportionment of `total` over `weights`; ties go to
/// the earlier entry.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((total * weights[i]) % sum));
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Stratified test split then stratified `k`-fold assignment.
///
/// The test size is `round(n * test_fraction)`, apportioned over classes by
/// largest remainder. The remaining samples of each class are shuffled and
/// dealt round-robin over the folds, continuing the deal across classes so
/// fold sizes differ by at most one.
pub fn stratified_split(labels: &[usize], k: usize, test_fraction: f64, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Config("stratification needs at least two classes".into()));
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let test_total = (labels.len() as f64 * test_fraction).round() as usize;
    let test_counts = apportion(test_total, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::with_capacity(test_total);
    let mut folds = vec![Vec::new(); k];
    let mut deal = 0;
    for ((class, members), &nt) in by_class.iter().zip(&test_counts) {
        if members.len() - nt < k {
            return Err(Error::Config(format!(
                "class {class} has {} training samples, fewer than {k} folds",
                members.len() - nt
            )));
        }
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        test.extend_from_slice(&shuffled[..nt]);
        for &i in &shuffled[nt..] {
            folds[deal % k].push(i);
            deal += 1;
        }
    }
    test.sort_unstable();
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldPlan {
        k,
        test,
        folds,
        labels: labels.to_vec(),
    })
}

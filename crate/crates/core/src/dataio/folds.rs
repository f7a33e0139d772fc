use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, SeedTree};
use crate::error::{Error, Result};

/// Fold labels in `1..=k`, one per unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    labels: Vec<usize>,
    k: usize,
    seed: u64,
}

impl FoldAssignment {
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Units in fold `fold` (1-based), ascending.
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == fold)
            .collect()
    }

    /// Units outside fold `fold`, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l - 1] += 1;
        }
        sizes
    }
}

/// Treatment-stratified fold assignment.
///
/// Treated units are shuffled and dealt round-robin to folds 1..k; control
/// units are shuffled and dealt continuing from where the treated units
/// stopped, so total fold sizes differ by at most one.
pub fn assign_folds(ds: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    assign_folds_by_treatment(ds.treatment(), k, seed)
}

pub(crate) fn assign_folds_by_treatment(
    treatment: &[u8],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    let n = treatment.len();
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!(
            "fold count {k} outside 2..={n}"
        )));
    }
    let mut treated: Vec<usize> = (0..n).filter(|&i| treatment[i] == 1).collect();
    let mut control: Vec<usize> = (0..n).filter(|&i| treatment[i] == 0).collect();
    if treated.len() < k || control.len() < k {
        return Err(Error::InfeasibleSplit(format!(
            "{} treated and {} control units cannot fill {k} folds with both arms",
            treated.len(),
            control.len()
        )));
    }
    let tree = SeedTree::new(seed).child(0xF01D);
    treated.shuffle(&mut tree.child(1).rng());
    control.shuffle(&mut tree.child(0).rng());

    let mut labels = vec![0; n];
    for (slot, &i) in treated.iter().chain(control.iter()).enumerate() {
        labels[i] = slot % k + 1;
    }
    Ok(FoldAssignment { labels, k, seed })
}

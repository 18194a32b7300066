use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::MultiSourceData;
use crate::error::{Result, WmdlError};
use crate::rng::{derive_seed, rng_from};

/// Per-row fold index for every source, aligned with
/// [`MultiSourceData::sources`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    g: usize,
    folds: Vec<Vec<usize>>,
}

impl FoldAssignment {
    /// Wraps precomputed fold indices. Every index must be below `g`.
    pub fn from_indices(g: usize, folds: Vec<Vec<usize>>) -> Result<Self> {
        if g < 2 {
            return Err(WmdlError::Config(format!("need at least 2 folds, got {g}")));
        }
        if folds.iter().flatten().any(|&f| f >= g) {
            return Err(WmdlError::Config("fold index out of range".into()));
        }
        Ok(FoldAssignment { g, folds })
    }

    pub fn n_folds(&self) -> usize {
        self.g
    }

    /// Fold indices of the source at position `pos`.
    pub fn of_source(&self, pos: usize) -> &[usize] {
        &self.folds[pos]
    }

    pub fn fold_sizes(&self, pos: usize) -> Vec<usize> {
        let mut sizes = vec![0; self.g];
        for &f in &self.folds[pos] {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Randomly partitions each source into `g` folds whose sizes differ by at most one.
pub fn split_folds(data: &MultiSourceData, g: usize, seed: u64) -> Result<FoldAssignment> {
    if g < 2 {
        return Err(WmdlError::Config(format!(
            "need at least 2 folds for cross-fitting, got {g}"
        )));
    }
    let mut folds = Vec::with_capacity(data.sources().len());
    for s in data.sources() {
        let n = s.len();
        if n < g {
            return Err(WmdlError::Config(format!(
                "source {} has {n} rows, fewer than {g} folds",
                s.id
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(derive_seed(seed, s.id as u64)));
        let mut f = vec![0; n];
        for (rank, &row) in order.iter().enumerate() {
            f[row] = rank % g;
        }
        folds.push(f);
    }
    Ok(FoldAssignment { g, folds })
}

//! Cross-fitting: each row's prediction comes from a model trained on the
//! other folds.

use serde::{Deserialize, Serialize};

use super::{fit_probability, fit_regression, LearnerSpec, ProbabilityModel, RegressionModel};
use crate::error::{Result, WmdlError};
use crate::matrix::Matrix;
use crate::parallel;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    /// Targets are 0/1 labels.
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum FoldModel {
    Regression(RegressionModel),
    Probability(ProbabilityModel),
}

impl FoldModel {
    pub fn predict_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            FoldModel::Regression(m) => m.predict_unchecked(x),
            FoldModel::Probability(m) => m.predict_unchecked(x),
        }
    }
}

/// Per-fold models plus the out-of-fold prediction at every training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFit {
    pub oof: Vec<f64>,
    pub models: Vec<FoldModel>,
}

impl CrossFit {
    /// Prediction at a point that belongs to fold `fold`.
    pub fn predict_in_fold(&self, fold: usize, x: &[f64]) -> f64 {
        self.models[fold].predict_unchecked(x)
    }

    /// Prediction at a new point: the average of all fold models.
    pub fn predict_new(&self, x: &[f64]) -> f64 {
        self.models.iter().map(|m| m.predict_unchecked(x)).sum::<f64>() / self.models.len() as f64
    }
}

/// Cross-fits `spec` over all rows.
pub fn cross_fit(
    spec: &LearnerSpec,
    features: &Matrix,
    targets: &[f64],
    weights: &[f64],
    folds: &[usize],
    n_folds: usize,
    task: Task,
) -> Result<CrossFit> {
    let eligible = vec![true; features.nrows()];
    cross_fit_with(spec, features, targets, weights, folds, n_folds, task, &eligible)
}

/// Cross-fits using only rows with `eligible[i]` for training, and returns
/// out-of-fold predictions at every row (eligible or not).
#[allow(clippy::too_many_arguments)]
pub fn cross_fit_with(
    spec: &LearnerSpec,
    features: &Matrix,
    targets: &[f64],
    weights: &[f64],
    folds: &[usize],
    n_folds: usize,
    task: Task,
    eligible: &[bool],
) -> Result<CrossFit> {
    let n = features.nrows();
    for len in [targets.len(), weights.len(), folds.len(), eligible.len()] {
        if len != n {
            return Err(WmdlError::Dimension { expected: n, got: len });
        }
    }
    if n_folds < 2 {
        return Err(WmdlError::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut sizes = vec![0usize; n_folds];
    for &f in folds {
        if f >= n_folds {
            return Err(WmdlError::Config(format!("fold index {f} out of range")));
        }
        sizes[f] += 1;
    }
    if let Some(k) = sizes.iter().position(|&c| c == 0) {
        return Err(WmdlError::Config(format!("fold {k} is empty")));
    }

    let models = parallel::try_map_range(n_folds, |k| {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != k && eligible[i]).collect();
        if train.is_empty() {
            return Err(WmdlError::Fit(format!("fold {k}: no training rows outside the fold")));
        }
        let x = features.select_rows(&train);
        let w: Vec<f64> = train.iter().map(|&i| weights[i]).collect();
        let fold_spec = spec.with_seed(derive_seed(spec.gbt.seed, k as u64));
        let model = match task {
            Task::Regression => {
                let y: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
                FoldModel::Regression(
                    fit_regression(&fold_spec, &x, &y, &w).map_err(|e| e.in_context(format!("fold {k}")))?,
                )
            }
            Task::Probability => {
                let y: Vec<bool> = train.iter().map(|&i| targets[i] > 0.5).collect();
                FoldModel::Probability(
                    fit_probability(&fold_spec, &x, &y, &w).map_err(|e| e.in_context(format!("fold {k}")))?,
                )
            }
        };
        Ok(model)
    })?;

    let oof = (0..n)
        .map(|i| models[folds[i]].predict_unchecked(features.row(i)))
        .collect();
    Ok(CrossFit { oof, models })
}

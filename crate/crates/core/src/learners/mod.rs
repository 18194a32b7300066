//! Supervised learners used for nuisance and final-stage fits.

mod crossfit;
mod gbt;
mod linear;

use serde::{Deserialize, Serialize};

pub use crossfit::{cross_fit, cross_fit_with, CrossFit, FoldModel, Task};
pub use gbt::{fit_gbt, GbtModel, GbtParams, Loss, TreeNode};
pub use linear::{fit_logistic, fit_weighted_ridge, Basis, LinearModel};

use crate::error::{Result, WmdlError};
use crate::matrix::Matrix;

pub const DEFAULT_CLIP: f64 = 0.01;

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Linear,
    Poly2,
    Gbt,
}

/// Learner family and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    #[serde(default)]
    pub ridge_penalty: f64,
    #[serde(default)]
    pub gbt: GbtParams,
    /// Probability outputs are clipped to `[clip, 1 - clip]`.
    #[serde(default = "default_clip")]
    pub clip: f64,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec::gbt(GbtParams::default())
    }
}

impl LearnerSpec {
    pub fn linear() -> Self {
        LearnerSpec {
            kind: LearnerKind::Linear,
            ridge_penalty: 0.0,
            gbt: GbtParams::default(),
            clip: DEFAULT_CLIP,
        }
    }

    pub fn poly2() -> Self {
        LearnerSpec {
            kind: LearnerKind::Poly2,
            ..LearnerSpec::linear()
        }
    }

    pub fn gbt(params: GbtParams) -> Self {
        LearnerSpec {
            kind: LearnerKind::Gbt,
            ridge_penalty: 0.0,
            gbt: params,
            clip: DEFAULT_CLIP,
        }
    }

    pub fn with_penalty(mut self, penalty: f64) -> Self {
        self.ridge_penalty = penalty;
        self
    }

    /// Copy with the boosting seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.gbt.seed = seed;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_penalty >= 0.0) {
            return Err(WmdlError::Config("ridge_penalty must be nonnegative".into()));
        }
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(WmdlError::Config("clip must lie in (0, 0.5)".into()));
        }
        if self.kind == LearnerKind::Gbt {
            self.gbt.validate()?;
        }
        Ok(())
    }

    fn basis(&self) -> Option<Basis> {
        match self.kind {
            LearnerKind::Linear => Some(Basis::Linear),
            LearnerKind::Poly2 => Some(Basis::Poly2),
            LearnerKind::Gbt => None,
        }
    }
}

/// Fitted real-valued regression function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegressionModel {
    Linear(LinearModel),
    Gbt(GbtModel),
}

impl RegressionModel {
    pub fn n_features(&self) -> usize {
        match self {
            RegressionModel::Linear(m) => m.n_features,
            RegressionModel::Gbt(m) => m.n_features,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.n_features(), x)?;
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            RegressionModel::Linear(m) => m.decision(x),
            RegressionModel::Gbt(m) => m.raw_score(x),
        }
    }
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(WmdlError::Dimension {
            expected,
            got: x.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScoreModel {
    Logistic(LinearModel),
    Gbt(GbtModel),
}

/// Fitted `P(label = 1 | x)`, clipped to `[clip, 1 - clip]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityModel {
    pub score: ScoreModel,
    pub clip: f64,
}

impl ProbabilityModel {
    pub fn n_features(&self) -> usize {
        match &self.score {
            ScoreModel::Logistic(m) => m.n_features,
            ScoreModel::Gbt(m) => m.n_features,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.n_features(), x)?;
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let t = match &self.score {
            ScoreModel::Logistic(m) => m.decision(x),
            ScoreModel::Gbt(m) => m.raw_score(x),
        };
        let p = 1.0 / (1.0 + (-t).exp());
        p.clamp(self.clip, 1.0 - self.clip)
    }
}

fn check_inputs(features: &Matrix, n_targets: usize, weights: &[f64]) -> Result<()> {
    let n = features.nrows();
    if n == 0 {
        return Err(WmdlError::Fit("no training rows".into()));
    }
    if n_targets != n {
        return Err(WmdlError::Dimension {
            expected: n,
            got: n_targets,
        });
    }
    if weights.len() != n {
        return Err(WmdlError::Dimension {
            expected: n,
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(WmdlError::Fit("weights must be finite and nonnegative".into()));
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(WmdlError::Fit("all weights are zero".into()));
    }
    Ok(())
}

/// Weighted squared-error regression.
///
/// Linear kinds return the exact minimizer of
/// `sum_i w_i (y_i - phi(x_i)' theta)^2 + ridge_penalty * |theta|^2`
/// (minimum-norm when rank deficient); `gbt` boosts with weighted leaves.
pub fn fit_regression(
    spec: &LearnerSpec,
    features: &Matrix,
    targets: &[f64],
    weights: &[f64],
) -> Result<RegressionModel> {
    spec.validate()?;
    check_inputs(features, targets.len(), weights)?;
    match spec.basis() {
        Some(b) => Ok(RegressionModel::Linear(fit_weighted_ridge(
            b,
            features,
            targets,
            weights,
            spec.ridge_penalty,
        )?)),
        None => Ok(RegressionModel::Gbt(fit_gbt(
            &spec.gbt,
            Loss::Squared,
            features,
            targets,
            weights,
        )?)),
    }
}

/// Weighted binary classifier with clipped probability output.
pub fn fit_probability(
    spec: &LearnerSpec,
    features: &Matrix,
    labels: &[bool],
    weights: &[f64],
) -> Result<ProbabilityModel> {
    spec.validate()?;
    check_inputs(features, labels.len(), weights)?;
    for class in [true, false] {
        if !labels.iter().zip(weights).any(|(&l, &w)| l == class && w > 0.0) {
            return Err(WmdlError::Fit(format!(
                "labels contain no {} class",
                if class { "positive" } else { "negative" }
            )));
        }
    }
    let score = match spec.basis() {
        Some(b) => ScoreModel::Logistic(fit_logistic(b, features, labels, weights, spec.ridge_penalty)?),
        None => {
            let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
            ScoreModel::Gbt(fit_gbt(&spec.gbt, Loss::Logistic, features, &y, weights)?)
        }
    };
    Ok(ProbabilityModel {
        score,
        clip: spec.clip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn constant_target_recovered() {
        let vals = vec![0.0, 1.0, 2.0, -1.0, 4.0, 3.0, 1.5, 0.5, -2.0, 2.5, 0.3, -0.7, 1.1, 2.2, -1.4, 0.9];
        let x = Matrix::from_vec(8, 2, vals).unwrap();
        for spec in [LearnerSpec::linear(), LearnerSpec::poly2(), LearnerSpec::default()] {
            let m = fit_regression(&spec, &x, &[3.0; 8], &[1.0; 8]).unwrap();
            assert!((m.predict(&[7.0, -2.0]).unwrap() - 3.0).abs() < 1e-8, "{:?}", spec.kind);
        }
    }

    #[test]
    fn predict_checks_dimension() {
        let x = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let m = fit_regression(&LearnerSpec::linear(), &x, &[1.0, 3.0, 5.0], &[1.0; 3]).unwrap();
        assert!((m.predict(&[3.0]).unwrap() - 7.0).abs() < 1e-10);
        assert!(matches!(m.predict(&[1.0, 2.0]), Err(WmdlError::Dimension { .. })));
    }

    #[test]
    fn single_class_probability_fit_names_class() {
        let x = Matrix::zeros(4, 1);
        let err = fit_probability(&LearnerSpec::linear(), &x, &[true; 4], &[1.0; 4]).unwrap_err();
        assert!(err.to_string().contains("negative"));
    }

    #[test]
    fn balanced_noise_labels_give_half() {
        let mut rng = rng_from(11);
        let n = 2000;
        let x = Matrix::from_vec(n, 1, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let m = fit_probability(&LearnerSpec::linear(), &x, &labels, &vec![1.0; n]).unwrap();
        for v in [-0.9, 0.0, 0.9] {
            assert!((m.predict(&[v]).unwrap() - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn separable_labels_stay_within_clip() {
        let n = 200;
        let x = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64 / n as f64 - 0.5).collect()).unwrap();
        let labels: Vec<bool> = x.rows().map(|r| r[0] > 0.0).collect();
        for spec in [LearnerSpec::linear().with_penalty(1e-2), LearnerSpec::default()] {
            let m = fit_probability(&spec, &x, &labels, &vec![1.0; n]).unwrap();
            if let ScoreModel::Logistic(lm) = &m.score {
                assert!(lm.coef.iter().all(|c| c.is_finite()));
            }
            for r in x.rows() {
                let p = m.predict(r).unwrap();
                assert!((0.01..=0.99).contains(&p));
            }
            assert_eq!(m.predict(&[0.5]).unwrap(), 0.99);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(LearnerSpec::linear().with_penalty(-1.0).validate().is_err());
        let s = LearnerSpec {
            clip: 0.5,
            ..LearnerSpec::default()
        };
        assert!(s.validate().is_err());
        let j: LearnerSpec = serde_json::from_str(r#"{"kind":"gbt","gbt":{"n_rounds":10}}"#).unwrap();
        assert_eq!(j.gbt.n_rounds, 10);
        assert_eq!(j.gbt.max_depth, 3);
        assert_eq!(j.clip, DEFAULT_CLIP);
    }
}

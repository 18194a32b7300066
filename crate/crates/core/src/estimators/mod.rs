//! Treatment-effect estimators.
//!
//! Direct learners (`wmdl`, `mdl`, `wdl`, `dl`) regress the pseudo-outcome
//! `A (Y - m_s)` on `X` with weights `w_s(X) / p_{A|s}`; `mdl`/`dl` use the
//! constant source weight and `wdl`/`dl` use only the target source.
//! Meta-learners (`t_learner`, `s_learner`, `x_learner`) pool all sources,
//! optionally with a one-hot source indicator. Every estimator returns the
//! treatment effect function `delta` (half the CATE).

mod direct;
mod meta;
mod persist;

use serde::{Deserialize, Serialize};

pub use direct::{build_pseudo_samples, PseudoSample};
pub use persist::{load_estimate, save_estimate, MODEL_FORMAT_VERSION};

use crate::data::{split_folds, EffectMode, MultiSourceData};
use crate::diagnostics::FitDiagnostics;
use crate::error::{Result, WmdlError};
use crate::learners::{GbtParams, LearnerSpec, ProbabilityModel, RegressionModel};
use crate::nuisance::{KnownPropensity, MainEffectSource, PropensitySource, DEFAULT_V_FLOOR};
use crate::rng::derive_seed;
use crate::weighting::{WeightKind, WeightSpec};

pub const DEFAULT_FOLDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Wmdl,
    Mdl,
    Wdl,
    Dl,
    TLearner,
    SLearner,
    XLearner,
}

impl Method {
    pub fn is_direct(self) -> bool {
        matches!(self, Method::Wmdl | Method::Mdl | Method::Wdl | Method::Dl)
    }

    pub fn single_source(self) -> bool {
        matches!(self, Method::Wdl | Method::Dl)
    }

    pub fn constant_weights(self) -> bool {
        matches!(self, Method::Mdl | Method::Dl)
    }

    /// Short display label, e.g. `TL-s` for a T-learner with source indicator.
    pub fn label(self, include_source_indicator: bool) -> String {
        let base = match self {
            Method::Wmdl => "WMDL",
            Method::Mdl => "MDL",
            Method::Wdl => "WDL",
            Method::Dl => "DL",
            Method::TLearner => "TL",
            Method::SLearner => "SL",
            Method::XLearner => "XL",
        };
        if include_source_indicator && !self.is_direct() {
            format!("{base}-s")
        } else {
            base.to_string()
        }
    }
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}
fn default_v_floor() -> f64 {
    DEFAULT_V_FLOOR
}
fn default_weights() -> WeightSpec {
    WeightSpec::information_aware()
}
/// Squared residuals are noisy; a short boosting run keeps `V` smooth.
pub fn default_variance_learner() -> LearnerSpec {
    LearnerSpec::gbt(GbtParams {
        n_rounds: 50,
        ..GbtParams::default()
    })
}

/// Final-stage learner for heterogeneous fits. Source effects enter through
/// one-hot columns and only show up in deeper interactions.
pub fn heterogeneous_final_learner() -> LearnerSpec {
    LearnerSpec::gbt(GbtParams {
        max_depth: 5,
        n_rounds: 800,
        ..GbtParams::default()
    })
}

pub fn default_selection_learner() -> LearnerSpec {
    LearnerSpec::linear()
}

fn default_effect_mode() -> EffectMode {
    EffectMode::Homogeneous
}

/// Everything needed to fit one estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub method: Method,
    #[serde(default)]
    pub include_source_indicator: bool,
    /// Source weight for `wmdl`/`wdl`; `mdl`/`dl` always use the constant weight.
    #[serde(default = "default_weights")]
    pub weight_spec: WeightSpec,
    #[serde(default)]
    pub nuisance_learner: LearnerSpec,
    #[serde(default)]
    pub final_learner: LearnerSpec,
    /// Learner for the squared-residual regression behind `V_{a|s}(X)`.
    #[serde(default = "default_variance_learner")]
    pub variance_learner: LearnerSpec,
    /// Learner for the one-vs-rest selection propensities `pi_s(X)`.
    #[serde(default = "default_selection_learner")]
    pub selection_learner: LearnerSpec,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_effect_mode")]
    pub effect_mode: EffectMode,
    #[serde(default = "default_v_floor")]
    pub v_floor: f64,
    #[serde(default)]
    pub main_effect: MainEffectSource,
    #[serde(default)]
    pub propensity: PropensitySource,
    #[serde(default)]
    pub seed: u64,
    /// `P(A = +1 | X)` for [`PropensitySource::Known`]; not serialized.
    #[serde(skip)]
    pub known_propensity: Option<KnownPropensity>,
}

impl EstimatorSpec {
    pub fn new(method: Method) -> Self {
        EstimatorSpec {
            method,
            include_source_indicator: false,
            weight_spec: default_weights(),
            nuisance_learner: LearnerSpec::default(),
            final_learner: LearnerSpec::default(),
            variance_learner: default_variance_learner(),
            selection_learner: default_selection_learner(),
            folds: DEFAULT_FOLDS,
            effect_mode: EffectMode::Homogeneous,
            v_floor: DEFAULT_V_FLOOR,
            main_effect: MainEffectSource::Estimated,
            propensity: PropensitySource::Estimated,
            seed: 0,
            known_propensity: None,
        }
    }

    pub fn with_source_indicator(mut self) -> Self {
        self.include_source_indicator = true;
        self
    }

    pub fn with_effect_mode(mut self, mode: EffectMode) -> Self {
        self.effect_mode = mode;
        self
    }

    pub fn with_weights(mut self, w: WeightSpec) -> Self {
        self.weight_spec = w;
        self
    }

    pub fn with_learners(mut self, nuisance: LearnerSpec, final_stage: LearnerSpec) -> Self {
        self.nuisance_learner = nuisance;
        self.final_learner = final_stage;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Randomized design: the caller asserts that treatment
    /// depends on `X` only and supplies `P(A = +1 | X)`.
    pub fn with_known_propensity(mut self, p: KnownPropensity) -> Self {
        self.propensity = PropensitySource::Known;
        self.known_propensity = Some(p);
        self
    }

    pub fn label(&self) -> String {
        self.method.label(self.include_source_indicator)
    }

    /// Weight spec actually used: constant for `mdl`/`dl`.
    pub fn effective_weights(&self) -> WeightSpec {
        if self.method.constant_weights() {
            WeightSpec {
                kind: WeightKind::Constant,
                ..self.weight_spec.clone()
            }
        } else {
            self.weight_spec.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.nuisance_learner.validate()?;
        self.final_learner.validate()?;
        self.variance_learner.validate()?;
        self.selection_learner.validate()?;
        self.weight_spec.validate()?;
        if self.method.is_direct() && self.folds < 2 {
            return Err(WmdlError::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if !(self.v_floor > 0.0) {
            return Err(WmdlError::Config("v_floor must be positive".into()));
        }
        if self.propensity == PropensitySource::Known && self.known_propensity.is_none() {
            return Err(WmdlError::Config(
                "known propensity mode needs a supplied propensity function".into(),
            ));
        }
        if let PropensitySource::Constant { value } = self.propensity {
            if !(value > 0.0 && value < 1.0) {
                return Err(WmdlError::Config("constant propensity must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    Homogeneous,
    Heterogeneous,
    SingleSource,
    Transfer,
}

/// Fitted model behind a [`CateEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CateModel {
    Direct {
        delta: RegressionModel,
    },
    TLearner {
        treated: RegressionModel,
        control: RegressionModel,
    },
    /// Treatment enters as a trailing `+1/-1` feature.
    SLearner {
        outcome: RegressionModel,
    },
    XLearner {
        /// Fitted on treated rows' imputed effects `Y - mu_{-1}(X)`.
        tau_treated: RegressionModel,
        /// Fitted on control rows' imputed effects `mu_1(X) - Y`.
        tau_control: RegressionModel,
        propensity: ProbabilityModel,
    },
}

/// Fitted treatment effect function `delta(x)` or `delta(x, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateEstimate {
    pub method: Method,
    pub mode: EstimateMode,
    pub target_source: usize,
    pub d_x: usize,
    /// Source ids in one-hot column order, when the model takes a source indicator.
    pub source_encoding: Option<Vec<usize>>,
    pub model: CateModel,
}

impl CateEstimate {
    fn features(&self, x: &[f64], s: Option<usize>) -> Result<Vec<f64>> {
        if x.len() != self.d_x {
            return Err(WmdlError::Dimension {
                expected: self.d_x,
                got: x.len(),
            });
        }
        let mut f = x.to_vec();
        if let Some(enc) = &self.source_encoding {
            let s = match (s, self.mode) {
                (Some(s), _) => s,
                (None, EstimateMode::Heterogeneous) => {
                    return Err(WmdlError::Usage(
                        "heterogeneous estimate needs a source id".into(),
                    ))
                }
                (None, _) => self.target_source,
            };
            let col = enc.iter().position(|&id| id == s).ok_or_else(|| {
                WmdlError::Usage(format!("source {s} was not seen during fitting"))
            })?;
            f.extend((0..enc.len()).map(|j| if j == col { 1.0 } else { 0.0 }));
        } else if self.mode == EstimateMode::Heterogeneous && s.is_none() {
            return Err(WmdlError::Usage("heterogeneous estimate needs a source id".into()));
        }
        Ok(f)
    }

    /// `delta(x[, s])`. `s` is required for heterogeneous estimates and
    /// defaults to the target source otherwise.
    pub fn predict_delta(&self, x: &[f64], s: Option<usize>) -> Result<f64> {
        let f = self.features(x, s)?;
        Ok(match &self.model {
            CateModel::Direct { delta } => delta.predict_unchecked(&f),
            CateModel::TLearner { treated, control } => {
                0.5 * (treated.predict_unchecked(&f) - control.predict_unchecked(&f))
            }
            CateModel::SLearner { outcome } => {
                let mut g = f;
                g.push(1.0);
                let up = outcome.predict_unchecked(&g);
                *g.last_mut().unwrap() = -1.0;
                0.5 * (up - outcome.predict_unchecked(&g))
            }
            CateModel::XLearner {
                tau_treated,
                tau_control,
                propensity,
            } => {
                let g = propensity.predict_unchecked(&f);
                0.5 * (g * tau_control.predict_unchecked(&f)
                    + (1.0 - g) * tau_treated.predict_unchecked(&f))
            }
        })
    }

    /// The CATE, `2 * delta`.
    pub fn predict_tau(&self, x: &[f64], s: Option<usize>) -> Result<f64> {
        Ok(2.0 * self.predict_delta(x, s)?)
    }
}

/// Fits `spec` on `data`.
pub fn fit(data: &MultiSourceData, spec: &EstimatorSpec) -> Result<CateEstimate> {
    fit_with_diagnostics(data, spec).map(|(e, _)| e)
}

/// Fits `spec` and returns nuisance and weight diagnostics alongside.
pub fn fit_with_diagnostics(
    data: &MultiSourceData,
    spec: &EstimatorSpec,
) -> Result<(CateEstimate, FitDiagnostics)> {
    spec.validate()?;
    if spec.method.is_direct() {
        direct::fit_direct(data, spec)
    } else {
        meta::fit_meta(data, spec)
    }
}

pub(crate) fn fold_seed(spec: &EstimatorSpec) -> u64 {
    derive_seed(spec.seed, 1)
}

pub(crate) fn nuisance_learner(spec: &EstimatorSpec) -> LearnerSpec {
    spec.nuisance_learner.with_seed(derive_seed(spec.seed, 2))
}

pub(crate) fn final_learner(spec: &EstimatorSpec) -> LearnerSpec {
    spec.final_learner.with_seed(derive_seed(spec.seed, 3))
}

pub(crate) fn split(data: &MultiSourceData, spec: &EstimatorSpec) -> Result<crate::data::FoldAssignment> {
    split_folds(data, spec.folds, fold_seed(spec))
}

/// Appends one-hot indicators of `s` over `ids`.
pub(crate) fn one_hot(ids: &[usize], s: usize) -> impl Iterator<Item = f64> + '_ {
    ids.iter().map(move |&id| if id == s { 1.0 } else { 0.0 })
}

//! Source weights `w_s(X) = R_s(X) * I_s(X)`.
//!
//! The transfer term `R_s(X) = f(X | S = t) / f(X | S = s)` moves source `s`
//! toward the target population `t`; it is computed from selection
//! propensities as `(P(S=s) / P(S=t)) * pi_t(X) / pi_s(X)`, or from exact
//! densities when the data's oracle provides them. The information term
//! `I_s(X) = [V_{1|s}/p_{1|s} + V_{-1|s}/p_{-1|s}]^{-1}` rewards balanced
//! treatment assignment and low outcome noise.

use serde::{Deserialize, Serialize};

use crate::data::{MultiSourceData, Treatment, TRANSFER_TARGET};
use crate::error::{Result, WmdlError};
use crate::nuisance::NuisanceSet;

pub const DEFAULT_TRUNCATION: f64 = 0.995;

fn default_truncation() -> Option<f64> {
    Some(DEFAULT_TRUNCATION)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `w_s = 1`.
    Constant,
    /// Transfer and information terms toward a target source with outcomes.
    InformationAware,
    /// Transfer and information terms toward a covariates-only source 0.
    Transfer,
}

/// How the transfer term's density ratio is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioSource {
    #[default]
    SelectionPropensity,
    /// Exact ratio from the data's oracle.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub kind: WeightKind,
    /// Defaults to 0 for `transfer`, otherwise to the data's target source.
    #[serde(default)]
    pub target_source: Option<usize>,
    /// Combined weights above this batch quantile are capped; `None` disables.
    #[serde(default = "default_truncation")]
    pub truncation_quantile: Option<f64>,
    #[serde(default)]
    pub ratio: RatioSource,
}

impl WeightSpec {
    pub fn constant() -> Self {
        WeightSpec {
            kind: WeightKind::Constant,
            target_source: None,
            truncation_quantile: default_truncation(),
            ratio: RatioSource::SelectionPropensity,
        }
    }

    pub fn information_aware() -> Self {
        WeightSpec {
            kind: WeightKind::InformationAware,
            ..WeightSpec::constant()
        }
    }

    pub fn transfer() -> Self {
        WeightSpec {
            kind: WeightKind::Transfer,
            ..WeightSpec::constant()
        }
    }

    pub fn without_truncation(mut self) -> Self {
        self.truncation_quantile = None;
        self
    }

    pub fn needs_nuisances(&self) -> bool {
        self.kind != WeightKind::Constant
    }

    /// Target population the weights point to.
    pub fn resolve_target(&self, data: &MultiSourceData) -> Result<usize> {
        let target = match (self.kind, self.target_source) {
            (_, Some(t)) => t,
            (WeightKind::Transfer, None) => TRANSFER_TARGET,
            (_, None) if data.is_transfer() => 1,
            (_, None) => data.target_source(),
        };
        if self.kind == WeightKind::Transfer && !data.is_transfer() {
            return Err(WmdlError::Config(format!(
                "transfer weights need covariates-only rows for target source {TRANSFER_TARGET}"
            )));
        }
        match data.source(target) {
            Some(s) if !s.is_empty() => Ok(target),
            _ => Err(WmdlError::Config(format!(
                "target source {target} has no covariate rows"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(q) = self.truncation_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return Err(WmdlError::Config("truncation_quantile must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// `R_s(x)`, `I_s(x)` and their product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightComponents {
    pub transfer_term: f64,
    pub information_term: f64,
    pub combined: f64,
}

impl WeightComponents {
    pub fn new(transfer_term: f64, information_term: f64) -> Self {
        WeightComponents {
            transfer_term,
            information_term,
            combined: transfer_term * information_term,
        }
    }
}

/// `[V_1 / p_1 + V_{-1} / (1 - p_1)]^{-1}`
pub fn information_term(v_treated: f64, v_control: f64, p_treated: f64) -> f64 {
    1.0 / (v_treated / p_treated + v_control / (1.0 - p_treated))
}

/// `(share_s / share_t) * pi_t / pi_s`
pub fn transfer_term(share_s: f64, share_t: f64, pi_s: f64, pi_t: f64) -> f64 {
    (share_s / share_t) * (pi_t / pi_s)
}

/// The constant weight: `R = I = w = 1`.
pub fn constant_weight(_s: usize, _x: &[f64]) -> WeightComponents {
    WeightComponents::new(1.0, 1.0)
}

fn ratio_at(
    data: &MultiSourceData,
    nuisances: &NuisanceSet,
    ratio: RatioSource,
    s: usize,
    target: usize,
    x: &[f64],
    pi: Option<&[f64]>,
) -> Result<f64> {
    if s == target {
        return Ok(1.0);
    }
    match ratio {
        RatioSource::Oracle => data
            .oracle()
            .and_then(|o| o.density_ratio(target, s, x))
            .ok_or_else(|| WmdlError::Config("oracle density ratio unavailable".into())),
        RatioSource::SelectionPropensity => {
            let sel = nuisances.selection.as_ref().ok_or_else(|| {
                WmdlError::Internal("selection propensities were not estimated".into())
            })?;
            let (cs, ct) = match (sel.column(s), sel.column(target)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(WmdlError::Config(format!(
                        "no selection propensity for source {s} or target {target}"
                    )))
                }
            };
            let owned;
            let pi = match pi {
                Some(p) => p,
                None => {
                    owned = sel.predict_new(x);
                    &owned
                }
            };
            let share = |id| {
                nuisances
                    .share(id)
                    .ok_or_else(|| WmdlError::Internal(format!("no share for source {id}")))
            };
            Ok(transfer_term(share(s)?, share(target)?, pi[cs], pi[ct]))
        }
    }
}

/// Weight components at a new point `x` for source `s`, from the fitted
/// (fold-averaged) nuisance models.
pub fn information_weight(
    data: &MultiSourceData,
    s: usize,
    x: &[f64],
    nuisances: &NuisanceSet,
    target: usize,
    ratio: RatioSource,
) -> Result<WeightComponents> {
    if data.source(target).is_none_or(|t| t.is_empty()) {
        return Err(WmdlError::Config(format!("target source {target} has no covariate rows")));
    }
    let missing = || WmdlError::Internal(format!("weighting nuisances missing for source {s}"));
    let v1 = nuisances.v_hat(s, Treatment::Treated, x).ok_or_else(missing)?;
    let v0 = nuisances.v_hat(s, Treatment::Control, x).ok_or_else(missing)?;
    let p1 = nuisances.p_marg(s, Treatment::Treated, x).ok_or_else(missing)?;
    let r = ratio_at(data, nuisances, ratio, s, target, x, None)?;
    Ok(WeightComponents::new(r, information_term(v1, v0, p1)))
}

/// Per-row weights for every source with outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights {
    /// Aligned with `data.sources()`; empty for covariates-only sources.
    pub weights: Vec<Vec<f64>>,
    /// Pre-truncation components, same layout as `weights`.
    pub components: Vec<Vec<WeightComponents>>,
    pub target: Option<usize>,
    pub cap: Option<f64>,
    pub n_truncated: usize,
}

impl BatchWeights {
    pub fn flat(&self) -> Vec<f64> {
        self.weights.iter().flatten().copied().collect()
    }
}

/// Nearest-rank empirical quantile.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Evaluates `spec`'s weight at every outcome row using out-of-fold
/// nuisances, caps at the configured quantile and rescales to pooled mean 1.
pub fn batch_weights(
    data: &MultiSourceData,
    nuisances: &NuisanceSet,
    spec: &WeightSpec,
) -> Result<BatchWeights> {
    spec.validate()?;
    let mut components: Vec<Vec<WeightComponents>> = Vec::with_capacity(data.sources().len());
    let target = if spec.kind == WeightKind::Constant {
        None
    } else {
        Some(spec.resolve_target(data)?)
    };
    for (pos, src) in data.sources().iter().enumerate() {
        if !src.has_outcomes() {
            components.push(Vec::new());
            continue;
        }
        let Some(target) = target else {
            components.push((0..src.len()).map(|i| constant_weight(src.id, src.x.row(i))).collect());
            continue;
        };
        let nu = nuisances
            .source(src.id)
            .ok_or_else(|| WmdlError::Internal(format!("no nuisances for source {}", src.id)))?;
        let missing = || WmdlError::Internal(format!("weighting nuisances missing for source {}", src.id));
        let var = nu.variance.as_ref().ok_or_else(missing)?;
        let pm = nu.p_marg.as_ref().ok_or_else(missing)?;
        let mut row = Vec::with_capacity(src.len());
        for i in 0..src.len() {
            let x = src.x.row(i);
            let pi = nuisances.selection.as_ref().map(|sel| sel.oof[pos][i].as_slice());
            let r = ratio_at(data, nuisances, spec.ratio, src.id, target, x, pi)?;
            let info = information_term(var[0].oof[i], var[1].oof[i], pm.oof[i]);
            row.push(WeightComponents::new(r, info));
        }
        components.push(row);
    }

    let all: Vec<f64> = components.iter().flatten().map(|c| c.combined).collect();
    if let Some(bad) = all.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(WmdlError::Internal(format!("invalid weight {bad}")));
    }
    let cap = match spec.truncation_quantile {
        Some(q) if spec.kind != WeightKind::Constant => Some(quantile(&all, q)),
        _ => None,
    };
    let n_truncated = cap.map_or(0, |c| all.iter().filter(|&&w| w > c).count());
    let capped = |w: f64| cap.map_or(w, |c| w.min(c));
    let total: f64 = all.iter().map(|&w| capped(w)).sum();
    if !(total > 0.0) {
        return Err(WmdlError::Fit("all source weights are zero".into()));
    }
    let scale = all.len() as f64 / total;
    let weights = components
        .iter()
        .map(|row| row.iter().map(|c| capped(c.combined) * scale).collect())
        .collect();
    Ok(BatchWeights {
        weights,
        components,
        target,
        cap,
        n_truncated,
    })
}

//! Cross-fitted nuisance functions: per-source main effects, treatment
//! propensities on `(X, Z_s)` and on `X`, selection propensities
//! `pi_s(X) = P(S = s | X)`, and conditional outcome variances per arm.
//!
//! Every out-of-fold value stored for a row comes from models that never saw
//! that row's outcome or treatment. Variances use nested cross-fitting for
//! this reason: the residuals feeding the variance model of fold `k` come
//! from arm-mean models that exclude both fold `k` and the residual's own fold.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{FoldAssignment, MultiSourceData, Oracle, SourceData, Treatment};
use crate::error::{Result, WmdlError};
use crate::learners::{cross_fit_with, CrossFit, LearnerSpec, Task};
use crate::matrix::Matrix;
use crate::parallel;
use crate::rng::derive_seed;

pub const DEFAULT_V_FLOOR: f64 = 1e-4;

/// Where the working main effect `m_s` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MainEffectSource {
    #[default]
    Estimated,
    /// Injected from the data's [`Oracle`].
    Oracle,
    /// `m_s = 0` (a deliberately wrong working model).
    Zero,
}

/// Where the working treatment propensity in the weight denominator comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensitySource {
    /// Cross-fitted on `(X, Z_s)`.
    #[default]
    Estimated,
    /// Cross-fitted on `X` only, for designs where assignment depends on `X` alone.
    Marginal,
    /// Injected from the data's [`Oracle`].
    Oracle,
    /// The same value everywhere.
    Constant { value: f64 },
    /// Supplied by the caller through [`KnownPropensity`].
    Known,
}

/// Caller-supplied `P(A = +1 | X = x)` for randomized designs.
#[derive(Clone)]
pub struct KnownPropensity(pub Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>);

impl KnownPropensity {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        KnownPropensity(Arc::new(f))
    }

    pub fn prob(&self, a: Treatment, x: &[f64]) -> f64 {
        let p = (self.0)(x);
        match a {
            Treatment::Treated => p,
            Treatment::Control => 1.0 - p,
        }
    }
}

impl fmt::Debug for KnownPropensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KnownPropensity(..)")
    }
}

/// Which nuisances to estimate and how.
#[derive(Debug, Clone)]
pub struct NuisancePlan {
    pub learner: LearnerSpec,
    /// Learner for the squared-residual regression; defaults to `learner`.
    pub variance_learner: Option<LearnerSpec>,
    /// Learner for the selection propensities; defaults to `learner`.
    pub selection_learner: Option<LearnerSpec>,
    pub v_floor: f64,
    /// Also estimate the weighting nuisances: `p_{a|s}(X)`, `V_{a|s}(X)`, `pi_s(X)`.
    pub weight_terms: bool,
    pub main_effect: MainEffectSource,
    pub propensity: PropensitySource,
    pub known_propensity: Option<KnownPropensity>,
}

impl NuisancePlan {
    pub fn new(learner: LearnerSpec) -> Self {
        NuisancePlan {
            learner,
            variance_learner: None,
            selection_learner: None,
            v_floor: DEFAULT_V_FLOOR,
            weight_terms: true,
            main_effect: MainEffectSource::Estimated,
            propensity: PropensitySource::Estimated,
            known_propensity: None,
        }
    }
}

/// Covariate block a propensity model is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateSet {
    /// `(X, Z_s)`
    Full,
    /// `X` only
    Marginal,
}

fn features_of(src: &SourceData, cov: CovariateSet) -> Matrix {
    match cov {
        CovariateSet::Full => src.xz(),
        CovariateSet::Marginal => src.x.clone(),
    }
}

fn source_pos(data: &MultiSourceData, s: usize) -> Result<usize> {
    let pos = data
        .position(s)
        .ok_or_else(|| WmdlError::Config(format!("source {s} not present")))?;
    if !data.sources()[pos].has_outcomes() {
        return Err(WmdlError::Config(format!("source {s} has no outcomes")));
    }
    Ok(pos)
}

/// Cross-fitted arm means `mu_{a s}(X, Z_s)` and `m_s = (mu_1 + mu_{-1}) / 2`.
#[derive(Debug, Clone)]
pub struct MainEffectFit {
    /// Indexed by [`Treatment::index`].
    pub arm_means: [CrossFit; 2],
    pub oof: Vec<f64>,
}

impl MainEffectFit {
    pub fn predict_new(&self, xz: &[f64]) -> f64 {
        0.5 * (self.arm_means[0].predict_new(xz) + self.arm_means[1].predict_new(xz))
    }
}

pub fn estimate_main_effect(
    data: &MultiSourceData,
    s: usize,
    spec: &LearnerSpec,
    folds: &FoldAssignment,
) -> Result<MainEffectFit> {
    let pos = source_pos(data, s)?;
    let src = &data.sources()[pos];
    let f = folds.of_source(pos);
    let xz = src.xz();
    let ones = vec![1.0; src.len()];
    let fit_arm = |arm: Treatment| {
        let eligible: Vec<bool> = src.a.iter().map(|&t| t == arm).collect();
        let spec = spec.with_seed(derive_seed(spec.gbt.seed, (s * 4 + arm.index()) as u64));
        cross_fit_with(&spec, &xz, &src.y, &ones, f, folds.n_folds(), Task::Regression, &eligible)
            .map_err(|e| e.in_context(format!("source {s}, arm {:+}", arm.sign())))
    };
    let treated = fit_arm(Treatment::Treated)?;
    let control = fit_arm(Treatment::Control)?;
    let oof = treated
        .oof
        .iter()
        .zip(&control.oof)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok(MainEffectFit {
        arm_means: [treated, control],
        oof,
    })
}

/// Cross-fitted `P(A = +1 | covariates, S = s)`; `oof` holds the `+1` probability.
pub fn estimate_treat_propensity(
    data: &MultiSourceData,
    s: usize,
    spec: &LearnerSpec,
    folds: &FoldAssignment,
    covariates: CovariateSet,
) -> Result<CrossFit> {
    let pos = source_pos(data, s)?;
    let src = &data.sources()[pos];
    let x = features_of(src, covariates);
    let labels: Vec<f64> = src.a.iter().map(|&t| if t == Treatment::Treated { 1.0 } else { 0.0 }).collect();
    let tag = match covariates {
        CovariateSet::Full => 2,
        CovariateSet::Marginal => 3,
    };
    let spec = spec.with_seed(derive_seed(spec.gbt.seed, (1 << 20) + (s * 4 + tag) as u64));
    let eligible = vec![true; src.len()];
    cross_fit_with(
        &spec,
        &x,
        &labels,
        &vec![1.0; src.len()],
        folds.of_source(pos),
        folds.n_folds(),
        Task::Probability,
        &eligible,
    )
    .map_err(|e| e.in_context(format!("source {s} treatment propensity")))
}

/// Fills `p` so it sums to one with every entry at least `floor`, scaling the
/// unfloored entries proportionally to their raw values.
pub fn floor_and_normalize(raw: &[f64], floor: f64) -> Vec<f64> {
    let k = raw.len();
    let floor = floor.min(1.0 / k as f64);
    let mut floored = vec![false; k];
    loop {
        let fixed = floored.iter().filter(|&&f| f).count() as f64 * floor;
        let free: f64 = raw.iter().zip(&floored).filter(|(_, &f)| !f).map(|(v, _)| v).sum();
        let scale = if free > 0.0 { (1.0 - fixed) / free } else { 0.0 };
        let mut changed = false;
        let out: Vec<f64> = raw
            .iter()
            .zip(floored.iter_mut())
            .map(|(&v, f)| {
                if *f {
                    floor
                } else if v * scale < floor {
                    *f = true;
                    changed = true;
                    floor
                } else {
                    v * scale
                }
            })
            .collect();
        if !changed {
            return out;
        }
    }
}

/// One-vs-rest selection propensities over the pooled sample.
#[derive(Debug, Clone)]
pub struct SelectionFit {
    /// Source ids, in the column order of every probability vector.
    pub sources: Vec<usize>,
    pub fits: Vec<CrossFit>,
    pub floor: f64,
    /// Out-of-fold normalized `pi(x_i)` for every row, indexed `[source position][row]`.
    pub oof: Vec<Vec<Vec<f64>>>,
}

impl SelectionFit {
    pub fn column(&self, s: usize) -> Option<usize> {
        self.sources.iter().position(|&id| id == s)
    }

    /// Normalized `pi(x)` at a new point.
    pub fn predict_new(&self, x: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = self.fits.iter().map(|cf| cf.predict_new(x)).collect();
        floor_and_normalize(&raw, self.floor)
    }
}

pub fn estimate_selection_propensity(
    data: &MultiSourceData,
    spec: &LearnerSpec,
    folds: &FoldAssignment,
) -> Result<SelectionFit> {
    let sources = data.source_ids();
    if sources.len() < 2 {
        return Err(WmdlError::Config(
            "selection propensities need at least two sources".into(),
        ));
    }
    let parts: Vec<&Matrix> = data.sources().iter().map(|s| &s.x).collect();
    let x = Matrix::vstack(&parts)?;
    let flat_folds: Vec<usize> = (0..sources.len())
        .flat_map(|p| folds.of_source(p).iter().copied())
        .collect();
    let membership: Vec<usize> = data
        .sources()
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.id, s.len()))
        .collect();
    let ones = vec![1.0; x.nrows()];
    let eligible = vec![true; x.nrows()];
    let fits = parallel::try_map(&sources, |&s| {
        let labels: Vec<f64> = membership.iter().map(|&m| if m == s { 1.0 } else { 0.0 }).collect();
        let spec = spec.with_seed(derive_seed(spec.gbt.seed, (1 << 24) + s as u64));
        cross_fit_with(
            &spec,
            &x,
            &labels,
            &ones,
            &flat_folds,
            folds.n_folds(),
            Task::Probability,
            &eligible,
        )
        .map_err(|e| e.in_context(format!("selection propensity of source {s}")))
    })?;
    let mut oof = Vec::with_capacity(sources.len());
    let mut row = 0;
    for src in data.sources() {
        let mut rows = Vec::with_capacity(src.len());
        for _ in 0..src.len() {
            let raw: Vec<f64> = fits.iter().map(|cf| cf.oof[row]).collect();
            rows.push(floor_and_normalize(&raw, spec.clip));
            row += 1;
        }
        oof.push(rows);
    }
    Ok(SelectionFit {
        sources,
        fits,
        floor: spec.clip,
        oof,
    })
}

/// Arm-mean function used to form variance residuals.
pub enum ArmMeans<'a> {
    /// Estimate with nested cross-fitting using this learner.
    Fitted(&'a LearnerSpec),
    /// A known `mu_{a s}(x, z)`.
    Known(&'a (dyn Fn(&[f64], &[f64]) -> f64 + Sync)),
}

/// Cross-fitted `V_{a|s}(X)`, floored at `floor`.
#[derive(Debug, Clone)]
pub struct VarianceFit {
    pub cf: CrossFit,
    pub floor: f64,
    /// Floored out-of-fold values at every row of the source.
    pub oof: Vec<f64>,
}

impl VarianceFit {
    pub fn predict_new(&self, x: &[f64]) -> f64 {
        self.cf.predict_new(x).max(self.floor)
    }
}

pub fn estimate_conditional_variance(
    data: &MultiSourceData,
    s: usize,
    arm: Treatment,
    spec: &LearnerSpec,
    folds: &FoldAssignment,
    arm_means: ArmMeans<'_>,
    v_floor: f64,
) -> Result<VarianceFit> {
    let pos = source_pos(data, s)?;
    let src = &data.sources()[pos];
    let n = src.len();
    let g = folds.n_folds();
    let f = folds.of_source(pos);
    let in_arm: Vec<bool> = src.a.iter().map(|&t| t == arm).collect();
    if !in_arm.iter().any(|&b| b) {
        return Err(WmdlError::Fit(format!("source {s}: arm {:+} is empty", arm.sign())));
    }
    let ctx = |e: WmdlError| e.in_context(format!("source {s}, arm {:+} variance", arm.sign()));
    let base_seed = derive_seed(spec.gbt.seed, (1 << 28) + (s * 2 + arm.index()) as u64);
    let x = &src.x;
    let ones = vec![1.0; n];

    let models = match arm_means {
        ArmMeans::Known(mu) => {
            let resid: Vec<f64> = (0..n)
                .map(|i| {
                    let r = src.y[i] - mu(src.x.row(i), src.z.row(i));
                    r * r
                })
                .collect();
            let spec = spec.with_seed(base_seed);
            cross_fit_with(&spec, x, &resid, &ones, f, g, Task::Regression, &in_arm)
                .map_err(ctx)?
                .models
        }
        ArmMeans::Fitted(mean_spec) => {
            if g < 3 {
                return Err(WmdlError::Config(
                    "variance estimation with fitted arm means needs at least 3 folds".into(),
                ));
            }
            let xz = src.xz();
            parallel::try_map_range(g, |k| {
                // Residuals for rows outside fold k, each from a mean model that
                // excludes fold k and the row's own fold.
                let mut resid = vec![0.0; n];
                for l in (0..g).filter(|&l| l != k) {
                    let train: Vec<usize> =
                        (0..n).filter(|&i| in_arm[i] && f[i] != k && f[i] != l).collect();
                    if train.is_empty() {
                        return Err(WmdlError::Fit(format!(
                            "fold {k}: no arm rows outside folds {k} and {l}"
                        )));
                    }
                    let y: Vec<f64> = train.iter().map(|&i| src.y[i]).collect();
                    let mean_spec = mean_spec.with_seed(derive_seed(base_seed, (k * g + l) as u64));
                    let mu = crate::learners::fit_regression(
                        &mean_spec,
                        &xz.select_rows(&train),
                        &y,
                        &vec![1.0; train.len()],
                    )?;
                    for i in (0..n).filter(|&i| in_arm[i] && f[i] == l) {
                        let r = src.y[i] - mu.predict_unchecked(xz.row(i));
                        resid[i] = r * r;
                    }
                }
                let train: Vec<usize> = (0..n).filter(|&i| in_arm[i] && f[i] != k).collect();
                let y: Vec<f64> = train.iter().map(|&i| resid[i]).collect();
                let spec = spec.with_seed(derive_seed(base_seed, (g * g + k) as u64));
                let m = crate::learners::fit_regression(
                    &spec,
                    &x.select_rows(&train),
                    &y,
                    &vec![1.0; train.len()],
                )?;
                Ok(crate::learners::FoldModel::Regression(m))
            })
            .map_err(ctx)?
        }
    };
    let raw: Vec<f64> = (0..n).map(|i| models[f[i]].predict_unchecked(x.row(i))).collect();
    let oof = raw.iter().map(|v| v.max(v_floor)).collect();
    Ok(VarianceFit {
        cf: CrossFit { oof: raw, models },
        floor: v_floor,
        oof,
    })
}

/// Empirical partial-balance moments over source `s`:
/// `mean_i g_j(X_i) * (e_i - 1) * delta(X_i, Z_i)` for each `g_j`, where
/// `e_i = 1 / (2 p(A_i | X_i, Z_i))` is the inverse propensity standardized by
/// its conditional mean under a correct propensity (`E[1 / p_A | X] = 2`).
/// Components near zero mean the working propensity balances `Z_s` along
/// `delta` in the direction `g_j`.
pub fn partial_balance_score(
    data: &MultiSourceData,
    s: usize,
    p_tilde: &dyn Fn(Treatment, &[f64], &[f64]) -> f64,
    delta_hat: &dyn Fn(&[f64], &[f64]) -> f64,
    g: &[&dyn Fn(&[f64]) -> f64],
) -> Result<Vec<f64>> {
    let pos = source_pos(data, s)?;
    let src = &data.sources()[pos];
    let mut acc = vec![0.0; g.len()];
    for i in 0..src.len() {
        let (x, z) = (src.x.row(i), src.z.row(i));
        let p = p_tilde(src.a[i], x, z);
        if !(p > 0.0 && p < 1.0) {
            return Err(WmdlError::Usage(format!(
                "working propensity {p} at row {i} is outside (0, 1)"
            )));
        }
        let common = (0.5 / p - 1.0) * delta_hat(x, z);
        for (a, gj) in acc.iter_mut().zip(g) {
            *a += gj(x) * common;
        }
    }
    let n = src.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Nuisances of one source with outcomes.
#[derive(Debug, Clone)]
pub struct SourceNuisance {
    pub source: usize,
    pub main_effect: Option<MainEffectFit>,
    pub p_full: Option<CrossFit>,
    pub p_marg: Option<CrossFit>,
    /// Indexed by [`Treatment::index`].
    pub variance: Option<[VarianceFit; 2]>,
    /// Working `m_s` at each row (out-of-fold when estimated).
    pub m_oof: Vec<f64>,
    /// Working `P(A = +1 | ...)` used in the weight denominator at each row.
    pub p_oof: Vec<f64>,
}

/// All nuisance estimates for a dataset, aligned with `data.sources()`.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    /// `None` for a covariates-only source.
    pub per_source: Vec<Option<SourceNuisance>>,
    pub selection: Option<SelectionFit>,
    /// `(source id, n_s / n)` over every source, including a covariates-only target.
    pub source_share: Vec<(usize, f64)>,
    pub clip: f64,
    pub v_floor: f64,
}

impl NuisanceSet {
    pub fn source(&self, s: usize) -> Option<&SourceNuisance> {
        self.per_source.iter().flatten().find(|n| n.source == s)
    }

    pub fn share(&self, s: usize) -> Option<f64> {
        self.source_share.iter().find(|(id, _)| *id == s).map(|(_, v)| *v)
    }

    /// `p_{a|s}(x)` at a new point.
    pub fn p_marg(&self, s: usize, a: Treatment, x: &[f64]) -> Option<f64> {
        let p = self.source(s)?.p_marg.as_ref()?.predict_new(x);
        Some(match a {
            Treatment::Treated => p,
            Treatment::Control => 1.0 - p,
        })
    }

    /// `V_{a|s}(x)` at a new point.
    pub fn v_hat(&self, s: usize, a: Treatment, x: &[f64]) -> Option<f64> {
        Some(self.source(s)?.variance.as_ref()?[a.index()].predict_new(x))
    }

    /// `m_s(x, z)` at a new point (fitted main effect only).
    pub fn m_hat(&self, s: usize, xz: &[f64]) -> Option<f64> {
        Some(self.source(s)?.main_effect.as_ref()?.predict_new(xz))
    }

    /// Normalized `pi(x)` at a new point, in `selection.sources` order.
    pub fn pi_hat(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.selection.as_ref()?.predict_new(x))
    }
}

fn require_oracle(data: &MultiSourceData) -> Result<&Arc<dyn Oracle>> {
    data.oracle()
        .ok_or_else(|| WmdlError::Config("oracle nuisances requested but the data has no oracle".into()))
}

fn estimate_source(
    data: &MultiSourceData,
    pos: usize,
    plan: &NuisancePlan,
    folds: &FoldAssignment,
) -> Result<SourceNuisance> {
    let src = &data.sources()[pos];
    let s = src.id;
    let spec = &plan.learner;
    let need_fitted_mean = plan.main_effect == MainEffectSource::Estimated;
    let main_effect = if need_fitted_mean {
        Some(estimate_main_effect(data, s, spec, folds)?)
    } else {
        None
    };
    let m_oof = match plan.main_effect {
        MainEffectSource::Estimated => main_effect.as_ref().unwrap().oof.clone(),
        MainEffectSource::Zero => vec![0.0; src.len()],
        MainEffectSource::Oracle => {
            let o = require_oracle(data)?;
            (0..src.len()).map(|i| o.main_effect(s, src.x.row(i), src.z.row(i))).collect()
        }
    };

    let p_full = match plan.propensity {
        PropensitySource::Estimated => {
            Some(estimate_treat_propensity(data, s, spec, folds, CovariateSet::Full)?)
        }
        _ => None,
    };
    let p_marg = if plan.weight_terms || plan.propensity == PropensitySource::Marginal {
        Some(estimate_treat_propensity(data, s, spec, folds, CovariateSet::Marginal)?)
    } else {
        None
    };
    let p_oof: Vec<f64> = match plan.propensity {
        PropensitySource::Estimated => p_full.as_ref().unwrap().oof.clone(),
        PropensitySource::Marginal => p_marg.as_ref().unwrap().oof.clone(),
        PropensitySource::Constant { value } => vec![value; src.len()],
        PropensitySource::Oracle => {
            let o = require_oracle(data)?;
            (0..src.len()).map(|i| o.propensity(s, src.x.row(i), src.z.row(i))).collect()
        }
        PropensitySource::Known => {
            let kp = plan.known_propensity.as_ref().ok_or_else(|| {
                WmdlError::Config("known propensity mode without a supplied function".into())
            })?;
            (0..src.len()).map(|i| kp.prob(Treatment::Treated, src.x.row(i))).collect()
        }
    };
    if let Some(i) = p_oof.iter().position(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(WmdlError::Config(format!(
            "source {s}: working propensity {} at row {i} is outside (0, 1)",
            p_oof[i]
        )));
    }

    let variance = if plan.weight_terms {
        let fit = |arm| {
            let vspec = plan.variance_learner.as_ref().unwrap_or(spec);
            estimate_conditional_variance(data, s, arm, vspec, folds, ArmMeans::Fitted(spec), plan.v_floor)
        };
        Some([fit(Treatment::Treated)?, fit(Treatment::Control)?])
    } else {
        None
    };

    Ok(SourceNuisance {
        source: s,
        main_effect,
        p_full,
        p_marg,
        variance,
        m_oof,
        p_oof,
    })
}

/// Estimates every nuisance `plan` asks for. Per-source fits run in parallel.
pub fn estimate_nuisances(
    data: &MultiSourceData,
    plan: &NuisancePlan,
    folds: &FoldAssignment,
) -> Result<NuisanceSet> {
    plan.learner.validate()?;
    for l in plan.variance_learner.iter().chain(&plan.selection_learner) {
        l.validate()?;
    }
    if !(plan.v_floor > 0.0) {
        return Err(WmdlError::Config("v_floor must be positive".into()));
    }
    let positions: Vec<usize> = (0..data.sources().len()).collect();
    let per_source = parallel::try_map(&positions, |&pos| {
        if data.sources()[pos].has_outcomes() {
            estimate_source(data, pos, plan, folds).map(Some)
        } else {
            Ok(None)
        }
    })?;
    let selection = if plan.weight_terms && data.sources().len() >= 2 {
        let sspec = plan.selection_learner.as_ref().unwrap_or(&plan.learner);
        Some(estimate_selection_propensity(data, sspec, folds)?)
    } else {
        None
    };
    let total = data.n_rows() as f64;
    let source_share = data
        .sources()
        .iter()
        .map(|s| (s.id, s.len() as f64 / total))
        .collect();
    Ok(NuisanceSet {
        per_source,
        selection,
        source_share,
        clip: plan.learner.clip,
        v_floor: plan.v_floor,
    })
}

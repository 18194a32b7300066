//! Direct learners: weighted regression of the pseudo-outcome on `X`.

use super::{
    final_learner, nuisance_learner, one_hot, split, CateEstimate, CateModel, EstimateMode,
    EstimatorSpec,
};
use crate::data::{EffectMode, MultiSourceData, Treatment};
use crate::diagnostics::FitDiagnostics;
use crate::error::{Result, WmdlError};
use crate::learners::fit_regression;
use crate::matrix::Matrix;
use crate::nuisance::{estimate_nuisances, NuisancePlan, NuisanceSet};
use crate::weighting::{batch_weights, BatchWeights, WeightKind};

/// One row of the final-stage regression.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    pub source: usize,
    pub x: Vec<f64>,
    /// `A (Y - m_s(X, Z))`.
    pub y_tilde: f64,
    /// `w_s(X) / p_{A|s}(X, Z)`.
    pub w_tilde: f64,
}

/// Builds pseudo-samples for every outcome row from out-of-fold nuisances
/// and the per-row source weights.
pub fn build_pseudo_samples(
    data: &MultiSourceData,
    nuisances: &NuisanceSet,
    weights: &BatchWeights,
) -> Result<Vec<PseudoSample>> {
    let mut out = Vec::with_capacity(data.n_outcome_rows());
    for (pos, src) in data.sources().iter().enumerate() {
        if !src.has_outcomes() {
            continue;
        }
        let nu = nuisances
            .source(src.id)
            .ok_or_else(|| WmdlError::Internal(format!("no nuisances for source {}", src.id)))?;
        let w = &weights.weights[pos];
        for i in 0..src.len() {
            let a = src.a[i];
            let p = match a {
                Treatment::Treated => nu.p_oof[i],
                Treatment::Control => 1.0 - nu.p_oof[i],
            };
            out.push(PseudoSample {
                source: src.id,
                x: src.x.row(i).to_vec(),
                y_tilde: a.sign() * (src.y[i] - nu.m_oof[i]),
                w_tilde: w[i] / p,
            });
        }
    }
    Ok(out)
}

pub(super) fn fit_direct(
    data: &MultiSourceData,
    spec: &EstimatorSpec,
) -> Result<(CateEstimate, FitDiagnostics)> {
    let weight_spec = spec.effective_weights();
    let single = spec.method.single_source();
    let restricted;
    let (data, target) = if single {
        let t = weight_spec
            .target_source
            .unwrap_or_else(|| if data.is_transfer() { 1 } else { data.target_source() });
        restricted = data.restrict_to(t)?;
        (&restricted, t)
    } else {
        let t = if weight_spec.kind == WeightKind::Constant {
            weight_spec.target_source.unwrap_or_else(|| {
                if data.is_transfer() {
                    1
                } else {
                    data.target_source()
                }
            })
        } else {
            weight_spec.resolve_target(data)?
        };
        (data, t)
    };
    if !data.sources().iter().any(|s| s.has_outcomes()) {
        return Err(WmdlError::Validation("no source has outcomes".into()));
    }

    let folds = split(data, spec)?;
    let mut plan = NuisancePlan::new(nuisance_learner(spec));
    plan.v_floor = spec.v_floor;
    let seed = super::derive_seed(spec.seed, 2);
    plan.variance_learner = Some(spec.variance_learner.with_seed(seed));
    plan.selection_learner = Some(spec.selection_learner.with_seed(seed));
    plan.weight_terms = weight_spec.needs_nuisances();
    plan.main_effect = spec.main_effect;
    plan.propensity = spec.propensity;
    plan.known_propensity = spec.known_propensity.clone();
    let nuisances = estimate_nuisances(data, &plan, &folds)?;
    let weights = batch_weights(data, &nuisances, &weight_spec)?;
    let samples = build_pseudo_samples(data, &nuisances, &weights)?;

    let heterogeneous = spec.effect_mode == EffectMode::Heterogeneous && !single;
    let encoding: Option<Vec<usize>> = heterogeneous.then(|| data.outcome_sources().map(|s| s.id).collect());
    let d_x = data.d_x();
    let width = d_x + encoding.as_ref().map_or(0, |e| e.len());
    let mut feats = Vec::with_capacity(samples.len() * width);
    for s in &samples {
        feats.extend_from_slice(&s.x);
        if let Some(enc) = &encoding {
            feats.extend(one_hot(enc, s.source));
        }
    }
    let features = Matrix::from_vec(samples.len(), width, feats)?;
    let y: Vec<f64> = samples.iter().map(|s| s.y_tilde).collect();
    let w: Vec<f64> = samples.iter().map(|s| s.w_tilde).collect();
    let delta = fit_regression(&final_learner(spec), &features, &y, &w)
        .map_err(|e| e.in_context("final stage"))?;

    let mode = if single {
        EstimateMode::SingleSource
    } else if weight_spec.kind == WeightKind::Transfer {
        EstimateMode::Transfer
    } else if heterogeneous {
        EstimateMode::Heterogeneous
    } else {
        EstimateMode::Homogeneous
    };
    let estimate = CateEstimate {
        method: spec.method,
        mode,
        target_source: target,
        d_x,
        source_encoding: encoding,
        model: CateModel::Direct { delta },
    };
    let diagnostics = FitDiagnostics::new(data, samples.len(), Some(&nuisances), Some(&weights));
    Ok((estimate, diagnostics))
}

//! Pooled meta-learner baselines (T-, S- and X-learner).
//!
//! All three use `X` only (no source-specific `Z`), optionally followed by a
//! one-hot source indicator.

use super::{
    final_learner, nuisance_learner, one_hot, CateEstimate, CateModel, EstimateMode,
    EstimatorSpec, Method,
};
use crate::data::{EffectMode, MultiSourceData, Treatment};
use crate::diagnostics::FitDiagnostics;
use crate::error::{Result, WmdlError};
use crate::learners::{fit_probability, fit_regression, RegressionModel};
use crate::matrix::Matrix;

struct Pooled {
    features: Matrix,
    y: Vec<f64>,
    a: Vec<Treatment>,
}

fn pool(data: &MultiSourceData, encoding: Option<&[usize]>) -> Result<Pooled> {
    let width = data.d_x() + encoding.map_or(0, |e| e.len());
    let n = data.n_outcome_rows();
    let mut feats = Vec::with_capacity(n * width);
    let mut y = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    for src in data.outcome_sources() {
        for i in 0..src.len() {
            feats.extend_from_slice(src.x.row(i));
            if let Some(enc) = encoding {
                feats.extend(one_hot(enc, src.id));
            }
            y.push(src.y[i]);
            a.push(src.a[i]);
        }
    }
    Ok(Pooled {
        features: Matrix::from_vec(n, width, feats)?,
        y,
        a,
    })
}

fn arm_fit(
    p: &Pooled,
    arm: Treatment,
    spec: &crate::learners::LearnerSpec,
) -> Result<RegressionModel> {
    let rows: Vec<usize> = (0..p.a.len()).filter(|&i| p.a[i] == arm).collect();
    let x = p.features.select_rows(&rows);
    let y: Vec<f64> = rows.iter().map(|&i| p.y[i]).collect();
    fit_regression(spec, &x, &y, &vec![1.0; rows.len()])
}

pub(super) fn fit_meta(
    data: &MultiSourceData,
    spec: &EstimatorSpec,
) -> Result<(CateEstimate, FitDiagnostics)> {
    let ids: Vec<usize> = data.outcome_sources().map(|s| s.id).collect();
    if ids.is_empty() {
        return Err(WmdlError::Validation("no source has outcomes".into()));
    }
    let target = if data.is_transfer() { 1 } else { data.target_source() };
    let encoding = spec.include_source_indicator.then(|| ids.clone());
    let p = pool(data, encoding.as_deref())?;
    let nuis = nuisance_learner(spec);
    let model = match spec.method {
        Method::TLearner => CateModel::TLearner {
            treated: arm_fit(&p, Treatment::Treated, &nuis)?,
            control: arm_fit(&p, Treatment::Control, &nuis)?,
        },
        Method::SLearner => {
            let n = p.a.len();
            let w = p.features.ncols();
            let mut feats = Vec::with_capacity(n * (w + 1));
            for i in 0..n {
                feats.extend_from_slice(p.features.row(i));
                feats.push(p.a[i].sign());
            }
            let x = Matrix::from_vec(n, w + 1, feats)?;
            CateModel::SLearner {
                outcome: fit_regression(&nuis, &x, &p.y, &vec![1.0; n])?,
            }
        }
        Method::XLearner => {
            let mu1 = arm_fit(&p, Treatment::Treated, &nuis)?;
            let mu0 = arm_fit(&p, Treatment::Control, &nuis)?;
            let fin = final_learner(spec);
            let side = |arm: Treatment, other: &RegressionModel| -> Result<RegressionModel> {
                let rows: Vec<usize> = (0..p.a.len()).filter(|&i| p.a[i] == arm).collect();
                let x = p.features.select_rows(&rows);
                let d: Vec<f64> = rows
                    .iter()
                    .map(|&i| arm.sign() * (p.y[i] - other.predict_unchecked(p.features.row(i))))
                    .collect();
                fit_regression(&fin, &x, &d, &vec![1.0; rows.len()])
            };
            let labels: Vec<bool> = p.a.iter().map(|&a| a == Treatment::Treated).collect();
            CateModel::XLearner {
                tau_treated: side(Treatment::Treated, &mu0)?,
                tau_control: side(Treatment::Control, &mu1)?,
                propensity: fit_probability(&nuis, &p.features, &labels, &vec![1.0; labels.len()])?,
            }
        }
        m => return Err(WmdlError::Internal(format!("{m:?} is not a meta-learner"))),
    };
    let mode = if spec.effect_mode == EffectMode::Heterogeneous && encoding.is_some() {
        EstimateMode::Heterogeneous
    } else {
        EstimateMode::Homogeneous
    };
    let estimate = CateEstimate {
        method: spec.method,
        mode,
        target_source: target,
        d_x: data.d_x(),
        source_encoding: encoding,
        model,
    };
    Ok((estimate, FitDiagnostics::new(data, p.a.len(), None, None)))
}

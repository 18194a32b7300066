//! Weighted ridge regression and penalized logistic regression on
//! polynomial feature expansions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WmdlError};
use crate::matrix::Matrix;

const IRLS_MAX_ITER: usize = 100;
const IRLS_TOL: f64 = 1e-8;

/// Feature expansion applied before the linear fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// Intercept and raw coordinates.
    Linear,
    /// Intercept, coordinates, squares and pairwise products.
    Poly2,
}

impl Basis {
    pub fn dim(self, d: usize) -> usize {
        match self {
            Basis::Linear => 1 + d,
            Basis::Poly2 => 1 + 2 * d + d * (d - d.min(1)) / 2,
        }
    }

    pub fn expand_into(self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        out.extend_from_slice(x);
        if self == Basis::Poly2 {
            out.extend(x.iter().map(|v| v * v));
            for i in 0..x.len() {
                for j in i + 1..x.len() {
                    out.push(x[i] * x[j]);
                }
            }
        }
    }

    pub fn expand(self, x: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim(x.len()));
        self.expand_into(x, &mut v);
        v
    }

    fn design(self, features: &Matrix) -> DMatrix<f64> {
        let p = self.dim(features.ncols());
        let mut buf = Vec::with_capacity(p);
        let mut m = DMatrix::zeros(features.nrows(), p);
        for (i, row) in features.rows().enumerate() {
            self.expand_into(row, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        m
    }
}

/// Fitted coefficients over a [`Basis`] expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub basis: Basis,
    pub n_features: usize,
    pub coef: Vec<f64>,
}

impl LinearModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        let mut acc = self.coef[0];
        let d = x.len();
        acc += x.iter().zip(&self.coef[1..=d]).map(|(a, b)| a * b).sum::<f64>();
        if self.basis == Basis::Poly2 {
            let mut k = 1 + d;
            for v in x {
                acc += v * v * self.coef[k];
                k += 1;
            }
            for i in 0..d {
                for j in i + 1..d {
                    acc += x[i] * x[j] * self.coef[k];
                    k += 1;
                }
            }
        }
        acc
    }
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
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

/// Minimum-norm solution of `a * theta = b` through the SVD.
fn svd_solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let (m, p) = a.shape();
    let svd = a.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * (m.max(p) as f64) * f64::EPSILON;
    svd.solve(&b, eps)
        .map_err(|e| WmdlError::Fit(format!("least-squares solve failed: {e}")))
}

/// Exact minimizer of `sum_i w_i (y_i - phi(x_i)' theta)^2 + penalty * |theta|^2`.
///
/// Rank deficiency with `penalty = 0` resolves to the minimum-norm solution.
pub fn fit_weighted_ridge(
    basis: Basis,
    features: &Matrix,
    targets: &[f64],
    weights: &[f64],
    penalty: f64,
) -> Result<LinearModel> {
    let n = features.nrows();
    if targets.len() != n {
        return Err(WmdlError::Dimension {
            expected: n,
            got: targets.len(),
        });
    }
    check_weights(weights, n)?;
    if !(penalty >= 0.0) {
        return Err(WmdlError::Config("ridge penalty must be nonnegative".into()));
    }
    let p = basis.dim(features.ncols());
    let extra = if penalty > 0.0 { p } else { 0 };
    let design = basis.design(features);
    let mut a = DMatrix::zeros(n + extra, p);
    let mut b = DVector::zeros(n + extra);
    for i in 0..n {
        let sw = weights[i].sqrt();
        for j in 0..p {
            a[(i, j)] = sw * design[(i, j)];
        }
        b[i] = sw * targets[i];
    }
    let sp = penalty.sqrt();
    for j in 0..extra {
        a[(n + j, j)] = sp;
    }
    let theta = svd_solve(a, b)?;
    Ok(LinearModel {
        basis,
        n_features: features.ncols(),
        coef: theta.iter().copied().collect(),
    })
}

fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Penalized logistic regression by Newton/IRLS. Stops when the largest
/// coefficient change drops below `1e-8` or after 100 iterations.
pub fn fit_logistic(
    basis: Basis,
    features: &Matrix,
    labels: &[bool],
    weights: &[f64],
    penalty: f64,
) -> Result<LinearModel> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(WmdlError::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    check_weights(weights, n)?;
    let design = basis.design(features);
    let p = design.ncols();
    let mut theta = DVector::<f64>::zeros(p);
    for _ in 0..IRLS_MAX_ITER {
        let eta = &design * &theta;
        let mut hess = DMatrix::<f64>::zeros(p, p);
        let mut grad = DVector::<f64>::zeros(p);
        for i in 0..n {
            let pi = expit(eta[i]);
            let yi = if labels[i] { 1.0 } else { 0.0 };
            let wi = weights[i];
            let hi = wi * pi * (1.0 - pi);
            let row = design.row(i);
            for j in 0..p {
                grad[j] += wi * (yi - pi) * row[j];
                let rj = hi * row[j];
                for k in j..p {
                    hess[(j, k)] += rj * row[k];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                hess[(j, k)] = hess[(k, j)];
            }
            hess[(j, j)] += penalty;
            grad[j] -= penalty * theta[j];
        }
        let step = svd_solve(hess, grad)?;
        theta += &step;
        if step.amax() < IRLS_TOL {
            break;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(WmdlError::Fit("logistic regression diverged".into()));
    }
    Ok(LinearModel {
        basis,
        n_features: features.ncols(),
        coef: theta.iter().copied().collect(),
    })
}

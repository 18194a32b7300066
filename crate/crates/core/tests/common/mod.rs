//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use wmdl::data::{MultiSourceData, Oracle, SourceData, Treatment};
use wmdl::rng::{rng_from, Rng};
use wmdl::Matrix;

pub fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Weighted least squares with intercept via the normal equations
/// `(D' W D) beta = D' W y`, `D = [1, X]`.
pub fn normal_equations(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let p = x[0].len() + 1;
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for ((row, &yi), &wi) in x.iter().zip(y).zip(w) {
        let d: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for j in 0..p {
            b[j] += wi * d[j] * yi;
            for k in 0..p {
                a[j][k] += wi * d[j] * d[k];
            }
        }
    }
    gauss_solve(a, b)
}

/// Two-source toy on `X in {-1, +1}` with no `Z`.
#[derive(Debug, Clone)]
pub struct DiscreteToy {
    /// `P(X = +1 | S = s)` for s = 1, 2.
    pub p_x: [f64; 2],
    /// Propensity slope: `p_{+1|s}(x) = expit(slope_s * x)`.
    pub slope: [f64; 2],
    /// Noise sd by source.
    pub sigma: [f64; 2],
}

impl DiscreteToy {
    pub fn standard() -> Self {
        DiscreteToy {
            p_x: [0.5, 0.7],
            slope: [0.8, -0.5],
            sigma: [0.5, 1.0],
        }
    }

    pub fn m(x: f64) -> f64 {
        1.0 + 0.5 * x
    }

    pub fn delta(x: f64) -> f64 {
        0.3 + 0.4 * x
    }

    pub fn p_treated(&self, s: usize, x: f64) -> f64 {
        expit(self.slope[s - 1] * x)
    }

    pub fn p_x_of(&self, s: usize, x: f64) -> f64 {
        if x > 0.0 {
            self.p_x[s - 1]
        } else {
            1.0 - self.p_x[s - 1]
        }
    }

    /// Draws `n_per_source` rows per source.
    pub fn sample(&self, n_per_source: usize, seed: u64) -> MultiSourceData {
        let mut rng = rng_from(seed);
        let sources = (1..=2)
            .map(|s| {
                let normal = Normal::new(0.0, self.sigma[s - 1]).unwrap();
                let mut x = Vec::with_capacity(n_per_source);
                let mut y = Vec::with_capacity(n_per_source);
                let mut a = Vec::with_capacity(n_per_source);
                for _ in 0..n_per_source {
                    let xi = if rng.random::<f64>() < self.p_x[s - 1] { 1.0 } else { -1.0 };
                    let ai = if rng.random::<f64>() < self.p_treated(s, xi) {
                        Treatment::Treated
                    } else {
                        Treatment::Control
                    };
                    let eps = normal.sample(&mut rng);
                    y.push(Self::m(xi) + ai.sign() * Self::delta(xi) + eps);
                    x.push(xi);
                    a.push(ai);
                }
                SourceData::new(
                    s,
                    Matrix::from_vec(n_per_source, 1, x).unwrap(),
                    Matrix::zeros(n_per_source, 0),
                    y,
                    a,
                )
            })
            .collect();
        MultiSourceData::new(sources, 1)
            .unwrap()
            .with_oracle(Arc::new(self.clone()))
    }

    /// Population minimizer at `x` of the weighted objective
    /// `sum_s P(S=s) E[w_s(X)/p_{A|s}(X) (A(Y - m(X)) - l(X))^2 | S=s]`
    /// with the efficient source weights for target 1, by exact enumeration
    /// over sources and arms. Equal source sizes are assumed.
    pub fn population_argmin(&self, x: f64) -> f64 {
        let pi: Vec<f64> = (1..=2).map(|s| 0.5 * self.p_x_of(s, x)).collect();
        let total: f64 = pi.iter().sum();
        let mut num = 0.0;
        let mut den = 0.0;
        for s in 1..=2 {
            let p1 = self.p_treated(s, x);
            let v = self.sigma[s - 1].powi(2);
            let info = 1.0 / (v / p1 + v / (1.0 - p1));
            let ratio = (pi[0] / total) / (pi[s - 1] / total);
            let w = ratio * info;
            for a in [1.0, -1.0] {
                let pa = if a > 0.0 { p1 } else { 1.0 - p1 };
                let mean_y = Self::m(x) + a * Self::delta(x);
                let y_tilde = a * (mean_y - Self::m(x));
                let mass = 0.5 * self.p_x_of(s, x) * pa;
                num += mass * (w / pa) * y_tilde;
                den += mass * (w / pa);
            }
        }
        num / den
    }
}

impl Oracle for DiscreteToy {
    fn main_effect(&self, _s: usize, x: &[f64], _z: &[f64]) -> f64 {
        Self::m(x[0])
    }

    fn propensity(&self, s: usize, x: &[f64], _z: &[f64]) -> f64 {
        self.p_treated(s, x[0])
    }

    fn delta(&self, _s: usize, x: &[f64]) -> f64 {
        Self::delta(x[0])
    }

    fn density_ratio(&self, target: usize, s: usize, x: &[f64]) -> Option<f64> {
        Some(self.p_x_of(target, x[0]) / self.p_x_of(s, x[0]))
    }
}

/// Transfer toy: source 1 has outcomes with `X ~ U[-1, 1]^2`; the target
/// population (source 0, covariates only) is `U[0, 1]^2`.
#[derive(Debug, Clone, Copy)]
pub struct TransferToy;

impl TransferToy {
    pub fn in_target_support(x: &[f64]) -> bool {
        x.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn delta(x: &[f64]) -> f64 {
        x[0] + 0.5 * x[1] * x[1]
    }

    pub fn m(x: &[f64]) -> f64 {
        1.0 + x[0] - x[1]
    }

    pub fn p(x: &[f64]) -> f64 {
        expit(x[0] - x[1])
    }

    pub fn target_covariates(n: usize, rng: &mut Rng) -> Matrix {
        let v = (0..2 * n).map(|_| rng.random_range(0.0..=1.0)).collect();
        Matrix::from_vec(n, 2, v).unwrap()
    }

    pub fn sample(n_source: usize, n_target: usize, seed: u64) -> MultiSourceData {
        let mut rng = rng_from(seed);
        let normal = Normal::new(0.0, 0.2).unwrap();
        let mut xs = Vec::with_capacity(2 * n_source);
        let mut y = Vec::with_capacity(n_source);
        let mut a = Vec::with_capacity(n_source);
        for _ in 0..n_source {
            let x = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            let ai = if rng.random::<f64>() < Self::p(&x) {
                Treatment::Treated
            } else {
                Treatment::Control
            };
            y.push(Self::m(&x) + ai.sign() * Self::delta(&x) + normal.sample(&mut rng));
            a.push(ai);
            xs.extend_from_slice(&x);
        }
        let src = SourceData::new(
            1,
            Matrix::from_vec(n_source, 2, xs).unwrap(),
            Matrix::zeros(n_source, 0),
            y,
            a,
        );
        let target = SourceData::covariates_only(0, Self::target_covariates(n_target, &mut rng));
        MultiSourceData::new(vec![src, target], 2)
            .unwrap()
            .with_oracle(Arc::new(TransferToy))
    }
}

impl Oracle for TransferToy {
    fn main_effect(&self, _s: usize, x: &[f64], _z: &[f64]) -> f64 {
        Self::m(x)
    }

    fn propensity(&self, _s: usize, x: &[f64], _z: &[f64]) -> f64 {
        Self::p(x)
    }

    fn delta(&self, _s: usize, x: &[f64]) -> f64 {
        Self::delta(x)
    }

    fn density_ratio(&self, target: usize, s: usize, x: &[f64]) -> Option<f64> {
        let density = |id: usize| match id {
            0 => {
                if Self::in_target_support(x) {
                    1.0
                } else {
                    0.0
                }
            }
            _ => 0.25,
        };
        Some(density(target) / density(s))
    }
}

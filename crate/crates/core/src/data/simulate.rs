//! Synthetic multi-source data with known treatment effects.
//!
//! Source 1 draws `X ~ Unif([-1, 1]^4)`; sources `2..=K` draw `X` from a unit
//! covariance normal truncated to the cube with a random per-source mean.
//! Treatment follows a logistic model in `(X, Z_s)` with one coefficient
//! vector shared by all sources, and `Y = m_s(X, Z_s) + A * delta_s(X) + eps`.

use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{MultiSourceData, Oracle, SourceData, Treatment, TRANSFER_TARGET};
use crate::error::{Result, WmdlError};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, rng_from, Rng};

/// Dimension of the shared covariate block in the simulation design.
pub const SIM_DX: usize = 4;

const MAX_TREATMENT_DRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// No source-specific covariates.
    #[serde(rename = "I")]
    I,
    /// One source-specific covariate per source.
    #[serde(rename = "II")]
    II,
}

impl FromStr for Scenario {
    type Err = WmdlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Scenario::I),
            "II" | "2" => Ok(Scenario::II),
            other => Err(WmdlError::Schema(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMode {
    Homogeneous,
    Heterogeneous,
}

/// Main-effect family `m_s(x, z)`, shared by all sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MainEffect {
    /// `1 + x1 + x2^2 - x3 * x4 + 0.5 * z`
    Poly1,
    /// `1 + x1 - x2 + 0.5 * x3 + 0.5 * z`
    Linear1,
    Zero,
}

impl MainEffect {
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "poly-1" => Ok(MainEffect::Poly1),
            "linear-1" => Ok(MainEffect::Linear1),
            "zero" => Ok(MainEffect::Zero),
            other => Err(WmdlError::Schema(format!("unknown main_effect_id {other:?}"))),
        }
    }

    pub fn eval(self, x: &[f64], z: &[f64]) -> f64 {
        let zt = z.first().map_or(0.0, |v| 0.5 * v);
        match self {
            MainEffect::Poly1 => 1.0 + x[0] + x[1] * x[1] - x[2] * x[3] + zt,
            MainEffect::Linear1 => 1.0 + x[0] - x[1] + 0.5 * x[2] + zt,
            MainEffect::Zero => 0.0,
        }
    }
}

fn default_sigma_mu() -> f64 {
    0.3
}
fn default_sigma_eps() -> f64 {
    0.1
}
fn default_main_effect() -> String {
    "poly-1".into()
}

/// Data-generating process configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_sources: usize,
    /// Total trial rows, split evenly across sources.
    pub n_total: usize,
    pub scenario: Scenario,
    pub effect_mode: EffectMode,
    #[serde(default = "default_sigma_mu")]
    pub sigma_mu: f64,
    #[serde(default = "default_sigma_eps")]
    pub sigma_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_main_effect")]
    pub main_effect_id: String,
    /// Fixed treatment coefficients; drawn from `N(0, I)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    /// Rows of a covariates-only target population (source 0); 0 disables it.
    #[serde(default)]
    pub transfer_rows: usize,
}

impl DgpConfig {
    pub fn new(n_sources: usize, n_total: usize, scenario: Scenario, effect_mode: EffectMode) -> Self {
        DgpConfig {
            n_sources,
            n_total,
            scenario,
            effect_mode,
            sigma_mu: default_sigma_mu(),
            sigma_eps: default_sigma_eps(),
            seed: 0,
            main_effect_id: default_main_effect(),
            beta: None,
            transfer_rows: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn d_z(&self) -> usize {
        match self.scenario {
            Scenario::I => 0,
            Scenario::II => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 {
            return Err(WmdlError::Config("n_sources must be at least 1".into()));
        }
        if self.n_total < self.n_sources {
            return Err(WmdlError::Config(format!(
                "n_total {} is smaller than n_sources {}",
                self.n_total, self.n_sources
            )));
        }
        if !(self.sigma_mu >= 0.0) || !(self.sigma_eps >= 0.0) {
            return Err(WmdlError::Config("sigma_mu and sigma_eps must be nonnegative".into()));
        }
        MainEffect::from_id(&self.main_effect_id)?;
        if let Some(beta) = &self.beta {
            let want = SIM_DX + self.d_z();
            if beta.len() != want {
                return Err(WmdlError::Config(format!(
                    "beta has length {}, expected {want}",
                    beta.len()
                )));
            }
        }
        if self.transfer_rows > 0 && self.effect_mode == EffectMode::Heterogeneous {
            return Err(WmdlError::Config(
                "a covariates-only target requires homogeneous effects".into(),
            ));
        }
        Ok(())
    }

    /// Rows per source: `n_total / K`, remainder to the lowest ids.
    pub fn source_sizes(&self) -> Vec<usize> {
        let k = self.n_sources;
        let base = self.n_total / k;
        let rem = self.n_total % k;
        (0..k).map(|i| base + usize::from(i < rem)).collect()
    }
}

/// `(x1 + x2 + x3) * 1(x1 < 0.5) + x4`
pub fn true_delta_hom(x: &[f64]) -> Result<f64> {
    if x.len() != SIM_DX {
        return Err(WmdlError::Dimension {
            expected: SIM_DX,
            got: x.len(),
        });
    }
    Ok(hom_delta(x))
}

fn hom_delta(x: &[f64]) -> f64 {
    let ind = if x[0] < 0.5 { 1.0 } else { 0.0 };
    (x[0] + x[1] + x[2]) * ind + x[3]
}

/// Source-dependent effect: odd sources carry the `x1` and `x4` terms,
/// sources up to 7 the `x2` term, and even sources a jump of 2 below `x1 = 0`.
pub fn true_delta_het(x: &[f64], s: usize) -> Result<f64> {
    if x.len() != SIM_DX {
        return Err(WmdlError::Dimension {
            expected: SIM_DX,
            got: x.len(),
        });
    }
    if s == 0 {
        return Err(WmdlError::Usage("source ids start at 1".into()));
    }
    Ok(het_delta(x, s))
}

fn het_delta(x: &[f64], s: usize) -> f64 {
    let ind = |c: bool| if c { 1.0 } else { 0.0 };
    let odd = ind(s % 2 == 1);
    let even = 1.0 - odd;
    x[0] * ind(x[0] < 0.5) * odd
        + x[1] * ind(x[1] < 0.5) * ind(s <= 7)
        + x[2] * ind(x[2] < 0.5)
        + x[3] * odd
        + 2.0 * ind(x[0] < 0.0) * even
}

fn std_normal_cdf(t: f64) -> f64 {
    0.5 * (1.0 + libm::erf(t / std::f64::consts::SQRT_2))
}

fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Ground truth of one simulated world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub config: DgpConfig,
    pub beta: Vec<f64>,
    /// Covariate means by source id (`None` for the uniform source 1).
    pub source_means: Vec<(usize, Option<Vec<f64>>)>,
    pub treatment_draws: usize,
}

impl SimulationTruth {
    fn main_effect_fn(&self) -> MainEffect {
        MainEffect::from_id(&self.config.main_effect_id).expect("validated")
    }

    fn mean_of(&self, s: usize) -> Option<&Vec<f64>> {
        self.source_means
            .iter()
            .find(|(id, _)| *id == s)
            .and_then(|(_, m)| m.as_ref())
    }

    /// Draws `n` covariate vectors from source `s`'s population.
    pub fn sample_covariates(&self, s: usize, n: usize, rng: &mut Rng) -> Matrix {
        let mut m = Matrix::zeros(n, SIM_DX);
        let mean = self.mean_of(s).cloned();
        for i in 0..n {
            let row = m.row_mut(i);
            match &mean {
                None => row.iter_mut().for_each(|v| *v = rng.random_range(-1.0..=1.0)),
                Some(mu) => {
                    for (v, &c) in row.iter_mut().zip(mu) {
                        *v = truncated_normal(rng, c);
                    }
                }
            }
        }
        m
    }

    /// Test covariates from the target population (source 1, or source 0
    /// in transfer mode).
    pub fn sample_target_covariates(&self, n: usize, rng: &mut Rng) -> Matrix {
        let target = if self.config.transfer_rows > 0 { TRANSFER_TARGET } else { 1 };
        self.sample_covariates(target, n, rng)
    }

    /// Covariate density of source `s` at `x` (zero outside the cube).
    pub fn covariate_density(&self, s: usize, x: &[f64]) -> f64 {
        if x.len() != SIM_DX || x.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return 0.0;
        }
        match self.mean_of(s) {
            None => 0.5f64.powi(SIM_DX as i32),
            Some(mu) => x
                .iter()
                .zip(mu)
                .map(|(&v, &c)| {
                    let mass = std_normal_cdf(1.0 - c) - std_normal_cdf(-1.0 - c);
                    (-0.5 * (v - c).powi(2)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * mass)
                })
                .product(),
        }
    }

    pub fn target_source(&self) -> usize {
        if self.config.transfer_rows > 0 {
            TRANSFER_TARGET
        } else {
            1
        }
    }
}

impl Oracle for SimulationTruth {
    fn main_effect(&self, _s: usize, x: &[f64], z: &[f64]) -> f64 {
        self.main_effect_fn().eval(x, z)
    }

    fn propensity(&self, _s: usize, x: &[f64], z: &[f64]) -> f64 {
        let lin: f64 = x
            .iter()
            .chain(z)
            .zip(&self.beta)
            .map(|(v, b)| v * b)
            .sum();
        expit(lin)
    }

    fn delta(&self, s: usize, x: &[f64]) -> f64 {
        match self.config.effect_mode {
            EffectMode::Homogeneous => hom_delta(x),
            EffectMode::Heterogeneous => het_delta(x, s.max(1)),
        }
    }

    fn density_ratio(&self, target: usize, s: usize, x: &[f64]) -> Option<f64> {
        let ds = self.covariate_density(s, x);
        (ds > 0.0).then(|| self.covariate_density(target, x) / ds)
    }
}

/// Standard normal shifted by `mean`, truncated to `[-1, 1]` by rejection.
fn truncated_normal(rng: &mut Rng, mean: f64) -> f64 {
    loop {
        let v: f64 = mean + rng.sample::<f64, _>(StandardNormal);
        if (-1.0..=1.0).contains(&v) {
            return v;
        }
    }
}

/// Simulates one world. The result carries its [`SimulationTruth`] as oracle.
pub fn simulate(config: &DgpConfig) -> Result<(MultiSourceData, SimulationTruth)> {
    config.validate()?;
    let k = config.n_sources;
    let d_z = config.d_z();
    let sizes = config.source_sizes();

    let mut cov_rng = rng_from(derive_seed(config.seed, 1));
    let mean_dist = Normal::new(0.0, config.sigma_mu).expect("sigma_mu validated");
    let mut source_means: Vec<(usize, Option<Vec<f64>>)> = Vec::with_capacity(k + 1);
    source_means.push((1, None));
    for s in 2..=k {
        let mu: Vec<f64> = (0..SIM_DX).map(|_| mean_dist.sample(&mut cov_rng)).collect();
        source_means.push((s, Some(mu)));
    }
    if config.transfer_rows > 0 {
        let mu: Vec<f64> = (0..SIM_DX).map(|_| mean_dist.sample(&mut cov_rng)).collect();
        source_means.push((TRANSFER_TARGET, Some(mu)));
    }
    let mut truth = SimulationTruth {
        config: config.clone(),
        beta: Vec::new(),
        source_means,
        treatment_draws: 0,
    };

    let mut xs = Vec::with_capacity(k);
    let mut zs = Vec::with_capacity(k);
    for (i, &n) in sizes.iter().enumerate() {
        let s = i + 1;
        xs.push(truth.sample_covariates(s, n, &mut cov_rng));
        let mut z = Matrix::zeros(n, d_z);
        for r in 0..n {
            for v in z.row_mut(r) {
                *v = truncated_normal(&mut cov_rng, 0.0);
            }
        }
        zs.push(z);
    }
    let x0 = (config.transfer_rows > 0)
        .then(|| truth.sample_covariates(TRANSFER_TARGET, config.transfer_rows, &mut cov_rng));

    // Treatments: redraw until every source has both arms.
    let mut beta_rng = rng_from(derive_seed(config.seed, 2));
    let mut arms: Vec<Vec<Treatment>> = Vec::new();
    for attempt in 1..=MAX_TREATMENT_DRAWS {
        truth.beta = match &config.beta {
            Some(b) => b.clone(),
            None => (0..SIM_DX + d_z)
                .map(|_| beta_rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        arms = (0..k)
            .map(|i| {
                (0..sizes[i])
                    .map(|r| {
                        let p = truth.propensity(i + 1, xs[i].row(r), zs[i].row(r));
                        if beta_rng.random::<f64>() < p {
                            Treatment::Treated
                        } else {
                            Treatment::Control
                        }
                    })
                    .collect()
            })
            .collect();
        truth.treatment_draws = attempt;
        let ok = arms.iter().all(|a: &Vec<Treatment>| {
            a.contains(&Treatment::Treated) && a.contains(&Treatment::Control)
        });
        if ok {
            break;
        }
        if attempt == MAX_TREATMENT_DRAWS {
            return Err(WmdlError::Config(
                "could not draw treatments with both arms in every source".into(),
            ));
        }
    }

    let mut noise_rng = rng_from(derive_seed(config.seed, 3));
    let noise = Normal::new(0.0, config.sigma_eps).expect("sigma_eps validated");
    let main = truth.main_effect_fn();
    let mut sources = Vec::with_capacity(k + 1);
    for (i, ((x, z), a)) in xs.into_iter().zip(zs).zip(arms).enumerate() {
        let s = i + 1;
        let y = (0..x.nrows())
            .map(|r| {
                let eps = noise.sample(&mut noise_rng);
                main.eval(x.row(r), z.row(r)) + a[r].sign() * truth.delta(s, x.row(r)) + eps
            })
            .collect();
        sources.push(SourceData::new(s, x, z, y, a));
    }
    if let Some(x0) = x0 {
        sources.push(SourceData::covariates_only(TRANSFER_TARGET, x0));
    }
    let data = MultiSourceData::new(sources, SIM_DX)?
        .with_oracle(std::sync::Arc::new(truth.clone()));
    Ok((data, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, n: usize) -> DgpConfig {
        DgpConfig::new(k, n, Scenario::I, EffectMode::Homogeneous).with_seed(7)
    }

    #[test]
    fn hom_delta_examples() {
        assert_eq!(true_delta_hom(&[0.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(true_delta_hom(&[1.0, 0.5, -0.5, 0.2]).unwrap(), 0.2);
        assert_eq!(true_delta_hom(&[0.0, 0.5, -0.5, 0.2]).unwrap(), 0.2);
        assert!(true_delta_hom(&[0.0; 3]).is_err());
    }

    #[test]
    fn het_delta_examples() {
        let x = [-0.5, 0.2, 0.6, 0.1];
        assert!((true_delta_het(&x, 2).unwrap() - 2.2).abs() < 1e-15);
        assert!((true_delta_het(&x, 1).unwrap() - (-0.2)).abs() < 1e-15);
        assert_eq!(true_delta_het(&[0.9, 0.9, 0.9, 0.0], 9).unwrap(), 0.0);
        assert!(true_delta_het(&x, 0).is_err());
        assert!(true_delta_het(&[0.0; 5], 1).is_err());
    }

    #[test]
    fn ten_source_grid_sizes_and_support() {
        let (data, _) = simulate(&cfg(10, 3000)).unwrap();
        assert_eq!(data.sources().len(), 10);
        for s in data.sources() {
            assert_eq!(s.len(), 300);
            assert!(s.x.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn remainder_goes_to_low_ids() {
        assert_eq!(cfg(3, 11).source_sizes(), vec![4, 4, 3]);
    }

    #[test]
    fn noiseless_outcomes_are_exact() {
        let mut c = cfg(3, 300);
        c.sigma_eps = 0.0;
        c.scenario = Scenario::II;
        let (data, truth) = simulate(&c).unwrap();
        for s in data.sources() {
            for i in 0..s.len() {
                let (x, z) = (s.x.row(i), s.z.row(i));
                let r = s.y[i] - truth.main_effect(s.id, x, z) - s.a[i].sign() * truth.delta(s.id, x);
                assert!(r.abs() < 1e-12, "{r}");
            }
            assert!(s.z.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let (a, _) = simulate(&cfg(4, 400)).unwrap();
        let (b, _) = simulate(&cfg(4, 400)).unwrap();
        assert_eq!(a.sources(), b.sources());
        let (c, _) = simulate(&cfg(4, 400).with_seed(8)).unwrap();
        assert_ne!(a.sources(), c.sources());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, 10).validate().is_err());
        assert!(cfg(5, 4).validate().is_err());
        let mut c = cfg(2, 10);
        c.sigma_eps = -1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(2, 10);
        c.main_effect_id = "nope".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn transfer_rows_add_covariates_only_source() {
        let mut c = cfg(2, 200);
        c.transfer_rows = 50;
        let (data, truth) = simulate(&c).unwrap();
        assert!(data.is_transfer());
        assert_eq!(data.source(0).unwrap().len(), 50);
        assert_eq!(truth.target_source(), 0);
    }

    #[test]
    fn scenario_parses() {
        assert_eq!("II".parse::<Scenario>().unwrap(), Scenario::II);
        assert!("III".parse::<Scenario>().is_err());
        let j: DgpConfig = serde_json::from_str(
            r#"{"n_sources":2,"n_total":10,"scenario":"I","effect_mode":"homogeneous"}"#,
        )
        .unwrap();
        assert_eq!(j.sigma_mu, 0.3);
        assert_eq!(j.main_effect_id, "poly-1");
    }
}

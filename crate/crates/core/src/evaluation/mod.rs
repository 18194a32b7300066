//! Simulation experiments: the MSE metric, the replication harness, the
//! nuisance-corruption stress suite and report emission.

mod grid;
mod report;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use grid::{ExperimentGrid, GridAxes, GridCell};
pub use report::{emit_report, read_report_json, ReportFormat};

use crate::data::{simulate, DgpConfig, EffectMode, Oracle, Scenario};
use crate::error::{Result, WmdlError};
use crate::estimators::{fit, CateEstimate, EstimateMode, EstimatorSpec, Method};
use crate::matrix::Matrix;
use crate::nuisance::{MainEffectSource, PropensitySource};
use crate::parallel;
use crate::rng::{derive_seed, rng_from, tag_of};

/// Largest tolerated fraction of failed fits per estimator.
pub const MAX_MISSING_FRACTION: f64 = 0.2;

/// Mean squared error of `estimate` against `truth` over the rows of `test_x`.
/// `source` selects the source at which a heterogeneous estimate is evaluated.
pub fn mse(
    estimate: &CateEstimate,
    test_x: &Matrix,
    truth: impl Fn(&[f64]) -> f64,
    source: Option<usize>,
) -> Result<f64> {
    if test_x.ncols() != estimate.d_x {
        return Err(WmdlError::Dimension {
            expected: estimate.d_x,
            got: test_x.ncols(),
        });
    }
    if test_x.nrows() == 0 {
        return Err(WmdlError::Validation("empty test set".into()));
    }
    let mut acc = 0.0;
    for x in test_x.rows() {
        let e = estimate.predict_delta(x, source)? - truth(x);
        acc += e * e;
    }
    Ok(acc / test_x.nrows() as f64)
}

/// An estimator spec with a report name (defaults to the method label).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedEstimator {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(flatten)]
    pub spec: EstimatorSpec,
}

impl NamedEstimator {
    pub fn new(spec: EstimatorSpec) -> Self {
        NamedEstimator { name: None, spec }
    }

    pub fn named(name: impl Into<String>, spec: EstimatorSpec) -> Self {
        NamedEstimator {
            name: Some(name.into()),
            spec,
        }
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.spec.label())
    }
}

fn default_replications() -> usize {
    20
}
fn default_n_test() -> usize {
    1000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Template; its seed is replaced per replication.
    pub dgp: DgpConfig,
    pub estimators: Vec<NamedEstimator>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn new(dgp: DgpConfig, estimators: Vec<NamedEstimator>) -> Self {
        ExperimentConfig {
            dgp,
            estimators,
            replications: default_replications(),
            n_test: default_n_test(),
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(WmdlError::Config("replications must be at least 1".into()));
        }
        if self.n_test == 0 {
            return Err(WmdlError::Config("n_test must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(WmdlError::Config("no estimators configured".into()));
        }
        let mut names: Vec<String> = self.estimators.iter().map(|e| e.display_name()).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(WmdlError::Config(format!("duplicate estimator name {}", w[0])));
        }
        self.dgp.validate()?;
        for e in &self.estimators {
            e.spec.validate()?;
        }
        Ok(())
    }

    /// Seed of replication `r` (0-based).
    pub fn replication_seed(&self, r: usize) -> u64 {
        derive_seed(self.master_seed, r as u64)
    }
}

/// Per-estimator results across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub name: String,
    /// `None` where the fit failed.
    pub mse: Vec<Option<f64>>,
    #[serde(default)]
    pub errors: Vec<Option<String>>,
    pub mean_mse: Option<f64>,
    pub sd_mse: Option<f64>,
    /// Summed fitting time in seconds.
    pub wall_time: f64,
}

impl EstimatorResult {
    fn from_runs(name: String, runs: Vec<(std::result::Result<f64, String>, f64)>) -> Self {
        let wall_time = runs.iter().map(|(_, t)| t).sum();
        let mse: Vec<Option<f64>> = runs.iter().map(|(r, _)| r.as_ref().ok().copied()).collect();
        let errors = runs.into_iter().map(|(r, _)| r.err()).collect();
        let (mean_mse, sd_mse) = mean_sd(&mse);
        EstimatorResult {
            name,
            mse,
            errors,
            mean_mse,
            sd_mse,
            wall_time,
        }
    }

    pub fn n_missing(&self) -> usize {
        self.mse.iter().filter(|m| m.is_none()).count()
    }
}

/// Mean and sample standard deviation (R - 1 denominator) of the present values.
pub fn mean_sd(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.len() > 1)
        .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), sd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub replications: usize,
    pub n_total: usize,
    pub scenario: Scenario,
    pub effect_mode: EffectMode,
    pub master_seed: u64,
    pub results: Vec<EstimatorResult>,
}

impl ExperimentReport {
    pub fn result(&self, name: &str) -> Option<&EstimatorResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.result(name)?.mean_mse
    }
}

fn run_one(
    config: &ExperimentConfig,
    r: usize,
) -> Result<Vec<(std::result::Result<f64, String>, f64)>> {
    let seed = config.replication_seed(r);
    let dgp = DgpConfig {
        seed: derive_seed(seed, tag_of("train")),
        ..config.dgp.clone()
    };
    let (data, truth) = simulate(&dgp)?;
    let mut test_rng = rng_from(derive_seed(seed, tag_of("test")));
    let test_x = truth.sample_target_covariates(config.n_test, &mut test_rng);
    let target = truth.target_source();
    let fit_seed = derive_seed(seed, tag_of("fit"));
    Ok(config
        .estimators
        .iter()
        .map(|e| {
            let spec = e.spec.clone().with_seed(fit_seed);
            let start = Instant::now();
            let out = fit(&data, &spec).and_then(|est| {
                let s = match est.mode {
                    EstimateMode::Heterogeneous => Some(target),
                    _ => None,
                };
                mse(&est, &test_x, |x| truth.delta(target, x), s)
            });
            (out.map_err(|e| e.to_string()), start.elapsed().as_secs_f64())
        })
        .collect())
}

/// Simulates `R` independent worlds, fits every estimator on each and
/// scores it on a fresh target-population test set. Replications run in
/// parallel; results do not depend on execution order.
pub fn run_replications(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let per_rep = parallel::try_map_range(config.replications, |r| run_one(config, r))?;
    let mut results = Vec::with_capacity(config.estimators.len());
    for (j, e) in config.estimators.iter().enumerate() {
        let runs = per_rep.iter().map(|rep| rep[j].clone()).collect();
        let res = EstimatorResult::from_runs(e.display_name(), runs);
        let missing = res.n_missing();
        if missing as f64 > MAX_MISSING_FRACTION * config.replications as f64 {
            let first = res.errors.iter().flatten().next().cloned().unwrap_or_default();
            return Err(WmdlError::Fit(format!(
                "{}: {missing} of {} replications failed; first error: {first}",
                res.name, config.replications
            )));
        }
        results.push(res);
    }
    Ok(ExperimentReport {
        replications: config.replications,
        n_total: config.dgp.n_total,
        scenario: config.dgp.scenario,
        effect_mode: config.dgp.effect_mode,
        master_seed: config.master_seed,
        results,
    })
}

/// Nuisance-corruption arms of the stress suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustnessArm {
    BothCorrect,
    MCorrupted,
    PCorrupted,
    BothCorrupted,
}

impl RobustnessArm {
    pub const ALL: [RobustnessArm; 4] = [
        RobustnessArm::BothCorrect,
        RobustnessArm::MCorrupted,
        RobustnessArm::PCorrupted,
        RobustnessArm::BothCorrupted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RobustnessArm::BothCorrect => "both_correct",
            RobustnessArm::MCorrupted => "m_corrupted",
            RobustnessArm::PCorrupted => "p_corrupted",
            RobustnessArm::BothCorrupted => "both_corrupted",
        }
    }

    /// `m` is the oracle or `0`; `p` is the oracle or the constant `0.5`.
    pub fn apply(self, mut spec: EstimatorSpec) -> EstimatorSpec {
        let (m_ok, p_ok) = match self {
            RobustnessArm::BothCorrect => (true, true),
            RobustnessArm::MCorrupted => (false, true),
            RobustnessArm::PCorrupted => (true, false),
            RobustnessArm::BothCorrupted => (false, false),
        };
        spec.main_effect = if m_ok {
            MainEffectSource::Oracle
        } else {
            MainEffectSource::Zero
        };
        spec.propensity = if p_ok {
            PropensitySource::Oracle
        } else {
            PropensitySource::Constant { value: 0.5 }
        };
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCell {
    pub arm: RobustnessArm,
    pub n_total: usize,
    pub result: EstimatorResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub sizes: Vec<usize>,
    pub cells: Vec<RobustnessCell>,
}

impl RobustnessReport {
    pub fn mean(&self, arm: RobustnessArm, n_total: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.arm == arm && c.n_total == n_total)?
            .result
            .mean_mse
    }

    /// Flattens into an experiment report with names `arm@n`.
    pub fn to_experiment_report(&self, base: &ExperimentConfig) -> ExperimentReport {
        ExperimentReport {
            replications: base.replications,
            n_total: base.dgp.n_total,
            scenario: base.dgp.scenario,
            effect_mode: base.dgp.effect_mode,
            master_seed: base.master_seed,
            results: self
                .cells
                .iter()
                .map(|c| EstimatorResult {
                    name: format!("{}@{}", c.arm.name(), c.n_total),
                    ..c.result.clone()
                })
                .collect(),
        }
    }
}

/// Runs the four nuisance-corruption arms at each size in `sizes`, using
/// the first estimator of `base` (normally homogeneous WMDL) as template.
pub fn robustness_suite(base: &ExperimentConfig, sizes: &[usize]) -> Result<RobustnessReport> {
    let template = base
        .estimators
        .first()
        .ok_or_else(|| WmdlError::Config("no estimators configured".into()))?;
    if base.dgp.scenario != Scenario::I {
        return Err(WmdlError::Config("the robustness suite requires scenario I".into()));
    }
    if sizes.is_empty() {
        return Err(WmdlError::Config("no sample sizes given".into()));
    }
    let mut cells = Vec::new();
    for &n in sizes {
        let config = ExperimentConfig {
            dgp: DgpConfig {
                n_total: n,
                ..base.dgp.clone()
            },
            estimators: RobustnessArm::ALL
                .iter()
                .map(|arm| NamedEstimator::named(arm.name(), arm.apply(template.spec.clone())))
                .collect(),
            ..base.clone()
        };
        let report = run_replications(&config)?;
        for (arm, result) in RobustnessArm::ALL.iter().zip(report.results) {
            cells.push(RobustnessCell {
                arm: *arm,
                n_total: n,
                result,
            });
        }
    }
    Ok(RobustnessReport {
        sizes: sizes.to_vec(),
        cells,
    })
}

/// One ordering assertion on a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub description: String,
    pub passed: bool,
}

fn label_mean(report: &ExperimentReport, method: Method, indicator: bool) -> Option<f64> {
    report.mean(&method.label(indicator))
}

/// Table-style orderings among whichever standard estimators are present:
/// `WMDL < MDL < WDL < DL` along the chain and WMDL below every meta-learner.
pub fn ordering_checks(report: &ExperimentReport) -> Vec<OrderingCheck> {
    let mut out = Vec::new();
    let mut push = |a: &str, am: f64, b: &str, bm: f64| {
        out.push(OrderingCheck {
            description: format!("{a} ({am:.4}) < {b} ({bm:.4})"),
            passed: am < bm,
        })
    };
    let mean = |m: Method| label_mean(report, m, false).map(|v| (m.label(false), v));
    match report.effect_mode {
        EffectMode::Homogeneous => {
            let chain: Vec<(String, f64)> = [Method::Wmdl, Method::Mdl, Method::Wdl, Method::Dl]
                .into_iter()
                .filter_map(mean)
                .collect();
            for w in chain.windows(2) {
                push(&w[0].0, w[0].1, &w[1].0, w[1].1);
            }
        }
        EffectMode::Heterogeneous => {
            if let Some((wl, wv)) = mean(Method::Wmdl) {
                for (l, v) in [Method::Mdl, Method::Wdl].into_iter().filter_map(mean) {
                    push(&wl, wv, &l, v);
                }
            }
        }
    }
    if let Some(wmdl) = label_mean(report, Method::Wmdl, false) {
        for m in [Method::TLearner, Method::SLearner, Method::XLearner] {
            for ind in [false, true] {
                if let Some(v) = label_mean(report, m, ind) {
                    push("WMDL", wmdl, &m.label(ind), v);
                }
            }
        }
    }
    out
}

/// Double-robustness trend checks between a small and a large sample size:
/// each single-corruption arm at least halves its MSE, and the
/// both-corrupted arm ends above both single-corruption arms.
pub fn robustness_checks(report: &RobustnessReport, small: usize, large: usize) -> Vec<OrderingCheck> {
    let get = |arm, n| report.mean(arm, n);
    let mut out = Vec::new();
    for arm in [RobustnessArm::MCorrupted, RobustnessArm::PCorrupted] {
        if let (Some(a), Some(b)) = (get(arm, small), get(arm, large)) {
            out.push(OrderingCheck {
                description: format!(
                    "{} MSE at n={large} ({b:.4}) < 0.5 x MSE at n={small} ({a:.4})",
                    arm.name()
                ),
                passed: b < 0.5 * a,
            });
        }
    }
    if let Some(both) = get(RobustnessArm::BothCorrupted, large) {
        for arm in [RobustnessArm::MCorrupted, RobustnessArm::PCorrupted] {
            if let Some(v) = get(arm, large) {
                out.push(OrderingCheck {
                    description: format!(
                        "both_corrupted ({both:.4}) > {} ({v:.4}) at n={large}",
                        arm.name()
                    ),
                    passed: both > v,
                });
            }
        }
    }
    out
}

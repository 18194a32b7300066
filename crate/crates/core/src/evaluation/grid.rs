//! Experiment grids: one base config expanded over scenarios, effect modes
//! and sample sizes.

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::data::{EffectMode, Scenario};
use crate::error::{Result, WmdlError};
use crate::learners::LearnerSpec;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GridAxes {
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub effect_modes: Vec<EffectMode>,
    #[serde(default)]
    pub n_totals: Vec<usize>,
    /// Final-stage learner substituted for every estimator in heterogeneous cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heterogeneous_final_learner: Option<LearnerSpec>,
}

/// An [`ExperimentConfig`] with optional grid axes. Empty axes keep the
/// template's value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentGrid {
    #[serde(flatten)]
    pub base: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridAxes>,
}

#[derive(Debug, Clone)]
pub struct GridCell {
    /// e.g. `I_homogeneous_3000`.
    pub label: String,
    pub config: ExperimentConfig,
}

fn mode_name(m: EffectMode) -> &'static str {
    match m {
        EffectMode::Homogeneous => "homogeneous",
        EffectMode::Heterogeneous => "heterogeneous",
    }
}

fn scenario_name(s: Scenario) -> &'static str {
    match s {
        Scenario::I => "I",
        Scenario::II => "II",
    }
}

fn or_default<T>(v: Vec<T>, d: T) -> Vec<T> {
    if v.is_empty() {
        vec![d]
    } else {
        v
    }
}

impl ExperimentGrid {
    pub fn is_grid(&self) -> bool {
        self.grid.is_some()
    }

    /// Cells in scenario, mode, size order. Each cell's estimators are
    /// switched to the cell's effect mode.
    pub fn expand(&self) -> Result<Vec<GridCell>> {
        let axes = self.grid.clone().unwrap_or_default();
        let dgp = &self.base.dgp;
        let scenarios = or_default(axes.scenarios, dgp.scenario);
        let modes = or_default(axes.effect_modes, dgp.effect_mode);
        let sizes = or_default(axes.n_totals, dgp.n_total);
        let mut cells = Vec::new();
        for &sc in &scenarios {
            for &mode in &modes {
                for &n in &sizes {
                    let mut cfg = self.base.clone();
                    cfg.dgp.scenario = sc;
                    cfg.dgp.effect_mode = mode;
                    cfg.dgp.n_total = n;
                    for e in &mut cfg.estimators {
                        e.spec.effect_mode = mode;
                        if mode == EffectMode::Heterogeneous {
                            if let Some(l) = &axes.heterogeneous_final_learner {
                                e.spec.final_learner = l.clone();
                            }
                        }
                    }
                    cfg.validate()?;
                    cfg.dgp.validate()?;
                    cells.push(GridCell {
                        label: format!("{}_{}_{}", scenario_name(sc), mode_name(mode), n),
                        config: cfg,
                    });
                }
            }
        }
        if cells.is_empty() {
            return Err(WmdlError::Config("grid expands to no cells".into()));
        }
        Ok(cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expands_full_product() {
        let j = r#"{
            "dgp": {"n_sources": 3, "n_total": 600, "scenario": "I", "effect_mode": "homogeneous"},
            "estimators": [{"method": "wmdl"}, {"method": "mdl"}],
            "grid": {"scenarios": ["I", "II"], "effect_modes": ["homogeneous", "heterogeneous"],
                     "n_totals": [3000, 5000],
                     "heterogeneous_final_learner": {"kind": "linear"}}
        }"#;
        let g: ExperimentGrid = serde_json::from_str(j).unwrap();
        let cells = g.expand().unwrap();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0].label, "I_homogeneous_3000");
        assert_eq!(cells[7].label, "II_heterogeneous_5000");
        let het = &cells[2].config;
        assert_eq!(het.estimators[0].spec.effect_mode, EffectMode::Heterogeneous);
        assert_eq!(het.estimators[0].spec.final_learner, LearnerSpec::linear());
        assert_ne!(cells[0].config.estimators[0].spec.final_learner, LearnerSpec::linear());
    }

    #[test]
    fn plain_config_is_one_cell() {
        let j = r#"{"dgp": {"n_sources": 3, "n_total": 600, "scenario": "II", "effect_mode": "homogeneous"},
                    "estimators": [{"method": "dl"}]}"#;
        let g: ExperimentGrid = serde_json::from_str(j).unwrap();
        assert!(!g.is_grid());
        let cells = g.expand().unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].config.dgp.n_total, 600);
    }
}

//! Multi-source observational data.
//!
//! Each source `s` contributes rows `(y, a, x, z_s)` where `x` is shared by
//! every source and `z_s` is specific to source `s`. Source `0` is reserved
//! for a covariates-only target population (transfer mode).

mod csv;
mod folds;
mod simulate;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use self::csv::{load_csv, read_csv, write_csv, CsvSchema};
pub use self::folds::{split_folds, FoldAssignment};
pub use self::simulate::{
    simulate, true_delta_het, true_delta_hom, DgpConfig, EffectMode, MainEffect, Scenario,
    SimulationTruth,
};

use crate::error::{Result, WmdlError};
use crate::matrix::Matrix;

/// Source id reserved for the covariates-only target population.
pub const TRANSFER_TARGET: usize = 0;

/// Binary treatment coded as `+1` / `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Treatment {
    Treated,
    Control,
}

impl Treatment {
    pub const BOTH: [Treatment; 2] = [Treatment::Treated, Treatment::Control];

    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Treatment::Treated => 1.0,
            Treatment::Control => -1.0,
        }
    }

    pub fn from_sign(a: f64) -> Option<Self> {
        if a == 1.0 {
            Some(Treatment::Treated)
        } else if a == -1.0 {
            Some(Treatment::Control)
        } else {
            None
        }
    }

    /// Index into two-element per-arm arrays: treated = 0, control = 1.
    #[inline]
    pub fn index(self) -> usize {
        match self {
            Treatment::Treated => 0,
            Treatment::Control => 1,
        }
    }
}

/// One row, as read from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub source_id: usize,
    pub y: Option<f64>,
    pub a: Option<Treatment>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// Column-oriented rows of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub id: usize,
    pub x: Matrix,
    pub z: Matrix,
    /// Empty for a covariates-only source.
    pub y: Vec<f64>,
    /// Empty for a covariates-only source.
    pub a: Vec<Treatment>,
}

impl SourceData {
    pub fn new(id: usize, x: Matrix, z: Matrix, y: Vec<f64>, a: Vec<Treatment>) -> Self {
        SourceData { id, x, z, y, a }
    }

    pub fn covariates_only(id: usize, x: Matrix) -> Self {
        let n = x.nrows();
        SourceData {
            id,
            x,
            z: Matrix::zeros(n, 0),
            y: Vec::new(),
            a: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_outcomes(&self) -> bool {
        !self.y.is_empty()
    }

    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }

    /// `(x, z)` features of every row.
    pub fn xz(&self) -> Matrix {
        self.x.hstack(&self.z).expect("row counts agree")
    }

    pub fn arm_rows(&self, arm: Treatment) -> Vec<usize> {
        (0..self.a.len()).filter(|&i| self.a[i] == arm).collect()
    }

    pub fn arm_count(&self, arm: Treatment) -> usize {
        self.a.iter().filter(|&&t| t == arm).count()
    }
}

/// Ground truth attached to simulated or hand-built data.
pub trait Oracle: Send + Sync + fmt::Debug {
    /// True main effect `m_s(x, z)`.
    fn main_effect(&self, s: usize, x: &[f64], z: &[f64]) -> f64;
    /// True `P(A = +1 | x, z, S = s)`.
    fn propensity(&self, s: usize, x: &[f64], z: &[f64]) -> f64;
    /// True treatment effect function `delta_s(x)`.
    fn delta(&self, s: usize, x: &[f64]) -> f64;
    /// Exact density ratio `f(x | target) / f(x | s)`, when known.
    fn density_ratio(&self, _target: usize, _s: usize, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// Collection of independent sources sharing the covariate block `x`.
#[derive(Clone)]
pub struct MultiSourceData {
    sources: Vec<SourceData>,
    d_x: usize,
    target_source: usize,
    oracle: Option<Arc<dyn Oracle>>,
}

impl fmt::Debug for MultiSourceData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MultiSourceData")
            .field("sources", &self.sources.iter().map(|s| (s.id, s.len())).collect::<Vec<_>>())
            .field("d_x", &self.d_x)
            .field("target_source", &self.target_source)
            .field("oracle", &self.oracle.is_some())
            .finish()
    }
}

impl MultiSourceData {
    /// Validates and assembles sources. The target is source 0 when a
    /// covariates-only source 0 is present, otherwise source 1 (or the
    /// lowest id if there is no source 1).
    pub fn new(mut sources: Vec<SourceData>, d_x: usize) -> Result<Self> {
        if sources.iter().all(|s| s.is_empty()) {
            return Err(WmdlError::Validation("no observations".into()));
        }
        sources.sort_by_key(|s| s.id);
        for w in sources.windows(2) {
            if w[0].id == w[1].id {
                return Err(WmdlError::Validation(format!(
                    "source {} appears twice",
                    w[0].id
                )));
            }
        }
        for s in &sources {
            if s.x.ncols() != d_x {
                return Err(WmdlError::Validation(format!(
                    "source {}: x has {} columns, expected {d_x}",
                    s.id,
                    s.x.ncols()
                )));
            }
            if s.z.nrows() != s.len() {
                return Err(WmdlError::Validation(format!(
                    "source {}: z has {} rows, x has {}",
                    s.id,
                    s.z.nrows(),
                    s.len()
                )));
            }
            if s.has_outcomes() {
                if s.y.len() != s.len() || s.a.len() != s.len() {
                    return Err(WmdlError::Validation(format!(
                        "source {}: outcome/treatment length differs from covariate rows",
                        s.id
                    )));
                }
                for arm in Treatment::BOTH {
                    if s.arm_count(arm) == 0 {
                        return Err(WmdlError::Validation(format!(
                            "source {}: treatment arm {:+} is empty",
                            s.id,
                            arm.sign()
                        )));
                    }
                }
                if let Some(i) = s.y.iter().position(|v| !v.is_finite()) {
                    return Err(WmdlError::Validation(format!(
                        "source {}: non-finite outcome at row {i}",
                        s.id
                    )));
                }
            } else {
                if s.id != TRANSFER_TARGET {
                    return Err(WmdlError::Validation(format!(
                        "source {}: outcomes missing; only source {TRANSFER_TARGET} may be covariates-only",
                        s.id
                    )));
                }
                if !s.a.is_empty() {
                    return Err(WmdlError::Validation(format!(
                        "source {}: treatments present without outcomes",
                        s.id
                    )));
                }
            }
        }
        let target_source = if sources
            .iter()
            .any(|s| s.id == TRANSFER_TARGET && !s.has_outcomes())
        {
            TRANSFER_TARGET
        } else if sources.iter().any(|s| s.id == 1) {
            1
        } else {
            sources[0].id
        };
        Ok(MultiSourceData {
            sources,
            d_x,
            target_source,
            oracle: None,
        })
    }

    /// Groups loose observations by source and validates them.
    pub fn from_observations(obs: &[Observation], d_x: usize) -> Result<Self> {
        use std::collections::BTreeMap;
        let mut groups: BTreeMap<usize, Vec<&Observation>> = BTreeMap::new();
        for o in obs {
            groups.entry(o.source_id).or_default().push(o);
        }
        let mut sources = Vec::with_capacity(groups.len());
        for (id, rows) in groups {
            let d_z = rows[0].z.len();
            if let Some(bad) = rows.iter().find(|o| o.z.len() != d_z) {
                return Err(WmdlError::Validation(format!(
                    "source {id}: z has length {} but {d_z} was declared",
                    bad.z.len()
                )));
            }
            let xs: Vec<&[f64]> = rows.iter().map(|o| o.x.as_slice()).collect();
            let zs: Vec<&[f64]> = rows.iter().map(|o| o.z.as_slice()).collect();
            let x = Matrix::from_rows(&xs, d_x).map_err(|_| {
                WmdlError::Validation(format!("source {id}: x length differs from {d_x}"))
            })?;
            let z = Matrix::from_rows(&zs, d_z)?;
            let with_outcome = rows.iter().filter(|o| o.y.is_some() && o.a.is_some()).count();
            let (y, a) = if with_outcome == 0 {
                (Vec::new(), Vec::new())
            } else if with_outcome == rows.len() {
                (
                    rows.iter().map(|o| o.y.unwrap()).collect(),
                    rows.iter().map(|o| o.a.unwrap()).collect(),
                )
            } else {
                return Err(WmdlError::Validation(format!(
                    "source {id}: some rows lack outcome or treatment"
                )));
            };
            sources.push(SourceData::new(id, x, z, y, a));
        }
        MultiSourceData::new(sources, d_x)
    }

    pub fn with_oracle(mut self, oracle: Arc<dyn Oracle>) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn with_target(mut self, target: usize) -> Result<Self> {
        if self.source(target).is_none() {
            return Err(WmdlError::Config(format!("target source {target} not present")));
        }
        self.target_source = target;
        Ok(self)
    }

    pub fn oracle(&self) -> Option<&Arc<dyn Oracle>> {
        self.oracle.as_ref()
    }

    pub fn sources(&self) -> &[SourceData] {
        &self.sources
    }

    pub fn source(&self, id: usize) -> Option<&SourceData> {
        self.sources.iter().find(|s| s.id == id)
    }

    /// Position of source `id` within [`sources`](Self::sources).
    pub fn position(&self, id: usize) -> Option<usize> {
        self.sources.iter().position(|s| s.id == id)
    }

    pub fn source_ids(&self) -> Vec<usize> {
        self.sources.iter().map(|s| s.id).collect()
    }

    /// Sources carrying outcomes and treatments.
    pub fn outcome_sources(&self) -> impl Iterator<Item = &SourceData> + '_ {
        self.sources.iter().filter(|s| s.has_outcomes())
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_z(&self, id: usize) -> Option<usize> {
        self.source(id).map(|s| s.d_z())
    }

    pub fn target_source(&self) -> usize {
        self.target_source
    }

    /// True when source 0 is a covariates-only target population.
    pub fn is_transfer(&self) -> bool {
        self.source(TRANSFER_TARGET)
            .is_some_and(|s| !s.has_outcomes())
    }

    pub fn n_rows(&self) -> usize {
        self.sources.iter().map(|s| s.len()).sum()
    }

    pub fn n_outcome_rows(&self) -> usize {
        self.outcome_sources().map(|s| s.len()).sum()
    }

    /// Keeps only source `id`, which becomes the target. The oracle is retained.
    pub fn restrict_to(&self, id: usize) -> Result<Self> {
        let src = self
            .source(id)
            .ok_or_else(|| WmdlError::Config(format!("source {id} not present")))?
            .clone();
        let mut out = MultiSourceData::new(vec![src], self.d_x)?;
        out.target_source = id;
        out.oracle = self.oracle.clone();
        Ok(out)
    }

    /// Flattens back into row records, source by source.
    pub fn observations(&self) -> Vec<Observation> {
        let mut out = Vec::with_capacity(self.n_rows());
        for s in &self.sources {
            for i in 0..s.len() {
                out.push(Observation {
                    source_id: s.id,
                    y: s.y.get(i).copied(),
                    a: s.a.get(i).copied(),
                    x: s.x.row(i).to_vec(),
                    z: s.z.row(i).to_vec(),
                });
            }
        }
        out
    }
}

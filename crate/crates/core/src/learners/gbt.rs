//! Gradient-boosted regression trees with sample weights.
//!
//! Features are bucketed into at most 256 quantile bins per column; split
//! search scans per-node gradient histograms. Squared loss uses leaf values
//! equal to the weighted mean residual, logistic loss a Newton step.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WmdlError};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, rng_from};

const MAX_BINS: usize = 256;
/// L2 term on logistic leaves; keeps pure leaves finite.
const LOGISTIC_LEAF_L2: f64 = 1.0;
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub learning_rate: f64,
    pub max_depth: usize,
    pub n_rounds: usize,
    pub min_leaf: usize,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            learning_rate: 0.05,
            max_depth: 3,
            n_rounds: 400,
            min_leaf: 10,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(WmdlError::Config("learning_rate must be positive".into()));
        }
        if self.max_depth < 1 || self.n_rounds < 1 || self.min_leaf < 1 {
            return Err(WmdlError::Config(
                "max_depth, n_rounds and min_leaf must be at least 1".into(),
            ));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(WmdlError::Config("subsample must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Squared,
    Logistic,
}

/// One regression tree. `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }
}

/// Additive tree ensemble. For logistic loss the output is a log-odds score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub loss: Loss,
    pub n_features: usize,
    pub base_score: f64,
    pub trees: Vec<TreeNode>,
}

impl GbtModel {
    pub fn raw_score(&self, x: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

/// Column-major binned copy of the training features.
struct Binned {
    n: usize,
    bins: Vec<u8>,
    cuts: Vec<Vec<f64>>,
}

impl Binned {
    fn new(x: &Matrix) -> Self {
        let (n, d) = (x.nrows(), x.ncols());
        let mut bins = vec![0u8; n * d];
        let mut cuts = Vec::with_capacity(d);
        let mut col = vec![0.0; n];
        for f in 0..d {
            for (i, v) in col.iter_mut().enumerate() {
                *v = x.get(i, f);
            }
            let c = column_cuts(&col);
            for i in 0..n {
                bins[f * n + i] = c.partition_point(|&t| t < col[i]) as u8;
            }
            cuts.push(c);
        }
        Binned { n, bins, cuts }
    }

    #[inline]
    fn column(&self, f: usize) -> &[u8] {
        &self.bins[f * self.n..(f + 1) * self.n]
    }
}

/// Split thresholds for one column: midpoints between consecutive distinct
/// values, thinned to row quantiles when there are too many.
fn column_cuts(col: &[f64]) -> Vec<f64> {
    let mut sorted = col.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut uniq = sorted.clone();
    uniq.dedup();
    if uniq.len() <= 1 {
        return Vec::new();
    }
    let lefts: Vec<usize> = if uniq.len() <= MAX_BINS {
        (0..uniq.len() - 1).collect()
    } else {
        let n = sorted.len();
        let mut idx: Vec<usize> = (1..MAX_BINS)
            .map(|k| {
                let v = sorted[(n * k / MAX_BINS).min(n - 1)];
                uniq.partition_point(|&u| u < v)
            })
            .filter(|&i| i + 1 < uniq.len())
            .collect();
        idx.dedup();
        idx
    };
    lefts.into_iter().map(|i| 0.5 * (uniq[i] + uniq[i + 1])).collect()
}

struct Grower<'a> {
    binned: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbtParams,
    lambda: f64,
}

struct BestSplit {
    feature: usize,
    bin: usize,
    gain: f64,
}

impl Grower<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        if h + self.lambda <= 0.0 {
            0.0
        } else {
            -g / (h + self.lambda) * self.params.learning_rate
        }
    }

    fn grow(&self, rows: &mut [u32], depth: usize) -> TreeNode {
        let (mut g, mut h) = (0.0, 0.0);
        for &r in rows.iter() {
            g += self.grad[r as usize];
            h += self.hess[r as usize];
        }
        let leaf = TreeNode::Leaf {
            value: self.leaf_value(g, h),
        };
        if depth >= self.params.max_depth || rows.len() < 2 * self.params.min_leaf || h <= 0.0 {
            return leaf;
        }
        let Some(best) = self.best_split(rows, g, h) else {
            return leaf;
        };
        let col = self.binned.column(best.feature);
        let mut mid = 0;
        for i in 0..rows.len() {
            if col[rows[i] as usize] as usize <= best.bin {
                rows.swap(i, mid);
                mid += 1;
            }
        }
        let (l, r) = rows.split_at_mut(mid);
        TreeNode::Split {
            feature: best.feature,
            threshold: self.binned.cuts[best.feature][best.bin],
            left: Box::new(self.grow(l, depth + 1)),
            right: Box::new(self.grow(r, depth + 1)),
        }
    }

    fn best_split(&self, rows: &[u32], g: f64, h: f64) -> Option<BestSplit> {
        let lambda = self.lambda;
        let parent = g * g / (h + lambda);
        let min_leaf = self.params.min_leaf;
        let h_floor = 1e-12 * h;
        let mut best: Option<BestSplit> = None;
        let mut hist = vec![(0.0f64, 0.0f64, 0usize); MAX_BINS];
        for (f, cuts) in self.binned.cuts.iter().enumerate() {
            if cuts.is_empty() {
                continue;
            }
            let nb = cuts.len() + 1;
            hist[..nb].iter_mut().for_each(|e| *e = (0.0, 0.0, 0));
            let col = self.binned.column(f);
            for &r in rows {
                let e = &mut hist[col[r as usize] as usize];
                e.0 += self.grad[r as usize];
                e.1 += self.hess[r as usize];
                e.2 += 1;
            }
            let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0usize);
            for (b, e) in hist[..nb - 1].iter().enumerate() {
                gl += e.0;
                hl += e.1;
                cl += e.2;
                let cr = rows.len() - cl;
                if cl < min_leaf {
                    continue;
                }
                if cr < min_leaf {
                    break;
                }
                let (gr, hr) = (g - gl, h - hl);
                if hl <= h_floor || hr <= h_floor {
                    continue;
                }
                let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
                if gain > MIN_GAIN && best.as_ref().is_none_or(|bs| gain > bs.gain) {
                    best = Some(BestSplit {
                        feature: f,
                        bin: b,
                        gain,
                    });
                }
            }
        }
        best
    }
}

fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Fits a boosted ensemble. `targets` are real responses for squared loss
/// and 0/1 labels for logistic loss.
pub fn fit_gbt(
    params: &GbtParams,
    loss: Loss,
    features: &Matrix,
    targets: &[f64],
    weights: &[f64],
) -> Result<GbtModel> {
    params.validate()?;
    let n = features.nrows();
    if targets.len() != n || weights.len() != n {
        return Err(WmdlError::Dimension {
            expected: n,
            got: targets.len().min(weights.len()),
        });
    }
    if n == 0 {
        return Err(WmdlError::Fit("no training rows".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(WmdlError::Fit("weights must be nonnegative and not all zero".into()));
    }
    let wmean = weights.iter().zip(targets).map(|(w, y)| w * y).sum::<f64>() / wsum;
    let (base_score, lambda) = match loss {
        Loss::Squared => (wmean, 0.0),
        Loss::Logistic => {
            let p = wmean.clamp(1e-6, 1.0 - 1e-6);
            ((p / (1.0 - p)).ln(), LOGISTIC_LEAF_L2)
        }
    };
    let binned = Binned::new(features);
    let mut score = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.n_rounds);
    let n_sub = ((n as f64) * params.subsample).ceil().max(1.0) as usize;
    let all_rows: Vec<u32> = (0..n as u32).collect();

    for round in 0..params.n_rounds {
        for i in 0..n {
            let w = weights[i];
            match loss {
                Loss::Squared => {
                    grad[i] = w * (score[i] - targets[i]);
                    hess[i] = w;
                }
                Loss::Logistic => {
                    let p = expit(score[i]);
                    grad[i] = w * (p - targets[i]);
                    hess[i] = w * p * (1.0 - p);
                }
            }
        }
        let mut rows: Vec<u32> = if n_sub < n {
            let mut rng = rng_from(derive_seed(params.seed, round as u64));
            let mut r: Vec<u32> = sample(&mut rng, n, n_sub).into_iter().map(|i| i as u32).collect();
            r.sort_unstable();
            r
        } else {
            all_rows.clone()
        };
        let grower = Grower {
            binned: &binned,
            grad: &grad,
            hess: &hess,
            params,
            lambda,
        };
        let tree = grower.grow(&mut rows, 0);
        if n_sub == n && tree == (TreeNode::Leaf { value: 0.0 }) {
            // deterministic rounds from here on would all be empty
            trees.push(tree);
            break;
        }
        for (i, s) in score.iter_mut().enumerate() {
            *s += tree.predict(features.row(i));
        }
        trees.push(tree);
    }
    Ok(GbtModel {
        loss,
        n_features: features.ncols(),
        base_score,
        trees,
    })
}

//! Fit diagnostics: nuisance summaries and weight decompositions.

use std::io::Write;

use serde::Serialize;

use crate::data::MultiSourceData;
use crate::error::Result;
use crate::nuisance::NuisanceSet;
use crate::weighting::BatchWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Stat> {
        let (mut n, mut sum, mut min, mut max) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            n += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        (n > 0).then(|| Stat {
            mean: sum / n as f64,
            min,
            max,
        })
    }
}

/// Out-of-fold nuisance values for one source.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceNuisanceSummary {
    pub source: usize,
    pub n: usize,
    pub main_effect: Option<Stat>,
    pub propensity_treated: Option<Stat>,
    pub marginal_propensity_treated: Option<Stat>,
    pub variance_treated: Option<Stat>,
    pub variance_control: Option<Stat>,
    /// Normalized selection propensity of the row's own source.
    pub selection_own: Option<Stat>,
}

/// Weight decomposition for one source.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceWeightSummary {
    pub source: usize,
    pub n: usize,
    pub transfer_term: Option<Stat>,
    pub information_term: Option<Stat>,
    pub combined: Option<Stat>,
    pub final_weight: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub rows_used: usize,
    pub nuisances: Vec<SourceNuisanceSummary>,
    pub weights: Vec<SourceWeightSummary>,
    pub weight_target: Option<usize>,
    pub weight_cap: Option<f64>,
    pub n_truncated: usize,
    /// Final weights per source, kept for histograms.
    #[serde(skip)]
    pub raw_weights: Vec<(usize, Vec<f64>)>,
}

impl FitDiagnostics {
    pub fn new(
        data: &MultiSourceData,
        rows_used: usize,
        nuisances: Option<&NuisanceSet>,
        weights: Option<&BatchWeights>,
    ) -> Self {
        let mut nsum = Vec::new();
        if let Some(ns) = nuisances {
            for (pos, src) in data.sources().iter().enumerate() {
                let Some(nu) = ns.source(src.id) else { continue };
                let sel = ns.selection.as_ref().and_then(|sel| {
                    let col = sel.column(src.id)?;
                    Stat::of(sel.oof[pos].iter().map(|p| p[col]))
                });
                nsum.push(SourceNuisanceSummary {
                    source: src.id,
                    n: src.len(),
                    main_effect: Stat::of(nu.m_oof.iter().copied()),
                    propensity_treated: Stat::of(nu.p_oof.iter().copied()),
                    marginal_propensity_treated: nu
                        .p_marg
                        .as_ref()
                        .and_then(|p| Stat::of(p.oof.iter().copied())),
                    variance_treated: nu
                        .variance
                        .as_ref()
                        .and_then(|v| Stat::of(v[0].oof.iter().copied())),
                    variance_control: nu
                        .variance
                        .as_ref()
                        .and_then(|v| Stat::of(v[1].oof.iter().copied())),
                    selection_own: sel,
                });
            }
        }
        let mut wsum = Vec::new();
        let mut raw = Vec::new();
        if let Some(bw) = weights {
            for (pos, src) in data.sources().iter().enumerate() {
                if !src.has_outcomes() {
                    continue;
                }
                let comps = &bw.components[pos];
                wsum.push(SourceWeightSummary {
                    source: src.id,
                    n: src.len(),
                    transfer_term: Stat::of(comps.iter().map(|c| c.transfer_term)),
                    information_term: Stat::of(comps.iter().map(|c| c.information_term)),
                    combined: Stat::of(comps.iter().map(|c| c.combined)),
                    final_weight: Stat::of(bw.weights[pos].iter().copied()),
                });
                raw.push((src.id, bw.weights[pos].clone()));
            }
        }
        FitDiagnostics {
            rows_used,
            nuisances: nsum,
            weights: wsum,
            weight_target: weights.and_then(|w| w.target),
            weight_cap: weights.and_then(|w| w.cap),
            n_truncated: weights.map_or(0, |w| w.n_truncated),
            raw_weights: raw,
        }
    }

    /// Nuisance summary as pretty JSON.
    pub fn write_nuisance_json(&self, w: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            rows_used: usize,
            sources: &'a [SourceNuisanceSummary],
        }
        serde_json::to_writer_pretty(
            w,
            &Out {
                rows_used: self.rows_used,
                sources: &self.nuisances,
            },
        )?;
        Ok(())
    }

    /// Per-source R/I decomposition summary as CSV.
    pub fn write_weight_summary_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "source", "n", "component", "mean", "min", "max",
        ])?;
        for s in &self.weights {
            for (name, st) in [
                ("transfer_term", s.transfer_term),
                ("information_term", s.information_term),
                ("combined", s.combined),
                ("final_weight", s.final_weight),
            ] {
                if let Some(st) = st {
                    out.write_record([
                        s.source.to_string(),
                        s.n.to_string(),
                        name.to_string(),
                        st.mean.to_string(),
                        st.min.to_string(),
                        st.max.to_string(),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Per-source histogram of final weights over `bins` equal-width bins
    /// spanning the pooled range.
    pub fn write_weight_histogram_csv(&self, bins: usize, w: impl Write) -> Result<()> {
        let bins = bins.max(1);
        let all = self.raw_weights.iter().flat_map(|(_, v)| v.iter().copied());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["source", "bin_lo", "bin_hi", "count"])?;
        if lo.is_finite() {
            let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
            for (id, ws) in &self.raw_weights {
                let mut counts = vec![0usize; bins];
                for &v in ws {
                    let b = (((v - lo) / width) as usize).min(bins - 1);
                    counts[b] += 1;
                }
                for (b, c) in counts.iter().enumerate() {
                    let l = lo + b as f64 * width;
                    out.write_record([
                        id.to_string(),
                        l.to_string(),
                        (l + width).to_string(),
                        c.to_string(),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentReport;
use crate::error::{Result, WmdlError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = WmdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(WmdlError::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the report under `dir`. CSV produces `summary.csv` (one row per
/// estimator) and `replications.csv` (columns estimator, replication, mse;
/// empty mse for failed fits). JSON produces `report.json`, with `null` for
/// missing values. Returns the files written.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    match format {
        ReportFormat::Json => {
            let path = dir.join("report.json");
            let mut w = BufWriter::new(File::create(&path)?);
            serde_json::to_writer_pretty(&mut w, report)?;
            w.flush()?;
            Ok(vec![path])
        }
        ReportFormat::Csv => {
            let summary = dir.join("summary.csv");
            let mut w = csv::Writer::from_path(&summary)?;
            w.write_record(["estimator", "mean_mse", "sd_mse", "n_missing", "wall_time_s"])?;
            for r in &report.results {
                w.write_record([
                    r.name.clone(),
                    cell(r.mean_mse),
                    cell(r.sd_mse),
                    r.n_missing().to_string(),
                    r.wall_time.to_string(),
                ])?;
            }
            w.flush()?;
            let long = dir.join("replications.csv");
            let mut w = csv::Writer::from_path(&long)?;
            w.write_record(["estimator", "replication", "mse"])?;
            for r in &report.results {
                for (i, m) in r.mse.iter().enumerate() {
                    w.write_record([r.name.clone(), i.to_string(), cell(*m)])?;
                }
            }
            w.flush()?;
            Ok(vec![summary, long])
        }
    }
}

pub fn read_report_json(path: &Path) -> Result<ExperimentReport> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

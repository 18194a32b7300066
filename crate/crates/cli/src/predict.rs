use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use wmdl::estimators::load_estimate;
use wmdl::WmdlError;

use crate::Log;

/// Reads `x1..xd` (and `source`, if present) from `data` and writes
/// `row,source,delta,tau`.
pub fn cmd_predict(
    model: &Path,
    data: &Path,
    out: &Path,
    source: Option<usize>,
    log: &Log,
) -> Result<()> {
    let (estimate, _) = load_estimate(model).with_context(|| format!("cannot load model {}", model.display()))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(data)
        .with_context(|| format!("cannot open {}", data.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let x_cols: Vec<usize> = (1..=estimate.d_x)
        .map(|j| {
            col(&format!("x{j}"))
                .ok_or_else(|| WmdlError::Schema(format!("missing column x{j}")))
        })
        .collect::<std::result::Result<_, _>>()?;
    let source_col = col("source");

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out)?));
    w.write_record(["row", "source", "delta", "tau"])?;
    let mut n = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |c: usize, what: &str| -> Result<f64> {
            rec.get(c)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|_| {
                    WmdlError::Parse {
                        row: i + 2,
                        message: format!("{what}: {:?} is not a number", rec.get(c).unwrap_or("")),
                    }
                    .into()
                })
        };
        let x: Vec<f64> = x_cols
            .iter()
            .enumerate()
            .map(|(j, &c)| parse(c, &format!("x{}", j + 1)))
            .collect::<Result<_>>()?;
        let s = match source_col {
            Some(c) if !rec.get(c).unwrap_or("").is_empty() => Some(parse(c, "source")? as usize),
            _ => source,
        };
        let delta = estimate.predict_delta(&x, s)?;
        w.write_record([
            i.to_string(),
            s.map(|v| v.to_string()).unwrap_or_default(),
            delta.to_string(),
            (2.0 * delta).to_string(),
        ])?;
        n += 1;
    }
    w.flush()?;
    log.say(format!("wrote {n} predictions to {}", out.display()));
    Ok(())
}

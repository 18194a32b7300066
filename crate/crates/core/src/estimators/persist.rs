//! Versioned JSON persistence for fitted estimates.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CateEstimate, EstimatorSpec};
use crate::error::{Result, WmdlError};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct EnvelopeRef<'a> {
    format_version: u32,
    spec: Option<&'a EstimatorSpec>,
    estimate: &'a CateEstimate,
}

#[derive(Deserialize)]
struct Envelope {
    format_version: u32,
    #[serde(default)]
    spec: Option<EstimatorSpec>,
    estimate: CateEstimate,
}

/// Writes `estimate` (and optionally the spec that produced it) as JSON.
pub fn save_estimate(path: &Path, estimate: &CateEstimate, spec: Option<&EstimatorSpec>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &EnvelopeRef {
            format_version: MODEL_FORMAT_VERSION,
            spec,
            estimate,
        },
    )?;
    w.flush()?;
    Ok(())
}

/// Reads an estimate written by [`save_estimate`].
pub fn load_estimate(path: &Path) -> Result<(CateEstimate, Option<EstimatorSpec>)> {
    let env: Envelope = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if env.format_version != MODEL_FORMAT_VERSION {
        return Err(WmdlError::Schema(format!(
            "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
            env.format_version
        )));
    }
    Ok((env.estimate, env.spec))
}

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MultiSourceData, Observation, Treatment, TRANSFER_TARGET};
use crate::error::{Result, WmdlError};

/// Column mapping for multi-source CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub source: String,
    pub outcome: String,
    pub treatment: String,
    pub x: Vec<String>,
    /// Source-specific covariate columns used by every source unless
    /// overridden in `z_by_source`.
    #[serde(default)]
    pub z: Vec<String>,
    #[serde(default)]
    pub z_by_source: BTreeMap<usize, Vec<String>>,
    /// Source whose rows may lack outcome and treatment.
    #[serde(default = "default_transfer_target")]
    pub transfer_target: Option<usize>,
}

fn default_transfer_target() -> Option<usize> {
    Some(TRANSFER_TARGET)
}

impl CsvSchema {
    /// Conventional layout: `source`, `y`, `a`, `x1..`, `z1..`, with every
    /// `z` column declared for every source.
    pub fn infer(headers: &[String]) -> Result<Self> {
        let numbered = |prefix: char| {
            let mut cols: Vec<(usize, String)> = headers
                .iter()
                .filter_map(|h| {
                    h.strip_prefix(prefix)
                        .and_then(|rest| rest.parse::<usize>().ok())
                        .map(|k| (k, h.clone()))
                })
                .collect();
            cols.sort();
            cols.into_iter().map(|(_, h)| h).collect::<Vec<_>>()
        };
        let x = numbered('x');
        if x.is_empty() {
            return Err(WmdlError::Schema("no x1.. covariate columns".into()));
        }
        Ok(CsvSchema {
            source: "source".into(),
            outcome: "y".into(),
            treatment: "a".into(),
            x,
            z: numbered('z'),
            z_by_source: BTreeMap::new(),
            transfer_target: default_transfer_target(),
        })
    }

    fn z_for(&self, source: usize) -> &[String] {
        self.z_by_source.get(&source).unwrap_or(&self.z)
    }
}

fn parse_f64(cell: &str, row: usize, col: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| WmdlError::Parse {
        row,
        message: format!("column {col}: {cell:?} is not a number"),
    })
}

fn parse_treatment(cell: &str, row: usize) -> Result<Treatment> {
    let v = parse_f64(cell, row, "treatment")?;
    if v == 1.0 {
        Ok(Treatment::Treated)
    } else if v == 0.0 || v == -1.0 {
        Ok(Treatment::Control)
    } else {
        Err(WmdlError::Validation(format!(
            "row {row}: treatment {cell:?} is not one of 0, 1, -1"
        )))
    }
}

/// Reads multi-source data from CSV text. `schema = None` infers the layout
/// from the header.
pub fn read_csv<R: Read>(reader: R, schema: Option<&CsvSchema>) -> Result<MultiSourceData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let inferred;
    let schema = match schema {
        Some(s) => s,
        None => {
            inferred = CsvSchema::infer(&headers)?;
            &inferred
        }
    };
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| WmdlError::Schema(format!("missing column {name:?}")))
    };
    let src_col = col(&schema.source)?;
    let y_col = col(&schema.outcome)?;
    let a_col = col(&schema.treatment)?;
    let x_cols = schema.x.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let mut z_cols: BTreeMap<String, usize> = BTreeMap::new();
    for name in schema.z.iter().chain(schema.z_by_source.values().flatten()) {
        z_cols.insert(name.clone(), col(name)?);
    }

    let mut obs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let source_val = parse_f64(cell(src_col), row, &schema.source)?;
        if source_val < 0.0 || source_val.fract() != 0.0 {
            return Err(WmdlError::Parse {
                row,
                message: format!("source {source_val} is not a nonnegative integer"),
            });
        }
        let source_id = source_val as usize;
        let is_target = schema.transfer_target == Some(source_id);
        let (y_cell, a_cell) = (cell(y_col), cell(a_col));
        let (y, a) = if is_target {
            (None, None)
        } else {
            if y_cell.is_empty() || a_cell.is_empty() {
                return Err(WmdlError::Validation(format!(
                    "row {row}: source {source_id} is missing outcome or treatment"
                )));
            }
            (
                Some(parse_f64(y_cell, row, &schema.outcome)?),
                Some(parse_treatment(a_cell, row)?),
            )
        };
        let x = x_cols
            .iter()
            .zip(&schema.x)
            .map(|(&c, name)| parse_f64(cell(c), row, name))
            .collect::<Result<Vec<_>>>()?;
        let z = if is_target {
            Vec::new()
        } else {
            schema
                .z_for(source_id)
                .iter()
                .map(|name| {
                    let v = cell(z_cols[name]);
                    if v.is_empty() {
                        Err(WmdlError::Validation(format!(
                            "source {source_id}: row {row} lacks declared column {name:?}"
                        )))
                    } else {
                        parse_f64(v, row, name)
                    }
                })
                .collect::<Result<Vec<_>>>()?
        };
        obs.push(Observation {
            source_id,
            y,
            a,
            x,
            z,
        });
    }
    if obs.is_empty() {
        return Err(WmdlError::Validation("no observations".into()));
    }
    MultiSourceData::from_observations(&obs, schema.x.len())
}

pub fn load_csv(path: impl AsRef<Path>, schema: Option<&CsvSchema>) -> Result<MultiSourceData> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f), schema)
}

/// Writes data in the conventional layout read by [`CsvSchema::infer`].
/// Sources with fewer `z` columns than the widest leave trailing cells empty.
pub fn write_csv<W: Write>(data: &MultiSourceData, writer: W) -> Result<()> {
    let d_x = data.d_x();
    let d_z = data.sources().iter().map(|s| s.d_z()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["source".to_string(), "y".into(), "a".into()];
    header.extend((1..=d_x).map(|j| format!("x{j}")));
    header.extend((1..=d_z).map(|j| format!("z{j}")));
    w.write_record(&header)?;
    for s in data.sources() {
        for i in 0..s.len() {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(s.id.to_string());
            rec.push(s.y.get(i).map_or(String::new(), |v| v.to_string()));
            rec.push(s.a.get(i).map_or(String::new(), |a| (a.sign() as i32).to_string()));
            rec.extend(s.x.row(i).iter().map(|v| v.to_string()));
            let z = s.z.row(i);
            rec.extend((0..d_z).map(|j| z.get(j).map_or(String::new(), |v| v.to_string())));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

//! Result files.
//!
//! `run_<r>.csv` has one row per time index with columns
//! `t, kind, missing, x_hat_<i>..., theta_hat_<name>..., theta_std_<name>...,
//! h_star, kl, ess`. Numbers use the shortest representation that parses
//! back to the same `f64`; an absent `kl` is an empty field.

use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::mc::McSummary;
use crate::error::{Error, Result};
use crate::filter::EstimateRecord;
use crate::models::Dataset;

pub fn csv_header(param_names: &[String], state_dim: usize) -> Vec<String> {
    let mut h = vec!["t".to_string(), "kind".into(), "missing".into()];
    h.extend((0..state_dim).map(|i| format!("x_hat_{i}")));
    h.extend(param_names.iter().map(|n| format!("theta_hat_{n}")));
    h.extend(param_names.iter().map(|n| format!("theta_std_{n}")));
    h.extend(["h_star".to_string(), "kl".into(), "ess".into()]);
    h
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn write_records_csv(
    path: &Path,
    records: &[EstimateRecord],
    param_names: &[String],
    state_dim: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(csv_header(param_names, state_dim))
        .map_err(|e| csv_err(path, e))?;
    for r in records {
        let mut row = vec![r.t.to_string(), r.kind.as_str().to_string(), r.missing.to_string()];
        row.extend(r.x_hat.iter().map(f64::to_string));
        row.extend(r.theta_hat.iter().map(f64::to_string));
        row.extend(r.theta_std().iter().map(f64::to_string));
        row.push(r.h_star.to_string());
        row.push(r.kl.map(|v| v.to_string()).unwrap_or_default());
        row.push(r.ess.to_string());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One parsed row of a `run_<r>.csv` file.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRecord {
    pub t: usize,
    pub kind: String,
    pub missing: bool,
    pub x_hat: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub theta_std: Vec<f64>,
    pub h_star: f64,
    pub kl: Option<f64>,
    pub ess: f64,
}

pub fn read_records_csv(path: &Path) -> Result<Vec<CsvRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let count = |prefix: &str| headers.iter().filter(|h| h.starts_with(prefix)).count();
    let (nx, r) = (count("x_hat_"), count("theta_hat_"));
    if headers.len() != 6 + nx + 2 * r {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "unexpected header".into(),
        });
    }
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number '{s}'")));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let f: Vec<&str> = row.iter().collect();
        let nums = |a: usize, b: usize| f[a..b].iter().map(|s| num(s)).collect::<Result<Vec<_>>>();
        let o = 3;
        out.push(CsvRecord {
            t: f[0].parse().map_err(|_| bad(format!("bad time index '{}'", f[0])))?,
            kind: f[1].to_string(),
            missing: f[2].parse().map_err(|_| bad(format!("bad flag '{}'", f[2])))?,
            x_hat: nums(o, o + nx)?,
            theta_hat: nums(o + nx, o + nx + r)?,
            theta_std: nums(o + nx + r, o + nx + 2 * r)?,
            h_star: num(f[o + nx + 2 * r])?,
            kl: match f[o + nx + 2 * r + 1] {
                "" => None,
                s => Some(num(s)?),
            },
            ess: num(f[o + nx + 2 * r + 2])?,
        });
    }
    Ok(out)
}

/// Ground truth: `t, u_<i>..., x_<i>..., y_<i>..., missing`.
pub fn write_truth_csv(path: &Path, data: &Dataset, missing: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let first = data.measurements.first();
    let nu = first.and_then(|m| m.u.as_ref()).map_or(0, Vec::len);
    let ny = first.and_then(|m| m.y.as_ref()).map_or(0, Vec::len);
    let nx = data.states.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend((0..nu).map(|i| format!("u_{i}")));
    header.extend((0..nx).map(|i| format!("x_{i}")));
    header.extend((0..ny).map(|i| format!("y_{i}")));
    header.push("missing".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for m in &data.measurements {
        let mut row = vec![m.t.to_string()];
        if let Some(u) = &m.u {
            row.extend(u.iter().map(f64::to_string));
        }
        row.extend(data.states[m.t].iter().map(f64::to_string));
        if let Some(y) = &m.y {
            row.extend(y.iter().map(f64::to_string));
        }
        row.push(missing.binary_search(&m.t).is_ok().to_string());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, summary: &McSummary) -> Result<()> {
    write_json(path, summary)
}

pub fn read_summary(path: &Path) -> Result<McSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_config_echo(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_json(path, cfg)
}

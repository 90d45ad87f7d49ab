//! Files written by the commands and read back by `report`.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::AlgorithmOutcome;
use crate::bomhe::RunRecord;
use crate::gp::GpHyperParams;
use crate::sim::Trajectory;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const META_FILE: &str = "meta.json";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const REPORT_MARKER: &str = "report.json";
pub const MAE_TABLE_FILE: &str = "mae_table.csv";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const SERIES_FILE: &str = "series.csv";

pub const TOOL: &str = "bomhe";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn estimates_file(algorithm: &str) -> String {
    format!("estimates_{algorithm}.csv")
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> io::Result<()> {
    let n_x = traj.states[0].len();
    let n_y = traj.measurements[0].len();
    let n_u = traj.inputs.first().map_or(0, |u| u.len());
    let mut header = vec!["k".to_string()];
    header.extend(numbered("x", n_x));
    header.extend(numbered("y", n_y));
    header.extend(numbered("u", n_u));
    let rows = (0..traj.states.len()).map(|k| {
        let mut row = vec![k.to_string()];
        row.extend(traj.states[k].iter().map(|v| fmt_f64(*v)));
        row.extend(traj.measurements[k].iter().map(|v| fmt_f64(*v)));
        // The record has no input after the last transition.
        match traj.inputs.get(k) {
            Some(u) => row.extend(u.iter().map(|v| fmt_f64(*v))),
            None => row.extend((0..n_u).map(|_| String::new())),
        }
        row
    });
    write_csv(path, &header, rows)
}

pub fn write_estimates(path: &Path, estimates: &[DVector<f64>]) -> io::Result<()> {
    let n_x = estimates.first().map_or(0, |x| x.len());
    let mut header = vec!["k".to_string()];
    header.extend(numbered("xhat", n_x));
    let rows = estimates.iter().enumerate().map(|(k, x)| {
        let mut row = vec![k.to_string()];
        row.extend(x.iter().map(|v| fmt_f64(*v)));
        row
    });
    write_csv(path, &header, rows)
}

pub fn write_convergence(path: &Path, records: &[RunRecord]) -> io::Result<()> {
    let d = records.first().map_or(0, |r| r.theta.len());
    let mut header: Vec<String> = ["i", "j", "best_so_far", "mae", "phase", "failed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(numbered("theta", d));
    let rows = records.iter().map(|r| {
        let mut row = vec![
            r.index.to_string(),
            fmt_f64(r.j),
            fmt_f64(r.best_so_far),
            r.mae.map(fmt_f64).unwrap_or_default(),
            match r.phase {
                crate::bomhe::Phase::Init => "init".to_string(),
                crate::bomhe::Phase::Bo => "bo".to_string(),
            },
            r.failed.to_string(),
        ];
        row.extend(r.theta.iter().map(|v| fmt_f64(*v)));
        row
    });
    write_csv(path, &header, rows)
}

/// Reads a numeric CSV written by this module: header plus rows where
/// empty cells become `None`.
pub fn read_numeric_csv(path: &Path) -> io::Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|cell| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>()
                        .map(Some)
                        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: bad number '{cell}': {e}", path.display())))
                }
            })
            .collect::<io::Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Columns whose header starts with `prefix_`, as vectors per row.
pub fn read_vectors(path: &Path, prefix: &str) -> io::Result<Vec<DVector<f64>>> {
    let (header, rows) = read_numeric_csv(path)?;
    let cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('_')))
        .map(|(i, _)| i)
        .collect();
    rows.iter()
        .map(|row| {
            cols.iter()
                .map(|&c| {
                    row.get(c).copied().flatten().ok_or_else(|| {
                        io::Error::new(io::ErrorKind::InvalidData, format!("{}: missing value in column {}", path.display(), header[c]))
                    })
                })
                .collect::<io::Result<Vec<f64>>>()
                .map(DVector::from_vec)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub system: String,
    pub prng: String,
    pub horizon: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub n_u: usize,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: String,
    pub mae: f64,
    pub mae_all_states_l1: f64,
    pub j: f64,
    pub estimates_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub i: usize,
    pub j: f64,
    pub best_so_far: f64,
    pub mae: Option<f64>,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BomheSummary {
    pub best_index: usize,
    pub best_j: f64,
    pub best_theta: Vec<f64>,
    pub n_records: usize,
    pub final_hyper: GpHyperParams,
    pub convergence: Vec<ConvergencePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub system: String,
    pub prng: String,
    /// 1-based.
    pub monitored: Vec<usize>,
    pub results: Vec<AlgorithmSummary>,
    pub bomhe: Option<BomheSummary>,
    pub config: ExperimentConfig,
}

impl AlgorithmSummary {
    pub fn from_outcome(o: &AlgorithmOutcome) -> Self {
        AlgorithmSummary {
            algorithm: o.algorithm.name().to_string(),
            mae: o.mae,
            mae_all_states_l1: o.mae_all_states_l1,
            j: o.j,
            estimates_file: estimates_file(o.algorithm.name()),
        }
    }
}

impl BomheSummary {
    pub fn from_outcome(o: &AlgorithmOutcome) -> Option<Self> {
        let res = o.bomhe.as_ref()?;
        let best = res.best_record();
        Some(BomheSummary {
            best_index: best.index,
            best_j: best.j,
            best_theta: res.best_theta.values().to_vec(),
            n_records: res.records.len(),
            final_hyper: res.final_hyper.clone(),
            convergence: res
                .records
                .iter()
                .map(|r| ConvergencePoint {
                    i: r.index,
                    j: r.j,
                    best_so_far: r.best_so_far,
                    mae: r.mae,
                    failed: r.failed,
                })
                .collect(),
        })
    }
}

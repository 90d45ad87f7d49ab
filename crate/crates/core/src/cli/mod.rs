//! Config-driven experiment runner behind the `bomhe` binary.
//!
//! Exit codes: 0 success, 1 usage, 2 config, 3 numeric, 4 I/O.

pub mod config;
pub mod output;
pub mod run;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

pub use config::{ConfigError, Experiment, ExperimentConfig};
pub use output::ReportSummary;
pub use run::{Algorithm, AlgorithmOutcome};

use output::*;

/// Overrides the output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "BOMHE_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(EXIT_CONFIG, e.0)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        let code = if e.is_numeric() { EXIT_NUMERIC } else { EXIT_CONFIG };
        CliError::new(code, e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "bomhe", version, about = "Moving horizon estimation with models learned by Bayesian optimization")]
struct Cli {
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $BOMHE_OUT_DIR, then the config's output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the configured plant and write trajectory.csv and meta.json.
    Simulate { config: PathBuf },
    /// Run estimators on a simulated record.
    Run {
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = AlgorithmChoice::Both)]
        algorithm: AlgorithmChoice,
    },
    /// Merge the summaries of several run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AlgorithmChoice {
    MheTrue,
    Bomhe,
    Both,
}

impl AlgorithmChoice {
    fn algorithms(self) -> Vec<Algorithm> {
        match self {
            AlgorithmChoice::MheTrue => vec![Algorithm::MheTrue],
            AlgorithmChoice::Bomhe => vec![Algorithm::Bomhe],
            AlgorithmChoice::Both => vec![Algorithm::MheTrue, Algorithm::Bomhe],
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config } => {
            let exp = load(&config, cli.seed)?;
            let out = out_dir(cli.out, Some(&exp));
            simulate(&exp, &out)
        }
        Command::Run { config, algorithm } => {
            let exp = load(&config, cli.seed)?;
            let out = out_dir(cli.out, Some(&exp));
            run_algorithms(&exp, &algorithm.algorithms(), &out).map(|_| ())
        }
        Command::Report { dirs } => {
            if cli.seed.is_some() {
                return Err(CliError::new(EXIT_USAGE, "--seed has no effect on report"));
            }
            let out = out_dir(cli.out, None);
            report(&dirs, &out)
        }
    }
}

fn out_dir(flag: Option<PathBuf>, exp: Option<&Experiment>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(exp.map_or_else(|| "report".to_string(), |e| e.default_out_dir())))
}

/// Reads and resolves a config file, applying a seed override.
pub fn load(path: &Path, seed: Option<u64>) -> Result<Experiment, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg.resolve()?)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn io_at<T>(path: &Path, r: io::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::io(path, e))
}

pub fn simulate(exp: &Experiment, out: &Path) -> Result<(), CliError> {
    let traj = exp.simulate()?;
    create_dir(out)?;
    let path = out.join(TRAJECTORY_FILE);
    io_at(&path, write_trajectory(&path, &traj))?;
    let meta = Meta {
        tool: TOOL.into(),
        version: VERSION.into(),
        seed: exp.seed(),
        system: exp.kind().into(),
        prng: crate::sim::PRNG_NAME.into(),
        horizon: exp.horizon,
        n_x: exp.system.n_x(),
        n_y: exp.system.n_y(),
        n_u: exp.system.n_u(),
        config: exp.config.clone(),
    };
    let path = out.join(META_FILE);
    io_at(&path, write_json(&path, &meta))
}

/// Simulates, runs each algorithm and writes the trajectory, estimates,
/// the convergence series (BOMHE) and `summary.json`.
pub fn run_algorithms(exp: &Experiment, algorithms: &[Algorithm], out: &Path) -> Result<ReportSummary, CliError> {
    let traj = exp.simulate()?;
    let outcomes = algorithms
        .iter()
        .map(|&a| exp.run(&traj, a))
        .collect::<crate::Result<Vec<_>>>()?;
    create_dir(out)?;
    let path = out.join(TRAJECTORY_FILE);
    io_at(&path, write_trajectory(&path, &traj))?;
    for o in &outcomes {
        let path = out.join(estimates_file(o.algorithm.name()));
        io_at(&path, write_estimates(&path, &o.estimates))?;
        if let Some(res) = &o.bomhe {
            let path = out.join(CONVERGENCE_FILE);
            io_at(&path, write_convergence(&path, &res.records))?;
        }
    }
    let summary = ReportSummary {
        tool: TOOL.into(),
        version: VERSION.into(),
        seed: exp.seed(),
        system: exp.kind().into(),
        prng: crate::sim::PRNG_NAME.into(),
        monitored: exp.monitored.iter().map(|j| j + 1).collect(),
        results: outcomes.iter().map(AlgorithmSummary::from_outcome).collect(),
        bomhe: outcomes.iter().find_map(BomheSummary::from_outcome),
        config: exp.config.clone(),
    };
    let path = out.join(SUMMARY_FILE);
    io_at(&path, write_json(&path, &summary))?;
    Ok(summary)
}

#[derive(serde::Serialize)]
struct ReportMarker<'a> {
    tool: &'a str,
    version: &'a str,
    inputs: Vec<String>,
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Merges run directories into an MAE table, a text report and a
/// long-format series file.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    if dirs.is_empty() {
        return Err(CliError::new(EXIT_USAGE, "report needs at least one run directory"));
    }
    if let Some(d) = dirs.iter().find(|d| d.join(REPORT_MARKER).exists()) {
        return Err(CliError::new(
            EXIT_USAGE,
            format!("{} is a report directory; pass run directories instead", d.display()),
        ));
    }
    let mut summaries = Vec::new();
    let mut offenders = Vec::new();
    for d in dirs {
        let path = d.join(SUMMARY_FILE);
        match fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<ReportSummary>(&t).map_err(|e| e.to_string()))
        {
            Ok(s) => summaries.push((d, s)),
            Err(e) => offenders.push(format!("{}: {e}", path.display())),
        }
    }
    if !offenders.is_empty() {
        return Err(CliError::new(
            EXIT_IO,
            format!("unreadable summaries:\n  {}", offenders.join("\n  ")),
        ));
    }

    let mut table = Vec::new();
    let mut series = Vec::new();
    for (dir, s) in &summaries {
        let run = display(dir);
        let traj_path = dir.join(TRAJECTORY_FILE);
        let truth = io_at(&traj_path, read_vectors(&traj_path, "x"))?;
        for (k, x) in truth.iter().enumerate() {
            for (j, v) in x.iter().enumerate() {
                series.push(vec![run.clone(), "truth".into(), "state".into(), k.to_string(), (j + 1).to_string(), fmt_f64(*v)]);
            }
        }
        for r in &s.results {
            table.push(vec![
                run.clone(),
                s.system.clone(),
                s.seed.to_string(),
                r.algorithm.clone(),
                fmt_f64(r.mae),
                fmt_f64(r.mae_all_states_l1),
                fmt_f64(r.j),
            ]);
            let path = dir.join(&r.estimates_file);
            let est = io_at(&path, read_vectors(&path, "xhat"))?;
            if est.len() != truth.len() {
                return Err(CliError::new(
                    EXIT_IO,
                    format!("{}: {} rows but the trajectory has {}", path.display(), est.len(), truth.len()),
                ));
            }
            for (k, (x, e)) in truth.iter().zip(&est).enumerate() {
                for j in 0..x.len() {
                    let (comp, a) = ((j + 1).to_string(), r.algorithm.clone());
                    series.push(vec![run.clone(), a.clone(), "estimate".into(), k.to_string(), comp.clone(), fmt_f64(e[j])]);
                    series.push(vec![run.clone(), a, "error".into(), k.to_string(), comp, fmt_f64(e[j] - x[j])]);
                }
            }
        }
        if let Some(b) = &s.bomhe {
            for p in &b.convergence {
                series.push(vec![run.clone(), "bomhe".into(), "j".into(), p.i.to_string(), "0".into(), fmt_f64(p.j)]);
                series.push(vec![run.clone(), "bomhe".into(), "best_so_far".into(), p.i.to_string(), "0".into(), fmt_f64(p.best_so_far)]);
            }
        }
    }

    create_dir(out)?;
    let header = |cols: &[&str]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    let path = out.join(MAE_TABLE_FILE);
    io_at(
        &path,
        write_csv(&path, &header(&["run", "system", "seed", "algorithm", "mae", "mae_all_states_l1", "j"]), table.clone()),
    )?;
    let path = out.join(SERIES_FILE);
    io_at(
        &path,
        write_csv(&path, &header(&["run", "algorithm", "series", "index", "component", "value"]), series),
    )?;

    let mut text = format!(
        "{:<28} {:<8} {:>6} {:<10} {:>12} {:>18}\n",
        "RUN", "SYSTEM", "SEED", "ALGORITHM", "MAE", "MAE (all, L1)"
    );
    for row in &table {
        let num = |i: usize| row[i].parse::<f64>().unwrap_or(f64::NAN);
        text.push_str(&format!(
            "{:<28} {:<8} {:>6} {:<10} {:>12.3} {:>18.3}\n",
            row[0], row[1], row[2], row[3], num(4), num(5)
        ));
    }
    let path = out.join(REPORT_TEXT_FILE);
    io_at(&path, fs::write(&path, text))?;
    let marker = ReportMarker {
        tool: TOOL,
        version: VERSION,
        inputs: dirs.iter().map(|d| display(d)).collect(),
    };
    let path = out.join(REPORT_MARKER);
    io_at(&path, write_json(&path, &marker))
}

//! `xwf`: simulate, fit, test and evaluate extrema-weighted feature models
//! from the command line.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use xwf_core::inference::Method;
use xwf_core::{Error, ErrorKind};

use crate::commands::Command;
use crate::config::{parse_override, read_table, resolve, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "xwf", version, about = "Extrema-weighted features for functional predictors")]
struct Cli {
    /// Flat TOML file with run settings (command-line values take precedence).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set criterion=gcv`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Directory holding `trajectories.csv` and `table.csv`.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    trajectories: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    table: Option<PathBuf>,
    /// Skip the cleaning rules (value bounds, gaps, minimum duration).
    #[arg(long, global = true)]
    no_clean: bool,
    /// Worker threads (results are identical for any value).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// Number of subjects.
    #[arg(long)]
    n: Option<usize>,
    /// Samples per trajectory.
    #[arg(long)]
    n_samples: Option<usize>,
    /// Also write the generating values to `latents.csv`.
    #[arg(long)]
    latents: bool,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Simulate the frequency/level design.
    SimulateFreq(SimArgs),
    /// Simulate the autoregressive design.
    SimulateAr(SimArgs),
    /// Write the XWF feature matrix at fixed weight parameters.
    Extract {
        /// `fit_xwf.json` supplying the weight parameters.
        #[arg(long, value_name = "FILE")]
        params: Option<PathBuf>,
    },
    /// Tune the weight parameters and fit the XWF model.
    FitXwf {
        /// Refinement levels of the weight search.
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Fit the average-real-variability model.
    FitArv,
    /// Fit the supervised power-spectrum model.
    FitSpectrum {
        /// Number of principal components.
        #[arg(long)]
        components: Option<usize>,
    },
    /// Randomization test of one pipeline.
    Permtest {
        #[arg(long)]
        pipeline: Option<Method>,
        /// Number of outcome permutations.
        #[arg(long)]
        replicates: Option<usize>,
        /// Reuse the observed weight parameters in every replicate.
        #[arg(long)]
        freeze_weights: bool,
    },
    /// Repeated train/test AUC comparison of the three models.
    PredictStudy {
        #[arg(long)]
        splits: Option<usize>,
    },
    /// Collate every JSON artifact of a directory into `report.json`.
    Report {
        /// Directory to collate (defaults to --out).
        #[arg(long, value_name = "DIR")]
        input: Option<PathBuf>,
    },
}

fn put<T: Into<toml::Value>>(table: &mut toml::Table, key: &str, value: Option<T>) {
    if let Some(v) = value {
        table.insert(key.to_string(), v.into());
    }
}

fn path_value(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

fn count(v: Option<usize>) -> Option<i64> {
    v.map(|v| v as i64)
}

/// Settings given on the command line, as a config layer.
fn cli_layer(cli: &Cli) -> xwf_core::Result<toml::Table> {
    let mut t = toml::Table::new();
    for raw in &cli.set {
        let (k, v) = parse_override(raw)?;
        t.insert(k, v);
    }
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Validation(format!("seed {seed} exceeds the supported range")))?;
        t.insert("seed".into(), seed.into());
    }
    put(&mut t, "out", path_value(&cli.out));
    put(&mut t, "data", path_value(&cli.data));
    put(&mut t, "trajectories", path_value(&cli.trajectories));
    put(&mut t, "table", path_value(&cli.table));
    put(&mut t, "threads", count(cli.threads));
    if cli.no_clean {
        t.insert("clean".into(), false.into());
    }
    match &cli.command {
        Cmd::SimulateFreq(a) | Cmd::SimulateAr(a) => {
            put(&mut t, "n", count(a.n));
            put(&mut t, "n_samples", count(a.n_samples));
            if a.latents {
                t.insert("latents".into(), true.into());
            }
        }
        Cmd::Extract { params } => put(&mut t, "params", path_value(params)),
        Cmd::FitXwf { levels } => put(&mut t, "levels", count(*levels)),
        Cmd::FitArv => {}
        Cmd::FitSpectrum { components } => put(&mut t, "components", count(*components)),
        Cmd::Permtest {
            pipeline,
            replicates,
            freeze_weights,
        } => {
            put(&mut t, "pipeline", pipeline.map(|m| m.as_str().to_string()));
            put(&mut t, "replicates", count(*replicates));
            if *freeze_weights {
                t.insert("freeze_weights".into(), true.into());
            }
        }
        Cmd::PredictStudy { splits } => put(&mut t, "splits", count(*splits)),
        Cmd::Report { input } => put(&mut t, "input", path_value(input)),
    }
    Ok(t)
}

fn command_of(cmd: &Cmd) -> Command {
    match cmd {
        Cmd::SimulateFreq(_) => Command::SimulateFreq,
        Cmd::SimulateAr(_) => Command::SimulateAr,
        Cmd::Extract { .. } => Command::Extract,
        Cmd::FitXwf { .. } => Command::FitXwf,
        Cmd::FitArv => Command::FitArv,
        Cmd::FitSpectrum { .. } => Command::FitSpectrum,
        Cmd::Permtest { .. } => Command::Permtest,
        Cmd::PredictStudy { .. } => Command::PredictStudy,
        Cmd::Report { .. } => Command::Report,
    }
}

fn load_config(cli: &Cli) -> xwf_core::Result<RunConfig> {
    let mut layers = Vec::new();
    if let Some(path) = &cli.config {
        layers.push(read_table(path)?);
    }
    layers.push(cli_layer(cli)?);
    resolve(&layers)
}

fn execute(cli: &Cli) -> xwf_core::Result<()> {
    let config = load_config(cli)?;
    if let Some(n) = config.threads {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    commands::run(command_of(&cli.command), &config)
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation => 2,
        ErrorKind::Convergence => 3,
        ErrorKind::Io => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let code = exit_code(kind);
            let doc = json!({
                "error": {
                    "kind": format!("{kind:?}").to_lowercase(),
                    "exit_code": code,
                    "command": command_of(&cli.command).name(),
                    "message": e.to_string(),
                }
            });
            eprintln!("{doc}");
            ExitCode::from(code)
        }
    }
}

//! `sobolev`: derivative estimation, gradient-flow and training experiments.
//!
//! Exit codes: 0 success, 1 io error, 2 parse error, 3 config error,
//! 4 numerical failure (including failed `validate` checks).

mod commands;
mod manifest;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use commands::*;
use manifest::{read_config_file, resolve, CliError, RunManifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "sobolev", version, about = "Sobolev-training experiments from the command line")]
struct Cli {
    /// Random seed (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML config file; flags win on conflict.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate derivatives of a sampled field with moving least squares.
    Derivs(DerivsFlags),
    /// Empirical convergence rates of the estimator.
    Rates(RatesFlags),
    /// Integrate the population gradient flow of the one-neuron model.
    Flow(FlowFlags),
    /// Tabulate and plot the normalised loss-decrease landscape and h(θ).
    Landscape(LandscapeFlags),
    /// Train an operator network on a synthetic task.
    Train(TrainFlags),
    /// Repeat training over parameter values and seeds.
    Sweep(SweepFlags),
    /// Run the Monte-Carlo and inequality checks and print a pass/fail table.
    Validate(ValidateFlags),
    /// Re-run a command from its manifest.
    Rerun {
        /// manifest.json written by an earlier run.
        manifest: PathBuf,
    },
}

/// A command with its fully resolved configuration.
enum Resolved {
    Derivs(DerivsConfig),
    Rates(RatesConfig),
    Flow(FlowCmdConfig),
    Landscape(LandscapeConfig),
    Train(TrainCmdConfig),
    Sweep(SweepConfig),
    Validate(ValidateConfig),
}

impl Resolved {
    fn name(&self) -> &'static str {
        match self {
            Resolved::Derivs(_) => "derivs",
            Resolved::Rates(_) => "rates",
            Resolved::Flow(_) => "flow",
            Resolved::Landscape(_) => "landscape",
            Resolved::Train(_) => "train",
            Resolved::Sweep(_) => "sweep",
            Resolved::Validate(_) => "validate",
        }
    }

    fn config_json(&self) -> Result<serde_json::Value, CliError> {
        let v = match self {
            Resolved::Derivs(c) => serde_json::to_value(c),
            Resolved::Rates(c) => serde_json::to_value(c),
            Resolved::Flow(c) => serde_json::to_value(c),
            Resolved::Landscape(c) => serde_json::to_value(c),
            Resolved::Train(c) => serde_json::to_value(c),
            Resolved::Sweep(c) => serde_json::to_value(c),
            Resolved::Validate(c) => serde_json::to_value(c),
        };
        v.map_err(|e| CliError::Io(e.to_string()))
    }

    fn from_manifest(m: &RunManifest) -> Result<Self, CliError> {
        fn de<C: DeserializeOwned>(v: &serde_json::Value) -> Result<C, CliError> {
            serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("manifest config: {e}")))
        }
        Ok(match m.command.as_str() {
            "derivs" => Resolved::Derivs(de(&m.config)?),
            "rates" => Resolved::Rates(de(&m.config)?),
            "flow" => Resolved::Flow(de(&m.config)?),
            "landscape" => Resolved::Landscape(de(&m.config)?),
            "train" => Resolved::Train(de(&m.config)?),
            "sweep" => Resolved::Sweep(de(&m.config)?),
            "validate" => Resolved::Validate(de(&m.config)?),
            other => return Err(CliError::Config(format!("manifest names unknown command {other:?}"))),
        })
    }

    fn run(&self, ctx: &RunContext) -> Result<Outcome, CliError> {
        match self {
            Resolved::Derivs(c) => run_derivs(c, ctx),
            Resolved::Rates(c) => run_rates(c, ctx),
            Resolved::Flow(c) => run_flow(c, ctx),
            Resolved::Landscape(c) => run_landscape(c, ctx),
            Resolved::Train(c) => run_train(c, ctx),
            Resolved::Sweep(c) => run_sweep(c, ctx),
            Resolved::Validate(c) => run_validate(c, ctx),
        }
    }
}

fn section<'a>(file: &'a Option<toml::Table>, name: &str) -> Option<&'a toml::Value> {
    file.as_ref().and_then(|t| t.get(name))
}

fn layered<C, F>(file: &Option<toml::Table>, name: &str, flags: &F) -> Result<C, CliError>
where
    C: DeserializeOwned + Serialize + Default,
    F: Serialize,
{
    resolve(section(file, name), flags)
}

fn top_level<T: DeserializeOwned>(file: &Option<toml::Table>, key: &str) -> Result<Option<T>, CliError> {
    match section(file, key) {
        None => Ok(None),
        Some(v) => v.clone().try_into().map(Some).map_err(|e| CliError::Config(format!("{key}: {e}"))),
    }
}

fn execute(resolved: &Resolved, seed: u64, out_dir: &Path) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let ctx = RunContext { seed, out_dir: out_dir.to_path_buf() };
    std::fs::create_dir_all(out_dir).map_err(manifest::io_err(out_dir))?;
    let outcome = resolved.run(&ctx)?;
    let inputs = outcome.inputs.iter().map(|p| manifest::digest_file(p)).collect::<Result<_, _>>()?;
    let m = RunManifest {
        command: resolved.name().into(),
        config: resolved.config_json()?,
        seed,
        version: env!("CARGO_PKG_VERSION").into(),
        inputs,
        outputs: outcome.outputs.clone(),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    m.write(out_dir)?;
    Ok(outcome)
}

fn real_main(cli: Cli) -> Result<bool, CliError> {
    let file = cli.config.as_deref().map(read_config_file).transpose()?;
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => top_level::<usize>(&file, "threads")?,
    };
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }

    let (resolved, seed, out_dir) = match &cli.command {
        Command::Rerun { manifest } => {
            let m = RunManifest::read(manifest)?;
            for input in &m.inputs {
                check_input_digest(&input.path, &input.sha256)?;
            }
            let dir = match &cli.out_dir {
                Some(d) => d.clone(),
                None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            (Resolved::from_manifest(&m)?, m.seed, dir)
        }
        cmd => {
            let resolved = match cmd {
                Command::Derivs(f) => Resolved::Derivs(layered(&file, "derivs", f)?),
                Command::Rates(f) => Resolved::Rates(layered(&file, "rates", f)?),
                Command::Flow(f) => Resolved::Flow(layered(&file, "flow", f)?),
                Command::Landscape(f) => Resolved::Landscape(layered(&file, "landscape", f)?),
                Command::Train(f) => Resolved::Train(layered(&file, "train", f)?),
                Command::Sweep(f) => Resolved::Sweep(layered(&file, "sweep", f)?),
                Command::Validate(f) => Resolved::Validate(layered(&file, "validate", f)?),
                Command::Rerun { .. } => unreachable!(),
            };
            let seed = match cli.seed {
                Some(s) => s,
                None => top_level(&file, "seed")?.unwrap_or(0),
            };
            let dir = match &cli.out_dir {
                Some(d) => d.clone(),
                None => top_level::<PathBuf>(&file, "out_dir")?.unwrap_or_else(|| PathBuf::from("out")),
            };
            (resolved, seed, dir)
        }
    };

    let outcome = execute(&resolved, seed, &out_dir)?;
    for line in &outcome.summary {
        println!("{line}");
    }
    println!("seed {seed}; wrote {} and {MANIFEST_FILE} to {}", outcome.outputs.join(", "), out_dir.display());
    Ok(!outcome.failed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

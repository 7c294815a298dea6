use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bbm_spine::bbm::{simulate_bbm, write_ndjson};
use bbm_spine::experiments::{run_experiment, Experiment, ExperimentConfig};
use bbm_spine::stochastic::SeedSpec;
use bbm_spine::Error;

#[derive(Parser)]
#[command(name = "bbm", version, about = "Branching Brownian motion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Median of the maximum and its logarithmic correction.
    Median(Flags),
    /// Tail of the centred maximum.
    Tail(Flags),
    /// Particles staying below the persistence line.
    Persistence(Flags),
    /// Oscillation of the renormalized maximum.
    Fluctuation(Flags),
    /// Sweeps of the Bessel-3 functionals.
    Lemmas(Flags),
    /// Quick internal consistency checks.
    Selftest(Flags),
}

#[derive(Args)]
struct Flags {
    /// JSON file with config fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Comma-separated times.
    #[arg(long, value_delimiter = ',')]
    t: Option<Vec<f64>>,
    /// Comma-separated offsets.
    #[arg(long, value_delimiter = ',')]
    y: Option<Vec<f64>>,
    /// Monte Carlo samples for the functional sweeps.
    #[arg(long)]
    samples: Option<u64>,
    /// Report path; `.json` and `.csv` are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    no_bridge_correction: bool,
    /// Write one simulated tree up to the first time as NDJSON and exit.
    #[arg(long, value_name = "PATH")]
    dump_tree: Option<PathBuf>,
}

impl Command {
    fn split(self) -> (Experiment, Flags) {
        match self {
            Command::Median(f) => (Experiment::Median, f),
            Command::Tail(f) => (Experiment::Tail, f),
            Command::Persistence(f) => (Experiment::Persistence, f),
            Command::Fluctuation(f) => (Experiment::Fluctuation, f),
            Command::Lemmas(f) => (Experiment::Lemmas, f),
            Command::Selftest(f) => (Experiment::Selftest, f),
        }
    }
}

fn build_config(experiment: Experiment, flags: &Flags) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidArgument { name: "config", reason: format!("{}: {e}", path.display()) })?;
            ExperimentConfig::from_json_overlay(experiment, &text)?
        }
        None => ExperimentConfig::defaults(experiment),
    };
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.reps {
        cfg.reps = v;
    }
    if let Some(v) = flags.dt {
        cfg.dt = v;
    }
    if let Some(v) = &flags.t {
        cfg.t = v.clone();
    }
    if let Some(v) = &flags.y {
        cfg.y = v.clone();
    }
    if let Some(v) = flags.samples {
        cfg.samples = v;
    }
    if let Some(v) = &flags.out {
        cfg.out = Some(v.clone());
    }
    if flags.jobs.is_some() {
        cfg.jobs = flags.jobs;
    }
    if flags.no_bridge_correction {
        cfg.bridge_correction = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dump_tree(cfg: &ExperimentConfig, path: &PathBuf) -> Result<(), String> {
    let horizon = cfg.t.first().copied().unwrap_or(1.0);
    let tree = simulate_bbm(horizon, cfg.dt, SeedSpec::for_replicate(cfg.seed, "dump", 0), cfg.cap)
        .map_err(|e| e.to_string())?;
    let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_ndjson(&tree, &mut w).and_then(|_| w.flush()).map_err(|e| e.to_string())?;
    eprintln!("wrote {} particles to {}", tree.records.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let (experiment, flags) = Cli::parse().command.split();
    let cfg = match build_config(experiment, &flags) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(path) = &flags.dump_tree {
        return match dump_tree(&cfg, path) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        };
    }
    let report = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match &cfg.out {
        Some(out) => match report.write(out) {
            Ok((json, csv)) => eprintln!("wrote {} and {}", json.display(), csv.display()),
            Err(e) => {
                eprintln!("error: writing report: {e}");
                return ExitCode::from(1);
            }
        },
        None => println!("{}", report.to_json()),
    }
    for (k, v) in &report.summary {
        eprintln!("{k} = {v}");
    }
    ExitCode::SUCCESS
}

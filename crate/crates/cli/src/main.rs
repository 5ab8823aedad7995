use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use tcim_cli::commands::{cmd_decode, cmd_evaluate, cmd_fit, cmd_ingest, cmd_simulate, cmd_synth};
use tcim_cli::{exit_code, FitKind, RunConfig};
use tcim_core::domain::CovariateSet;
use tcim_core::ingest::parse_time;
use tcim_core::simulate::RiCorrection;
use tcim_core::{Error, Result};

/// Fit, simulate and evaluate statistical tropical-cyclone intensity models.
#[derive(Parser)]
#[command(name = "tcim", version)]
struct Cli {
    /// JSON run configuration (a previous run's manifest also works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for fitting restarts and simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Track and environment CSV.
    #[arg(long)]
    tracks: Option<PathBuf>,
    /// Fraction of translation speed removed from reported winds.
    #[arg(long)]
    bg_fraction: Option<f64>,
    /// Shortest ocean sequence kept for fitting.
    #[arg(long)]
    min_seq_len: Option<usize>,
    /// Drop the ocean feedback predictor.
    #[arg(long)]
    no_ocn: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write the model file and a report.
    Fit {
        #[arg(value_enum)]
        kind: FitKind,
        #[command(flatten)]
        data: DataArgs,
        /// Number of groups or hidden states.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Land model file to embed in the fitted model.
        #[arg(long)]
        land: Option<PathBuf>,
    },
    /// Simulate ensembles along the observed tracks.
    Simulate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        tracks: Option<PathBuf>,
        /// Land model file overriding the one in the model file.
        #[arg(long)]
        land: Option<PathBuf>,
        /// Realizations per storm.
        #[arg(long)]
        n: Option<usize>,
        /// `off`, `observed`, or comma-separated ISO-8601 window start times.
        #[arg(long)]
        ri_correct: Option<String>,
        /// Restrict to these storm ids.
        #[arg(long = "storm")]
        storms: Vec<String>,
    },
    /// Compute climatology metrics for observations and ensembles.
    Evaluate {
        #[arg(long)]
        tracks: Option<PathBuf>,
        /// Directory written by `simulate`; repeatable.
        #[arg(long = "ensembles")]
        ensembles: Vec<PathBuf>,
        /// Region polygons for landfall classification.
        #[arg(long)]
        regions: Option<PathBuf>,
    },
    /// Most likely hidden-state path for every ocean sequence.
    Decode {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        tracks: Option<PathBuf>,
    },
    /// Print the dataset summary after ingest and segmentation.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write the demonstration track dataset.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_storms: usize,
    },
}

fn apply_data(cfg: &mut RunConfig, data: DataArgs) {
    if data.tracks.is_some() {
        cfg.tracks = data.tracks;
    }
    if let Some(f) = data.bg_fraction {
        cfg.ingest.bg_fraction = f;
    }
    if let Some(n) = data.min_seq_len {
        cfg.ingest.min_ocean_len = n;
    }
    if data.no_ocn {
        cfg.ingest.covariate_set = CovariateSet::NoOcn;
    }
}

fn parse_ri(s: &str) -> Result<RiCorrection> {
    match s {
        "off" => Ok(RiCorrection::Off),
        "observed" => Ok(RiCorrection::Observed),
        times => times
            .split(',')
            .map(|t| parse_time(t.trim()).ok_or_else(|| Error::Validation(format!("--ri-correct: bad time {t:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(RiCorrection::Explicit),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.out.is_some() {
        cfg.out = cli.out;
    }
    match cli.command {
        Command::Fit {
            kind,
            data,
            k,
            restarts,
            tol,
            max_iter,
            land,
        } => {
            apply_data(&mut cfg, data);
            cfg.fit.kind = Some(kind);
            if let Some(k) = k {
                cfg.fit.k = k;
            }
            if let Some(r) = restarts {
                cfg.fit.restarts = r;
            }
            if let Some(t) = tol {
                cfg.fit.tol = t;
            }
            if max_iter.is_some() {
                cfg.fit.max_iter = max_iter;
            }
            if land.is_some() {
                cfg.land = land;
            }
            let outcome = cmd_fit(&cfg.finalize()?)?;
            if !cli.quiet {
                print!("{}", outcome.report);
                println!("wrote {}", outcome.model_path.display());
            }
        }
        Command::Simulate {
            model,
            tracks,
            land,
            n,
            ri_correct,
            storms,
        } => {
            if model.is_some() {
                cfg.model = model;
            }
            if tracks.is_some() {
                cfg.tracks = tracks;
            }
            if land.is_some() {
                cfg.land = land;
            }
            if let Some(n) = n {
                cfg.simulate.n_realizations = n;
            }
            if let Some(r) = ri_correct {
                cfg.simulate.ri_correction = parse_ri(&r)?;
            }
            if !storms.is_empty() {
                cfg.storms = storms;
            }
            let outcome = cmd_simulate(&cfg.finalize()?)?;
            if !cli.quiet {
                println!("wrote {} ensemble files", outcome.files.len());
            }
        }
        Command::Evaluate { tracks, ensembles, regions } => {
            if tracks.is_some() {
                cfg.tracks = tracks;
            }
            if !ensembles.is_empty() {
                cfg.ensembles = ensembles;
            }
            if regions.is_some() {
                cfg.regions = regions;
            }
            let outcome = cmd_evaluate(&cfg.finalize()?)?;
            if !cli.quiet {
                println!("wrote {} metric files", outcome.files.len());
            }
        }
        Command::Decode { model, tracks } => {
            if model.is_some() {
                cfg.model = model;
            }
            if tracks.is_some() {
                cfg.tracks = tracks;
            }
            let files = cmd_decode(&cfg.finalize()?)?;
            if !cli.quiet {
                println!("wrote {} state files", files.len());
            }
        }
        Command::Ingest { data } => {
            apply_data(&mut cfg, data);
            print!("{}", cmd_ingest(&cfg.finalize()?)?);
        }
        Command::Synth { output, n_storms } => {
            let seed = cli.seed.unwrap_or(tcim_core::synthetic::TrackSynthOptions::default().seed);
            cmd_synth(&output, n_storms, seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

//! `perfport`: estimate prediction-model performance in a target population
//! from multi-study data.
//!
//! Subcommands: `evaluate` (point estimates and bootstrap intervals on a
//! dataset), `simulate` (replicated bias study against a Monte Carlo
//! oracle), `tilt-scan` (sensitivity-analysis curve over the tilt
//! parameter), `calibrate` (tilt calibration from a known target
//! prevalence). A single JSON config drives everything; the flags override
//! its scalars.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data validation error,
//! 4 estimation failure.

use clap::{Parser, Subcommand};
use perfport::dataset::AnalysisDataset;
use perfport::run::{
    run_calibrate, run_evaluate, run_simulate, run_tilt_scan, RunConfig,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_ESTIMATION: u8 = 4;

#[derive(Parser)]
#[command(name = "perfport", version, about = "Model performance in a target population")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Input data CSV; overrides the config's `data` path.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for results.json / results.csv / provenance.json.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the requested measures on a dataset.
    Evaluate,
    /// Run the replicated simulation bias study.
    Simulate,
    /// Tilted sensitivity over a gamma grid, per study.
    TiltScan,
    /// Calibrate per-study tilts from a known target prevalence.
    Calibrate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut config = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match RunConfig::from_json(&text) {
                Ok(c) => c,
                Err(e) => return fail(EXIT_CONFIG, &format!("{}: {e}", path.display())),
            },
            Err(e) => return fail(EXIT_CONFIG, &format!("{}: {e}", path.display())),
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.simulation.dgp.seed = seed;
    }
    if let Some(data) = &cli.data {
        config.data = Some(data.clone());
    }

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            return fail(EXIT_CONFIG, &format!("thread pool: {e}"));
        }
    }

    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        return fail(EXIT_CONFIG, &format!("{}: {e}", cli.out.display()));
    }

    let needs_data = !matches!(cli.command, Command::Simulate);
    let data = if needs_data {
        let path = match &config.data {
            Some(p) => p.clone(),
            None => return fail(EXIT_CONFIG, "no data path: pass --data or set `data`"),
        };
        match AnalysisDataset::<f64>::from_csv_path(&path) {
            Ok(ds) => Some(ds),
            Err(e) => return fail(EXIT_DATA, &format!("{}: {e}", path.display())),
        }
    } else {
        None
    };

    let outcome = match cli.command {
        Command::Evaluate => run_evaluate(&config, data.as_ref().expect("loaded"))
            .map(|bundle| {
                print!("{}", bundle.to_csv());
                (bundle.to_json(), bundle.to_csv())
            }),
        Command::Simulate => run_simulate(&config).map(|out| {
            print!("{}", out.to_csv());
            (out.to_json(), out.to_csv())
        }),
        Command::TiltScan => run_tilt_scan(&config, data.as_ref().expect("loaded"))
            .map(|out| {
                print!("{}", out.to_csv());
                (out.to_json(), out.to_csv())
            }),
        Command::Calibrate => run_calibrate(&config, data.as_ref().expect("loaded"))
            .map(|out| {
                print!("{}", out.to_csv());
                (out.to_json(), out.to_csv())
            }),
    };

    let (json, csv) = match outcome {
        Ok(pair) => pair,
        Err(e) => return fail(EXIT_ESTIMATION, &e.to_string()),
    };

    let provenance = serde_json::json!({
        "config_hash": config.hash(),
        "seed": config.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "config": serde_json::from_str::<serde_json::Value>(&config.to_canonical_json())
            .expect("canonical config parses"),
    });

    for (name, content) in [
        ("results.json", json),
        ("results.csv", csv),
        ("provenance.json", serde_json::to_string_pretty(&provenance).expect("serializes")),
    ] {
        if let Err(e) = write_file(&cli.out, name, &content) {
            return fail(EXIT_CONFIG, &e);
        }
    }
    eprintln!("wrote {}", cli.out.join("results.{json,csv}").display());
    ExitCode::SUCCESS
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), String> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| format!("{}: {e}", path.display()))
}

fn fail(code: u8, message: &str) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code)
}

//! `trailopt`: course ingestion, finish-time prediction, nutrition fitting
//! and PMP verification from the command line.
//!
//! Exit codes: 0 success (or certified), 2 input error, 3 solver failure,
//! 4 verification failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "trailopt",
    version,
    about = "Optimal pacing and finish-time prediction for trail races"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn a GPX track into a course profile JSON
    Ingest {
        /// GPX file with elevations
        gpx: PathBuf,
        /// Target segment length [m], 100 to 250
        #[arg(long, default_value_t = config::DEFAULT_SEGMENT_M)]
        segment_m: f64,
        /// Route record [s]
        #[arg(long)]
        record_s: Option<f64>,
        /// Course name; defaults to the file stem
        #[arg(long)]
        name: Option<String>,
        /// Output path; defaults to `<stem>.profile.json` next to the track
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Predict the finish time for a run configuration (TOML or JSON)
    Predict {
        /// Run configuration file
        config: PathBuf,
        /// Overrides `output_dir` from the configuration
        #[arg(short, long)]
        output_dir: Option<PathBuf>,
        /// Exit with code 4 unless the solution is PMP-certified
        #[arg(long)]
        require_certified: bool,
    },
    /// Fit the logistic oxidation model to CSV samples
    FitNutrition {
        /// CSV with columns `time_s,rate_g_per_s` (or `time_s,grams` with --cumulative)
        csv: PathBuf,
        /// Samples are cumulative grams rather than rates [g/s]
        #[arg(long)]
        cumulative: bool,
        /// Output path; defaults to `<stem>.fit.json` next to the samples
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Check a trajectory against the maximum principle; exit 0 iff certified
    Verify {
        /// Trajectory CSV or JSON, dimensional or scaled
        trajectory: PathBuf,
        /// `params.json` written alongside the trajectory
        #[arg(long)]
        params: PathBuf,
        /// GPX track or profile JSON; flat when omitted
        #[arg(long)]
        course: Option<PathBuf>,
        /// Write the full PMP report here
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Solve and verify the flat maximum-distance benchmark
    FlatBenchmark {
        /// Number of grid nodes
        #[arg(long, default_value_t = 400)]
        grid: usize,
        /// Directory for the report, trajectories and parameters
        #[arg(short, long, default_value = "flat-benchmark")]
        output_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), error::CliError> {
    match cli.command {
        Command::Ingest {
            gpx,
            segment_m,
            record_s,
            name,
            out,
        } => commands::ingest(&gpx, segment_m, record_s, name.as_deref(), out).map(|_| ()),
        Command::Predict {
            config,
            output_dir,
            require_certified,
        } => commands::predict(&config, output_dir, require_certified),
        Command::FitNutrition { csv, cumulative, out } => commands::fit_nutrition(&csv, cumulative, out).map(|_| ()),
        Command::Verify {
            trajectory,
            params,
            course,
            out,
        } => commands::verify_trajectory(&trajectory, course.as_deref(), &params, out),
        Command::FlatBenchmark { grid, output_dir } => commands::flat_benchmark(grid, &output_dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

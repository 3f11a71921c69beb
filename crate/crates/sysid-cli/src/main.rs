//! `sysid` command-line tool: dataset generation, model fitting,
//! evaluation, regularization-path sweeps, causality analysis and
//! initial-state reconstruction.

mod commands;
mod config;
mod report;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{GenerateKind, SweepParam};

#[derive(Parser)]
#[command(
    name = "sysid",
    version,
    about = "Identify linear and residual recurrent state-space models from input/output data"
)]
struct Cli {
    /// Worker threads for multi-start training (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Print per-phase iteration progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset (CSV plus metadata sidecar).
    Generate {
        #[arg(long, value_enum)]
        kind: GenerateKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Sample count (defaults: order-reduction 2000, input-selection
        /// 10000, causal 1000).
        #[arg(long)]
        n: Option<usize>,
        /// Noise standard deviation (defaults: 0.01 / 0.01 / 0.05).
        #[arg(long)]
        noise_std: Option<f64>,
    },
    /// Fit a model: writes the serialized model and a JSON report.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Evaluate a saved model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// from-fit | ekf-rts | refine
        #[arg(long, default_value = "ekf-rts")]
        x0_policy: String,
        /// Also report p-step-ahead prediction scores up to this horizon.
        #[arg(long)]
        horizon: Option<usize>,
        /// Smoothing epochs (default: 1 linear, 10 with networks).
        #[arg(long)]
        epochs: Option<usize>,
        /// Initial-state regularization weight used by the smoother prior.
        #[arg(long, default_value_t = 0.0)]
        rho_x: f64,
        /// Experiment start rows in the CSV.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        boundaries: Vec<usize>,
        /// Plot-ready TSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Optional run config supplying the [ekf] section.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit once per grid value of a penalty and tabulate the path.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// tau | tau-g
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated ascending penalty grid.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the stacked self-regression model and classify channels as
    /// outputs (explainable) or inputs (not explainable).
    Causal {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// R2 threshold separating outputs from inputs.
        #[arg(long, default_value_t = 50.0)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct the initial state of a dataset under a saved model.
    ReconstructX0 {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Follow the smoother with a local solve over the initial state.
        #[arg(long)]
        refine: bool,
        #[arg(long, default_value_t = 0.0)]
        rho_x: f64,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        boundaries: Vec<usize>,
        /// Optional run config supplying the [ekf] section.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized; --jobs ignored");
        }
    }
    let result = match &cli.command {
        Command::Generate {
            kind,
            seed,
            out,
            n,
            noise_std,
        } => commands::cmd_generate(*kind, *seed, out, *n, *noise_std),
        Command::Fit {
            config,
            data,
            model,
            report,
        } => commands::cmd_fit(config, data, model, report, cli.verbose),
        Command::Eval {
            model,
            data,
            x0_policy,
            horizon,
            epochs,
            rho_x,
            boundaries,
            out,
            report,
            config,
        } => commands::cmd_eval(
            model,
            data,
            x0_policy,
            *horizon,
            *epochs,
            *rho_x,
            boundaries,
            config.as_deref(),
            out.as_deref(),
            report.as_deref(),
        ),
        Command::Sweep {
            config,
            data,
            param,
            grid,
            out,
        } => commands::cmd_sweep(config, data, *param, grid, out, cli.verbose),
        Command::Causal {
            config,
            data,
            threshold,
            out,
        } => commands::cmd_causal(config, data, *threshold, out.as_deref(), cli.verbose),
        Command::ReconstructX0 {
            model,
            data,
            epochs,
            refine,
            rho_x,
            boundaries,
            config,
        } => commands::cmd_reconstruct_x0(
            model,
            data,
            *epochs,
            *refine,
            *rho_x,
            boundaries,
            config.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}

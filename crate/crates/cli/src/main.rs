//! `kitt`: generate training data, train the captioner or classifier, and
//! predict, fit, search and evaluate GP kernels on CSV data.

mod commands;
mod model_file;
mod run;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "kitt", version, about = "Kernel captioning for Gaussian-process regression")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct Global {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Exact run directory to write into.
    #[arg(long, global = true, conflicts_with = "run_root")]
    pub run_dir: Option<PathBuf>,
    /// Parent for a new timestamped run directory (default: $KITT_RUN_DIR, then ./runs).
    #[arg(long, global = true)]
    pub run_root: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log filter, e.g. `info` or `kitt_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
}

#[derive(Subcommand)]
enum Command {
    /// Sample synthetic training shards.
    GenData(commands::data::GenDataArgs),
    /// Train the caption decoder.
    Train(commands::train::TrainArgs),
    /// Train the single-token classifier.
    TrainClassifier(commands::train::TrainArgs),
    /// Caption a dataset, fit the top candidates and average them.
    PredictKernel(commands::gp::PredictArgs),
    /// Fit a given kernel expression.
    Fit(commands::gp::FitArgs),
    /// Score a fitted model on a CSV file, in original units.
    Evaluate(commands::gp::EvaluateArgs),
    /// Greedy BIC search over sums of vocabulary tokens.
    Search(commands::gp::SearchArgs),
    /// Accuracy or timing suites on synthetic data.
    Benchmark(commands::bench::BenchArgs),
    /// Turn run directories into plot-ready two-column series.
    Report(commands::report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    run::init_logging(&cli.global.log);
    let g = &cli.global;
    let result = match &cli.command {
        Command::GenData(a) => commands::data::gen_data(g, a),
        Command::Train(a) => commands::train::train(g, a, false),
        Command::TrainClassifier(a) => commands::train::train(g, a, true),
        Command::PredictKernel(a) => commands::gp::predict_kernel(g, a),
        Command::Fit(a) => commands::gp::fit(g, a),
        Command::Evaluate(a) => commands::gp::evaluate(g, a),
        Command::Search(a) => commands::gp::search(g, a),
        Command::Benchmark(a) => commands::bench::benchmark(g, a),
        Command::Report(a) => commands::report::report(g, a),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

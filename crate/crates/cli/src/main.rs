mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "kmp", version, about = "Distill graph neural networks into MLPs")]
struct Cli {
    /// Root directory for relative dataset names.
    #[arg(long, env = "KMP_DATA_ROOT", global = true)]
    data_root: Option<PathBuf>,

    /// Parallel (config, seed) workers.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train GNN teachers, one checkpoint per seed.
    Pretrain(RunArgs),
    /// Distill saved teachers into MLP students.
    Distill(DistillArgs),
    /// Run a noise, gamma, kernel or pe-k sweep.
    Sweep(SweepArgs),
    /// Predict classes with a student checkpoint.
    Infer(InferArgs),
    /// Summarize a metrics file.
    Report(ReportArgs),
}

/// Experiment settings. Flags override the manifest file, which overrides
/// defaults.
#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// Flat `key = value` manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Dataset directory, name under the data root, or `sbm`.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, value_parser = ["gcn", "sage"])]
    teacher: Option<String>,
    #[arg(long, value_parser = ["mlp", "glnn", "kmp", "kmp+pe"])]
    method: Option<String>,
    #[arg(long, value_parser = ["trans", "induc"])]
    setting: Option<String>,
    /// Seed count `N` (seeds 0..N) or a comma list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = ["sigmoid", "randomized", "polynomial", "gaussian", "reverse"])]
    kernel: Option<String>,
    #[arg(long, value_parser = ["off", "concat", "mul"])]
    pe: Option<String>,
    #[arg(long)]
    pe_k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long, value_parser = ["batch", "none"])]
    norm: Option<String>,
    /// Feature noise fraction in [0, 1].
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Any other manifest key, as `KEY=VALUE`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory; derived from the configuration if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for cached Laplacian encodings.
    #[arg(long)]
    pe_cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Train every fixed-form kernel and keep the best on validation.
    #[arg(long)]
    select_best_kernel: bool,
    /// Directory holding `teacher-seed<N>.ckpt`; defaults to the run directory.
    #[arg(long)]
    teacher_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_parser = ["noise", "gamma", "kernel", "pe-k"])]
    axis: String,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; encodings are computed from its graph when needed.
    #[arg(long, conflicts_with = "features")]
    dataset: Option<PathBuf>,
    /// Raw `features.bin` file.
    #[arg(long, required_unless_present = "dataset")]
    features: Option<PathBuf>,
    /// Encoding cache file matching the features' rows.
    #[arg(long, requires = "features")]
    pe: Option<PathBuf>,
    /// Output TSV; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    metrics: PathBuf,
    /// Baseline and candidate methods to difference, as `BASE:CAND`.
    #[arg(long = "compare", value_name = "BASE:CAND")]
    compare: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build_global() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    let result = match &cli.command {
        Command::Pretrain(a) => commands::pretrain(&cli, a),
        Command::Distill(a) => commands::distill(&cli, a),
        Command::Sweep(a) => commands::sweep(&cli, a),
        Command::Infer(a) => commands::infer(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

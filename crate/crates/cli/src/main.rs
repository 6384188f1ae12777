use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

#[derive(Parser, Debug)]
#[command(name = "xxcascade", version, about = "Biexciton cascade HOM, g² and lifetime simulator and analysis pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a detector time-tag stream.
    Simulate(commands::SimulateArgs),
    /// g²(0) or HOM visibility from time-tag streams.
    Analyze(commands::AnalyzeArgs),
    /// Fit a lifetime stream or decay histogram.
    Fit(commands::FitArgs),
    /// Visibility versus cavity detuning.
    Sweep(commands::SweepArgs),
    /// Reduced-state purity against 1/(1 + τ_XX/τ_X).
    Oracle(commands::OracleArgs),
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Analysis(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Analysis(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Analysis(m) => write!(f, "analysis failed: {m}"),
        }
    }
}

impl From<xxcascade::Error> for CliError {
    fn from(e: xxcascade::Error) -> Self {
        use xxcascade::Error as E;
        match e {
            E::Config { .. } | E::Parameter { .. } => CliError::Config(e.to_string()),
            E::Io(_) | E::Format(_) => CliError::Io(e.to_string()),
            _ => CliError::Analysis(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.global.workers {
        if w == 0 {
            eprintln!("{}", CliError::Config("`--workers` must be >= 1".into()));
            return ExitCode::from(2);
        }
        pool = pool.num_threads(w);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("cannot start worker pool: {e}");
            return ExitCode::from(3);
        }
    };
    match pool.install(|| commands::run(&cli.global, &cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

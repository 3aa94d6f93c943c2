use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use rkhess::expcli::{run, ExpError, Experiment, ExperimentConfig, ModeSelection};

#[derive(Clone, Copy, ValueEnum)]
enum Cmd {
    Pendulum,
    AllenCahn,
    WaveAsymmetry,
    WaveOptimize,
}

impl From<Cmd> for Experiment {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Pendulum => Experiment::Pendulum,
            Cmd::AllenCahn => Experiment::AllenCahn,
            Cmd::WaveAsymmetry => Experiment::WaveAsymmetry,
            Cmd::WaveOptimize => Experiment::WaveOptimize,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Naive,
    Both,
}

/// Exact vs. naive adjoint Hessians on the pendulum, Allen–Cahn and wave
/// benchmarks. Writes a CSV table and prints a summary.
#[derive(Parser)]
#[command(name = "rkhess", version)]
struct Cli {
    experiment: Cmd,
    /// JSON config; unset fields take the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV destination (default: `<experiment>.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

fn config(cli: &Cli) -> Result<ExperimentConfig, ExpError> {
    let experiment = Experiment::from(cli.experiment);
    let mut config = match &cli.config {
        Some(path) => {
            let c = ExperimentConfig::load(path)?;
            if c.experiment != experiment {
                return Err(ExpError::Config(format!(
                    "config is for `{}`, not `{}`",
                    c.experiment.name(),
                    experiment.name()
                )));
            }
            c
        }
        None => ExperimentConfig::new(experiment),
    };
    if let Some(mode) = cli.mode {
        config.mode = Some(match mode {
            Mode::Exact => ModeSelection::Exact,
            Mode::Naive => ModeSelection::Naive,
            Mode::Both => ModeSelection::Both,
        });
    }
    if cli.h.is_some() {
        config.h = cli.h;
    }
    if cli.steps.is_some() {
        config.steps = cli.steps;
    }
    if let Some(out) = &cli.out {
        config.output = Some(out.display().to_string());
    }
    Ok(config)
}

fn execute(cli: &Cli) -> Result<(), ExpError> {
    let config = config(cli)?;
    if cli.print_config {
        println!("{}", config.to_json());
        return Ok(());
    }
    let out = config
        .output
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", config.experiment.name())));
    let report = run(&config)?;
    std::fs::write(&out, report.csv.render())
        .map_err(|e| ExpError::Config(format!("cannot write {}: {e}", out.display())))?;
    for line in &report.summary {
        println!("{line}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rkhess: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

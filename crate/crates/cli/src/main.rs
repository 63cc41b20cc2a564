use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dpw_core::harness::{self, ExperimentConfig, Task};

#[derive(Parser)]
#[command(name = "dpw", version, about = "Differentially private training workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the smallest noise multiplier that fits the budget.
    Calibrate(Common),
    /// Minimal noise per example across the configured batch sizes (CSV).
    NoiseCurve(Common),
    /// Run a memorization sanity check. Exit 0 on PASS, 1 on FAIL.
    Sanity(Common),
    /// Private training, central or federated (CSV metrics).
    Train(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Charge each clipping group separately at sigma / sqrt(groups).
    #[arg(long)]
    strict_accounting: bool,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

enum Failure {
    Fail,
    Error(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Error(e)
    }
}

impl From<dpw_core::DpwError> for Failure {
    fn from(e: dpw_core::DpwError) -> Self {
        Failure::Error(e.into())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Error(e.into())
    }
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.strict_accounting {
        cfg.strict_accounting = true;
    }
    Ok(cfg)
}

fn resolve_task(command: &Command, cfg: &mut ExperimentConfig) -> anyhow::Result<()> {
    match command {
        Command::Calibrate(_) => cfg.task = Task::Calibrate,
        Command::NoiseCurve(_) => cfg.task = Task::NoiseCurve,
        Command::Sanity(_) => {
            anyhow::ensure!(
                matches!(cfg.task, Task::SanityNoise | Task::SanityPattern),
                "`sanity` needs task sanity-noise or sanity-pattern, config has {:?}",
                cfg.task
            );
        }
        Command::Train(_) => {
            anyhow::ensure!(
                matches!(cfg.task, Task::Train | Task::TrainFederated),
                "`train` needs task train or train-federated, config has {:?}",
                cfg.task
            );
        }
    }
    cfg.validate()?;
    Ok(())
}

fn open_out(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = match &cli.command {
        Command::Calibrate(c) | Command::NoiseCurve(c) | Command::Sanity(c) | Command::Train(c) => c,
    };
    let mut cfg = load_config(common)?;
    resolve_task(&cli.command, &mut cfg)?;

    if common.print_config {
        let mut out = open_out(common.out.as_deref())?;
        writeln!(out, "{}", cfg.to_json_pretty())?;
        out.flush()?;
        return Ok(());
    }

    match cli.command {
        Command::Calibrate(_) => {
            let report = harness::cmd_calibrate(&cfg)?;
            eprintln!(
                "sigma={:.6} eps={:.6} delta={:e}",
                report.sigma, report.epsilon_achieved, report.delta
            );
            let mut out = open_out(common.out.as_deref())?;
            writeln!(out, "{}", to_json(&report)?)?;
            out.flush()?;
        }
        Command::NoiseCurve(_) => {
            let rows = harness::cmd_noise_curve(&cfg)?;
            let out = open_out(common.out.as_deref())?;
            harness::write_noise_curve(out, &rows)?;
        }
        Command::Sanity(_) => {
            let report = harness::cmd_sanity(&cfg)?;
            let mut out = open_out(common.out.as_deref())?;
            writeln!(out, "{}", to_json(&report)?)?;
            out.flush()?;
            eprintln!("{:?}", report.outcome);
            if !report.passed() {
                return Err(Failure::Fail);
            }
        }
        Command::Train(_) => {
            let output = harness::cmd_train(&cfg)?;
            eprintln!("sigma={:.6}", output.sigma());
            let out = open_out(common.out.as_deref())?;
            output.write_csv(out)?;
        }
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Fail) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

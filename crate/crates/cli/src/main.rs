use std::path::PathBuf;
use std::process::ExitCode;

use afnet::config::ExperimentConfig;
use afnet::runner::{run_ablate, run_analyze, run_eval, run_train};
use afnet::training::Policy;
use afnet::verify::run_verify;
use afnet::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "afnet", version, about = "Train and analyse ample-focal video networks on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoint.ckpt and selection.csv.
    Train(Common),
    /// Evaluate a checkpoint on the eval split.
    Eval(Common),
    /// Grid of policies x ratios x seeds; writes comparison.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated selection ratios.
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75])]
        ratios: Vec<f64>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Selection statistics and cost model; writes stats.csv, cost.csv, cost.txt.
    Analyze(Common),
    /// Identity and gradient checks on freshly initialised models.
    Verify {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment JSON; the built-in desk experiment when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rt: Option<f64>,
    #[arg(long)]
    rs: Option<f64>,
    /// Frame policy; for `ablate`, a comma-separated list (default: all).
    #[arg(long)]
    policy: Option<String>,
    /// Checkpoint to resume from (train) or to load (eval, analyze).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_VERIFY: u8 = 4;

impl Common {
    fn experiment(&self, single_policy: bool) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.rt {
            cfg.training.rt = v;
        }
        if let Some(v) = self.rs {
            cfg.training.rs = v;
        }
        if single_policy {
            if let Some(p) = &self.policy {
                cfg.training.policy = Policy::parse(p)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig, default: &str) -> PathBuf {
        self.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from(default))
    }

    fn policies(&self) -> Result<Vec<Policy>, Error> {
        match &self.policy {
            None => Ok(Policy::ALL.to_vec()),
            Some(list) => list.split(',').map(|p| Policy::parse(p.trim())).collect(),
        }
    }

    fn require_checkpoint(&self) -> Result<&PathBuf, Error> {
        self.checkpoint.as_ref().ok_or_else(|| Error::Config("--checkpoint is required".into()))
    }
}

fn threads() -> usize {
    std::env::var("AFNET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

enum Outcome {
    Done,
    VerificationFailed,
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.experiment(true)?;
            let out = c.out_dir(&cfg, "runs/train");
            let run = run_train(&cfg, &out, c.checkpoint.as_deref())?;
            if let Some(last) = run.metrics.last() {
                println!("epoch {} {} accuracy {:.4}", last.epoch, last.split.name(), last.accuracy);
            }
            println!("checkpoint {}", run.checkpoint.display());
        }
        Command::Eval(c) => {
            let cfg = c.experiment(true)?;
            let m = run_eval(&cfg, c.require_checkpoint()?, &c.out_dir(&cfg, "runs/eval"))?;
            println!("accuracy {:.4} precision_salient {:.4}", m.accuracy, m.precision_salient);
        }
        Command::Ablate { common, ratios, seeds } => {
            let cfg = common.experiment(false)?;
            let out = common.out_dir(&cfg, "runs/ablate");
            let runs = run_ablate(&cfg, &common.policies()?, &ratios, &seeds, threads(), &out)?;
            println!("{} runs written to {}", runs.len(), out.join("comparison.csv").display());
        }
        Command::Analyze(c) => {
            let cfg = c.experiment(true)?;
            let out = c.out_dir(&cfg, "runs/analyze");
            let report = run_analyze(&cfg, c.checkpoint.as_deref(), &out)?;
            println!("rt trend slope {:.4}", report.stats.trend_slope());
            println!("cost {:.0} MACs per video ({:.3} of baseline)", report.cost.total, report.cost.ratio_to_baseline());
        }
        Command::Verify { out } => {
            let report = run_verify()?;
            report.write_text(&mut std::io::stdout())?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                report.write_csv(&dir.join("verify.csv"))?;
            }
            if !report.passed() {
                return Ok(Outcome::VerificationFailed);
            }
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(EXIT_VERIFY),
        Err(e) => {
            eprintln!("afnet: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_FAILURE,
            })
        }
    }
}

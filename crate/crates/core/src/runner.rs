//! Experiment entry points behind the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::analysis::{count_flops, export_cost, export_selection, export_stats, selection_stats, write_cost_summary, CostReport, SelectionStats};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::{EpochMetrics, Policy, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const SELECTION_FILE: &str = "selection.csv";

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn metrics_header(blocks: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "split".into(), "accuracy".into(), "ce".into(), "ratio_penalty".into()];
    cols.extend((0..blocks).map(|n| format!("rt_block_{n}")));
    cols.push("tau".into());
    cols.push("precision_salient".into());
    cols.join(",")
}

pub fn metrics_row(m: &EpochMetrics, blocks: usize) -> String {
    let mut cols = vec![m.epoch.to_string(), m.split.name().to_string(), num(m.accuracy), num(m.ce), num(m.ratio_penalty)];
    cols.extend((0..blocks).map(|n| num(m.rt_blocks.get(n).copied().unwrap_or(f64::NAN))));
    cols.push(num(m.tau));
    cols.push(num(m.precision_salient));
    cols.join(",")
}

fn write_lines(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn new_trainer(cfg: &ExperimentConfig) -> Result<(Trainer<f32>, crate::training::Dataset, crate::training::Dataset)> {
    let (train, eval) = cfg.datasets()?;
    let model = Model::<f32>::build(cfg.model.clone(), &mut cfg.model_rng())?;
    let trainer = Trainer::new(model, cfg.train_config(), cfg.navigation.schedule(), train.len())?;
    Ok((trainer, train, eval))
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

/// Trains to `training.epochs`, rewriting `metrics.csv` after every epoch
/// and the checkpoint at the end. When resuming into a directory holding
/// an earlier `metrics.csv`, rows for completed epochs are kept.
pub fn run_train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<TrainRun> {
    fs::create_dir_all(out)?;
    let (mut trainer, train, eval) = new_trainer(cfg)?;
    let blocks = trainer.model.af_block_count();
    let mut rows = Vec::new();
    if let Some(ck) = resume {
        Checkpoint::load(ck)?.restore_trainer(&mut trainer)?;
        if let Ok(text) = fs::read_to_string(out.join(METRICS_FILE)) {
            rows.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < trainer.epoch))
                    .map(str::to_string),
            );
        }
    }
    fs::write(out.join("config.json"), cfg.to_json())?;
    let header = metrics_header(blocks);
    write_lines(&out.join(METRICS_FILE), &header, &rows)?;
    let mut metrics = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let m = trainer.train_epoch(&train)?;
        let (e, _) = trainer.evaluate(&eval)?;
        rows.push(metrics_row(&m, blocks));
        rows.push(metrics_row(&e, blocks));
        metrics.push(m);
        metrics.push(e);
        write_lines(&out.join(METRICS_FILE), &header, &rows)?;
    }
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::from_trainer(&trainer).save(&checkpoint)?;
    let (_, records) = trainer.evaluate(&eval)?;
    export_selection(&records, &out.join(SELECTION_FILE))?;
    Ok(TrainRun { metrics, checkpoint })
}

fn restored(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(Trainer<f32>, crate::training::Dataset)> {
    let (mut trainer, _, eval) = new_trainer(cfg)?;
    if let Some(ck) = checkpoint {
        Checkpoint::load(ck)?.restore_trainer(&mut trainer)?;
    }
    Ok((trainer, eval))
}

/// Evaluates a checkpoint on the eval split; writes `eval.csv` and the selection table.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<EpochMetrics> {
    fs::create_dir_all(out)?;
    let (trainer, eval) = restored(cfg, Some(checkpoint))?;
    let blocks = trainer.model.af_block_count();
    let (m, records) = trainer.evaluate(&eval)?;
    write_lines(&out.join("eval.csv"), &metrics_header(blocks), &[metrics_row(&m, blocks)])?;
    export_selection(&records, &out.join(SELECTION_FILE))?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub policy: Policy,
    pub ratio: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub precision_salient: f64,
}

/// Experiment for one ablation cell: `ratio` is the frame ratio, or the
/// region ratio for `center_crop`.
pub fn ablation_config(base: &ExperimentConfig, policy: Policy, ratio: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.training.policy = policy;
    match policy {
        Policy::CenterCrop => cfg.training.rs = ratio,
        _ => cfg.training.rt = ratio,
    }
    cfg
}

/// Trains and evaluates one model per `(policy, ratio, seed)` on up to
/// `threads` workers; writes `comparison.csv` with one row per run
/// followed by a mean/std row per `(policy, ratio)` cell.
pub fn run_ablate(
    base: &ExperimentConfig,
    policies: &[Policy],
    ratios: &[f64],
    seeds: &[u64],
    threads: usize,
    out: &Path,
) -> Result<Vec<AblationRun>> {
    fs::create_dir_all(out)?;
    for &r in ratios {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config(format!("ablation ratio {r} outside (0, 1]")));
        }
    }
    let jobs: Vec<(Policy, f64, u64)> = policies
        .iter()
        .flat_map(|&p| ratios.iter().flat_map(move |&r| seeds.iter().map(move |&s| (p, r, s))))
        .collect();
    for &(p, r, s) in &jobs {
        ablation_config(base, p, r, s).validate()?;
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRun>>>> = Mutex::new(jobs.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(policy, ratio, seed)) = jobs.get(i) else { break };
                let run = (|| {
                    let cfg = ablation_config(base, policy, ratio, seed);
                    let (mut trainer, train, eval) = new_trainer(&cfg)?;
                    while trainer.epoch < trainer.config.epochs {
                        trainer.train_epoch(&train)?;
                    }
                    let (m, _) = trainer.evaluate(&eval)?;
                    Ok(AblationRun { policy, ratio, seed, accuracy: m.accuracy, precision_salient: m.precision_salient })
                })();
                results.lock().expect("ablation results lock")[i] = Some(run);
            });
        }
    });
    let runs: Vec<AblationRun> = results
        .into_inner()
        .expect("ablation results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<_>>()?;

    let header = "kind,policy,ratio,seed,accuracy,accuracy_std,precision_salient";
    let mut rows: Vec<String> = runs
        .iter()
        .map(|r| format!("run,{},{},{},{},,{}", r.policy.name(), num(r.ratio), r.seed, num(r.accuracy), num(r.precision_salient)))
        .collect();
    for &p in policies {
        for &ratio in ratios {
            let cell: Vec<&AblationRun> = runs.iter().filter(|r| r.policy == p && r.ratio == ratio).collect();
            let (mean, std) = mean_std(&cell.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            let prec = mean_std(&cell.iter().map(|r| r.precision_salient).collect::<Vec<_>>()).0;
            rows.push(format!("summary,{},{},,{},{},{}", p.name(), num(ratio), num(mean), num(std), num(prec)));
        }
    }
    write_lines(&out.join("comparison.csv"), header, &rows)?;
    Ok(runs)
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Clone, Debug)]
pub struct AnalyzeReport {
    pub stats: SelectionStats,
    pub cost: CostReport,
}

/// Selection statistics on the eval split and the cost model at the
/// configured ratios; writes `stats.csv`, `cost.csv`, `cost.txt` and the
/// selection table.
pub fn run_analyze(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<AnalyzeReport> {
    fs::create_dir_all(out)?;
    let (trainer, eval) = restored(cfg, checkpoint)?;
    let (_, records) = trainer.evaluate(&eval)?;
    let stats = selection_stats(&records)?;
    let cost = count_flops(&cfg.model, cfg.training.rt, cfg.training.rs)?;
    export_selection(&records, &out.join(SELECTION_FILE))?;
    export_stats(&stats, &out.join("stats.csv"))?;
    export_cost(&cost, &out.join("cost.csv"))?;
    let mut summary = Vec::new();
    write_cost_summary(&cost, &mut summary)?;
    let fractions = stats.rt_mean.clone();
    if let Ok(realized) = cost.realized(&fractions) {
        summary.extend_from_slice(format!("realized under eval selections {realized:.0}\n").as_bytes());
    }
    summary.extend_from_slice(format!("rt trend mean slope {}\n", stats.trend_slope()).as_bytes());
    fs::write(out.join("cost.txt"), summary)?;
    Ok(AnalyzeReport { stats, cost })
}

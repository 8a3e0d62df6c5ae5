//! `train` and `eval`: per-seed training with persisted checkpoints and logs,
//! and test-split evaluation into a report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, ExperimentConfig};
use super::data::{load_dataset, LoadedDataset};
use crate::datasets::{DatasetKind, InteractionDataset};
use crate::error::{Error, Result};
use crate::evaluation::{auc, dcg_at_k, log_loss, paired_t_test, rank_by_user, recall_at_k, Aggregate};
use crate::models::{Checkpoint, FactorizationMachine};
use crate::training::trainer::EpochLog;
use crate::training::{train, TrainOutcome};

pub const CONFIG_FILE: &str = "config.resolved.json";
pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "log.tsv";
pub const TRAIN_SUMMARY_FILE: &str = "train.json";
pub const RUN_INFO_FILE: &str = "run_info.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("seed-{seed}.ckpt"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Test metrics of a CVR model: AUC and log-loss on semi-synthetic data,
/// DCG@K and Recall@K on real data.
pub fn evaluate_model(
    dataset: &InteractionDataset,
    cvr: &FactorizationMachine,
    eval: &EvalConfig,
) -> Result<BTreeMap<String, f64>> {
    let test = dataset.test();
    if test.is_empty() {
        return Err(Error::validation("the test split is empty"));
    }
    let scores: Vec<f64> = test.iter().map(|p| cvr.score(&dataset.features(p.user, p.item))).collect::<Result<_>>()?;
    let labels: Vec<bool> = test.iter().map(|p| p.label).collect();
    let mut metrics = BTreeMap::new();
    match dataset.kind() {
        DatasetKind::SemiSynthetic => {
            metrics.insert("auc".to_string(), auc(&scores, &labels)?);
            metrics.insert("log_loss".to_string(), log_loss(&scores, &labels)?);
        }
        DatasetKind::Real => {
            let lists = rank_by_user(test.iter().zip(&scores).map(|(p, &s)| (p.user, p.item, s, p.label)))?;
            for &k in &eval.ks {
                metrics.insert(format!("dcg@{k}"), dcg_at_k(&lists, k)?);
                metrics.insert(format!("recall@{k}"), recall_at_k(&lists, k, eval.recall_mode)?);
            }
        }
    }
    Ok(metrics)
}

/// Trains one seed on its dataset.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(LoadedDataset, TrainOutcome)> {
    let loaded = load_dataset(&cfg.dataset, seed)?;
    let outcome = train(&loaded.dataset, &cfg.train, seed)?;
    Ok((loaded, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_validation: Option<f64>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub estimator: String,
    pub config_hash: String,
    pub seeds: Vec<SeedSummary>,
}

impl TrainSummary {
    pub fn failures(&self) -> Vec<&SeedSummary> {
        self.seeds.iter().filter(|s| !s.ok).collect()
    }
}

fn format_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn log_rows(seed: u64, epochs: &[EpochLog], out: &mut String) {
    for e in epochs {
        writeln!(
            out,
            "{seed}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.epoch,
            e.rounds,
            e.outer_steps,
            e.imputation_loss,
            e.prediction_loss,
            format_opt(e.upper_loss),
            format_opt(e.mean_lambda),
            format_opt(e.validation)
        )
        .expect("write to string");
    }
}

#[derive(Debug, Serialize)]
struct RunInfo {
    command: &'static str,
    version: &'static str,
    git_revision: Option<String>,
    config_hash: String,
    wall_clock_seconds: f64,
    per_seed_seconds: BTreeMap<u64, f64>,
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn write_run_info(
    dir: &Path,
    command: &'static str,
    hash: &str,
    started: Instant,
    per_seed: BTreeMap<u64, f64>,
) -> Result<()> {
    write_json(
        &dir.join(RUN_INFO_FILE),
        &RunInfo {
            command,
            version: env!("CARGO_PKG_VERSION"),
            git_revision: git_revision(),
            config_hash: hash.to_string(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            per_seed_seconds: per_seed,
        },
    )
}

/// Trains every seed, writing the resolved config, one checkpoint per
/// successful seed, the epoch log and a summary. Failed seeds are recorded
/// and do not stop the others.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    let started = Instant::now();
    let hash = cfg.hash();
    write_file(&out.join(CONFIG_FILE), cfg.to_pretty_json())?;
    let results: Vec<(u64, f64, Result<TrainOutcome>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let t = Instant::now();
            let result = train_seed(cfg, seed).map(|(_, outcome)| outcome);
            (seed, t.elapsed().as_secs_f64(), result)
        })
        .collect();

    let mut log = format!(
        "# config_hash={hash}\nseed\tepoch\trounds\touter_steps\timputation_loss\tprediction_loss\tupper_loss\tmean_lambda\tvalidation\n"
    );
    let mut seeds = Vec::new();
    let mut timing = BTreeMap::new();
    for (seed, secs, result) in results {
        timing.insert(seed, secs);
        match result {
            Ok(outcome) => {
                let mut ckpt = outcome.checkpoint(&cfg.train, seed);
                if let Some(obj) = ckpt.hyperparameters.as_object_mut() {
                    obj.insert("config_hash".into(), serde_json::Value::String(hash.clone()));
                }
                let path = checkpoint_path(out, seed);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                ckpt.save(&path)?;
                log_rows(seed, &outcome.epochs, &mut log);
                seeds.push(SeedSummary {
                    seed,
                    ok: true,
                    error: None,
                    epochs: outcome.epochs.len(),
                    best_epoch: outcome.best_epoch,
                    best_validation: outcome.best_validation,
                    stopped_early: outcome.stopped_early,
                });
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                seeds.push(SeedSummary {
                    seed,
                    ok: false,
                    error: Some(e.to_string()),
                    epochs: 0,
                    best_epoch: 0,
                    best_validation: None,
                    stopped_early: false,
                });
            }
        }
    }
    write_file(&out.join(LOG_FILE), log)?;
    let summary = TrainSummary { estimator: cfg.train.estimator.name().to_string(), config_hash: hash.clone(), seeds };
    write_json(&out.join(TRAIN_SUMMARY_FILE), &summary)?;
    write_run_info(out, "train", &hash, started, timing)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub estimator: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub metrics: BTreeMap<String, Aggregate>,
    /// Estimator of the baseline report, when one was given.
    pub baseline: Option<String>,
    /// Two-sided paired t-test p-value per metric against the baseline.
    pub significance: BTreeMap<String, f64>,
}

/// Per-seed metrics of trained models, in seed order.
pub fn evaluate_seeds(
    cfg: &ExperimentConfig,
    models: &BTreeMap<u64, FactorizationMachine>,
) -> Result<(String, Vec<BTreeMap<String, f64>>)> {
    let per_seed: Vec<Result<(String, BTreeMap<String, f64>)>> = cfg
        .seeds
        .par_iter()
        .map(|seed| {
            let loaded = load_dataset(&cfg.dataset, *seed)?;
            let metrics = evaluate_model(&loaded.dataset, &models[seed], &cfg.eval)?;
            Ok((loaded.name, metrics))
        })
        .collect();
    let mut name = String::new();
    let mut rows = Vec::new();
    for r in per_seed {
        let (n, m) = r?;
        name = n;
        rows.push(m);
    }
    Ok((name, rows))
}

/// Aggregates per-seed metrics and tests them against an optional baseline.
pub fn build_report(
    cfg: &ExperimentConfig,
    dataset: String,
    rows: &[BTreeMap<String, f64>],
    baseline: Option<&Report>,
) -> Result<Report> {
    let mut metrics = BTreeMap::new();
    if let Some(first) = rows.first() {
        for name in first.keys() {
            metrics.insert(name.clone(), Aggregate::from_values(rows.iter().map(|r| r[name]).collect()));
        }
    }
    let mut significance = BTreeMap::new();
    if let Some(base) = baseline {
        if base.seeds != cfg.seeds {
            return Err(Error::validation(format!(
                "baseline seeds {:?} do not match run seeds {:?}",
                base.seeds, cfg.seeds
            )));
        }
        for (name, agg) in &metrics {
            if let Some(other) = base.metrics.get(name) {
                significance.insert(name.clone(), paired_t_test(&agg.per_seed, &other.per_seed)?);
            }
        }
    }
    Ok(Report {
        estimator: cfg.train.estimator.name().to_string(),
        dataset,
        seeds: cfg.seeds.clone(),
        config_hash: cfg.hash(),
        metrics,
        baseline: baseline.map(|b| b.estimator.clone()),
        significance,
    })
}

/// Loads the checkpoints of `run_dir`, scores the test split and writes
/// `report.json` into `out`.
pub fn cmd_eval(cfg: &ExperimentConfig, run_dir: &Path, out: &Path) -> Result<Report> {
    let started = Instant::now();
    let missing: Vec<String> =
        cfg.seeds.iter().filter(|&&s| !checkpoint_path(run_dir, s).exists()).map(|s| s.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "no checkpoint for seed(s) {} under {}",
            missing.join(", "),
            run_dir.join(CHECKPOINT_DIR).display()
        )));
    }
    let mut models = BTreeMap::new();
    for &seed in &cfg.seeds {
        models.insert(seed, Checkpoint::load(&checkpoint_path(run_dir, seed))?.models.cvr);
    }
    let baseline = match &cfg.eval.baseline {
        Some(path) => Some(read_json::<Report>(path)?),
        None => None,
    };
    let (name, rows) = evaluate_seeds(cfg, &models)?;
    let report = build_report(cfg, name, &rows, baseline.as_ref())?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_run_info(out, "eval", &report.config_hash, started, BTreeMap::new())?;
    Ok(report)
}

//! `verify`: numeric checks of the estimator theory and of the
//! hypergradient, written as a JSON report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, VerifyConfig};
use super::run::write_json;
use crate::datasets::{DatasetKind, Event, InteractionDataset};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::theory::{
    bias_closed_form, bound_coverage, enumerate_dr_distribution, hoeffding_simulation, random_instance,
    variance_closed_form, TheoryInstance, TheoryPair,
};
use crate::training::hyper::{hypergradient, upper_loss};
use crate::training::{Estimator, LambdaConfig, MetaConfig, TrainConfig, Trainer};

pub const VERIFY_FILE: &str = "verify.json";

const CLOSED_FORM_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult { name: name.to_string(), passed, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config_hash: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

/// Closed-form bias and variance against exact enumeration of all click
/// realisations on random instances of 1 to `closed_form_max_pairs` pairs.
pub fn check_bias_variance(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = stream_rng(cfg.seed, Stream::Theory);
    let max_pairs = cfg.closed_form_max_pairs.max(1);
    let (mut worst_bias, mut worst_var) = (0.0f64, 0.0f64);
    for k in 0..cfg.closed_form_instances {
        let inst = random_instance(1 + k % max_pairs, 1, 0.1, &mut rng)?;
        let moments = enumerate_dr_distribution(&inst)?;
        worst_bias = worst_bias.max((bias_closed_form(&inst) - (moments.mean - inst.ideal_loss()).abs()).abs());
        worst_var = worst_var.max((variance_closed_form(&inst) - moments.variance).abs());
    }
    let passed = worst_bias <= CLOSED_FORM_TOL && worst_var <= CLOSED_FORM_TOL;
    Ok(CheckResult::new(
        "bias_variance_closed_form",
        passed,
        format!(
            "{} instances, max |bias diff| {worst_bias:.3e}, max |variance diff| {worst_var:.3e}, tolerance {CLOSED_FORM_TOL:e}",
            cfg.closed_form_instances
        ),
    ))
}

fn all_clicks(n: usize) -> impl Iterator<Item = Vec<bool>> {
    (0u32..1 << n).map(move |mask| (0..n).map(|k| mask & (1 << k) != 0).collect())
}

/// Unbiasedness when either the propensities or the imputed errors are
/// exact.
pub fn check_double_robustness(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = stream_rng(cfg.seed.wrapping_add(1), Stream::Theory);
    let max_pairs = cfg.closed_form_max_pairs.clamp(1, 10);
    let (mut worst_p, mut worst_e) = (0.0f64, 0.0f64);
    for k in 0..cfg.robustness_instances {
        let base = random_instance(1 + k % max_pairs, 1, 0.1, &mut rng)?;
        let exact_p: Vec<TheoryPair> = base.pairs.iter().map(|q| TheoryPair { p_hat: q.p, ..*q }).collect();
        let inst = TheoryInstance::new(exact_p, base.eta)?;
        worst_p = worst_p.max((enumerate_dr_distribution(&inst)?.mean - inst.ideal_loss()).abs());

        let exact_e: Vec<TheoryPair> = base.pairs.iter().map(|q| TheoryPair { e_hat: q.e, ..*q }).collect();
        let inst = TheoryInstance::new(exact_e, base.eta)?;
        let ideal = inst.ideal_loss();
        for clicks in all_clicks(inst.len()) {
            worst_e = worst_e.max((inst.dr_loss(&clicks) - ideal).abs());
        }
    }
    let passed = worst_p <= CLOSED_FORM_TOL && worst_e <= CLOSED_FORM_TOL;
    Ok(CheckResult::new(
        "double_robustness",
        passed,
        format!(
            "{} instances, exact propensities: max |E[DR] - ideal| {worst_p:.3e}; exact imputation: max pointwise |DR - ideal| {worst_e:.3e}",
            cfg.robustness_instances
        ),
    ))
}

/// Frequency with which the selected hypothesis' ideal loss lies under the
/// generalisation bound.
pub fn check_bound_coverage(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = stream_rng(cfg.seed.wrapping_add(2), Stream::Theory);
    let inst = random_instance(cfg.coverage_pairs, cfg.coverage_hypotheses, cfg.coverage_eta, &mut rng)?;
    let coverage = bound_coverage(&inst, cfg.coverage_trials, cfg.seed)?;
    let target = 1.0 - cfg.coverage_eta;
    Ok(CheckResult::new(
        "generalization_bound_coverage",
        coverage.frequency() >= target,
        format!(
            "{}/{} trials covered ({:.4}), required {target:.4}",
            coverage.hits,
            coverage.trials,
            coverage.frequency()
        ),
    ))
}

/// Empirical deviation frequencies of Bernoulli means under the Hoeffding
/// bound for ε = 0.1, 0.2, …, 1.0.
pub fn check_hoeffding(cfg: &VerifyConfig) -> Result<CheckResult> {
    let n = cfg.coverage_pairs.max(1);
    let probs: Vec<f64> = (0..n).map(|k| 0.1 + 0.8 * k as f64 / n as f64).collect();
    let epsilons: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
    let checks = hoeffding_simulation(&probs, &epsilons, cfg.hoeffding_trials, cfg.seed);
    let violations: Vec<String> = checks
        .iter()
        .filter(|c| c.empirical > c.bound)
        .map(|c| format!("ε {}: {} > {}", c.epsilon, c.empirical, c.bound))
        .collect();
    let detail = if violations.is_empty() {
        let worst = checks.iter().map(|c| c.empirical / c.bound).fold(0.0, f64::max);
        format!("{} ε values, {} trials, max empirical/bound {worst:.4}", checks.len(), cfg.hoeffding_trials)
    } else {
        violations.join("; ")
    };
    Ok(CheckResult::new("hoeffding_tail", violations.is_empty(), detail))
}

/// 10 clicked events over 4 users × 5 items.
pub fn hypergradient_toy() -> Result<InteractionDataset> {
    let mut train = Vec::new();
    for u in 0..4 {
        for i in 0..5 {
            if (u + 2 * i) % 2 == 0 {
                train.push(Event { user: u, item: i, converted: (u * 3 + i) % 4 < 2 });
            }
        }
    }
    InteractionDataset::new(DatasetKind::Real, 4, 5, train, Vec::new(), Vec::new())
}

pub fn hypergradient_toy_config() -> TrainConfig {
    TrainConfig {
        estimator: Estimator::DrMseTrilevel,
        rank: 4,
        init_std: 0.5,
        learning_rate: 0.01,
        batch_size: 10,
        lambda: LambdaConfig { learning_rate: 0.005, embed_std: 0.5, ..Default::default() },
        meta: MetaConfig { batch_size: 10, pseudo_learning_rate: 1.0, ..Default::default() },
        ..Default::default()
    }
}

/// Relative L2 error between the analytic hypergradient and central
/// differences of the upper loss on the trainer's next meta batch.
fn hypergradient_error(trainer: &mut Trainer) -> Result<(f64, f64)> {
    let batch = trainer.sample_meta_batch()?;
    let models = trainer.meta_models()?;
    let net = trainer.state().lambda.as_ref().ok_or_else(|| Error::validation("trainer has no λ network"))?;
    let analytic = hypergradient(&models, net, &batch)?.grad_xi;
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (idx, a) in analytic.iter().enumerate() {
        let mut plus = net.clone();
        plus.params_mut()[idx] += FD_STEP;
        let mut minus = net.clone();
        minus.params_mut()[idx] -= FD_STEP;
        let fd = (upper_loss(&models, &plus, &batch)? - upper_loss(&models, &minus, &batch)?) / (2.0 * FD_STEP);
        diff += (a - fd).powi(2);
        norm += fd * fd;
    }
    Ok((diff.sqrt() / norm.sqrt().max(f64::MIN_POSITIVE), norm.sqrt()))
}

/// Hypergradient against finite differences at initialisation and after
/// `hypergradient_outer_steps` λ updates.
pub fn check_hypergradient(cfg: &VerifyConfig) -> Result<CheckResult> {
    let dataset = hypergradient_toy()?;
    let train_cfg = hypergradient_toy_config();
    let mut trainer = Trainer::new(&dataset, &train_cfg, cfg.seed)?;
    let (rel_init, norm_init) = hypergradient_error(&mut trainer)?;
    for _ in 0..cfg.hypergradient_outer_steps {
        trainer.outer_step()?;
    }
    let (rel_late, norm_late) = hypergradient_error(&mut trainer)?;
    Ok(CheckResult::new(
        "hypergradient_finite_difference",
        rel_init < FD_TOL && rel_late < FD_TOL,
        format!(
            "relative error {rel_init:.3e} at init (|g| {norm_init:.3e}), {rel_late:.3e} after {} outer steps (|g| {norm_late:.3e}); h {FD_STEP:e}, tolerance {FD_TOL:e}",
            cfg.hypergradient_outer_steps
        ),
    ))
}

pub fn run_checks(cfg: &VerifyConfig) -> Vec<CheckResult> {
    type Check = fn(&VerifyConfig) -> Result<CheckResult>;
    let checks: [(&str, Check); 5] = [
        ("bias_variance_closed_form", check_bias_variance),
        ("double_robustness", check_double_robustness),
        ("generalization_bound_coverage", check_bound_coverage),
        ("hoeffding_tail", check_hoeffding),
        ("hypergradient_finite_difference", check_hypergradient),
    ];
    checks
        .iter()
        .map(|(name, check)| check(cfg).unwrap_or_else(|e| CheckResult::new(name, false, format!("error: {e}"))))
        .collect()
}

/// Runs every check, writes `verify.json` into `out` and fails with
/// [`Error::VerificationFailed`] if any check did not pass.
pub fn cmd_verify(cfg: &ExperimentConfig, out: &Path) -> Result<VerifyReport> {
    let checks = run_checks(&cfg.verify);
    let report = VerifyReport { config_hash: cfg.hash(), passed: checks.iter().all(|c| c.passed), checks };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(VERIFY_FILE), &report)?;
    for c in &report.checks {
        if c.passed {
            log::debug!("PASS {}: {}", c.name, c.detail);
        } else {
            log::warn!("FAIL {}: {}", c.name, c.detail);
        }
    }
    if !report.passed {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(Error::VerificationFailed(failed.join(", ")));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyConfig {
        VerifyConfig {
            closed_form_instances: 20,
            closed_form_max_pairs: 6,
            robustness_instances: 10,
            coverage_trials: 500,
            hoeffding_trials: 2000,
            hypergradient_outer_steps: 5,
            ..Default::default()
        }
    }

    #[test]
    fn every_check_passes_on_small_budgets() {
        for check in run_checks(&small()) {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn toy_has_ten_clicked_events() {
        assert_eq!(hypergradient_toy().unwrap().train().len(), 10);
    }
}

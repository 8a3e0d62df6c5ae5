//! Loss functions of the doubly robust family.
//!
//! Everything here is a pure function of per-sample predictions, imputed
//! errors, propensities and labels. Prediction losses (naive, EIB, IPS, DR,
//! CTR, CTCVR) are normalised by a configurable denominator; imputation
//! losses (DR-JL, MRDR, DR-BIAS, DR-MSE) are plain sums over clicked samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor used inside every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Default propensity floor applied to predicted click-through rates.
pub const DEFAULT_PROPENSITY_FLOOR: f64 = 0.03;

/// One user-item pair as seen by the estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub user: usize,
    pub item: usize,
    pub clicked: bool,
    /// Observed conversion; only defined on clicked samples.
    pub converted: Option<bool>,
    /// Predicted conversion probability r̂.
    pub predicted: f64,
    /// Imputed error ê.
    pub imputed_error: f64,
    /// Estimated propensity p̂ (click probability).
    pub propensity: f64,
}

impl Sample {
    /// Prediction error e on a clicked sample.
    pub fn error(&self) -> Option<f64> {
        self.converted.map(|r| cross_entropy_error(if r { 1.0 } else { 0.0 }, self.predicted))
    }

    fn click_indicator(&self) -> f64 {
        if self.clicked {
            1.0
        } else {
            0.0
        }
    }
}

/// Which |D| the averaged losses divide by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Size of the full user-item universe.
    Population(usize),
    /// Number of samples in the bundle (minibatch surrogate).
    Batch,
}

#[derive(Debug, Clone)]
pub struct SampleBundle {
    samples: Vec<Sample>,
    denominator: Denominator,
}

impl SampleBundle {
    pub fn new(samples: Vec<Sample>, denominator: Denominator) -> Result<Self> {
        for (idx, s) in samples.iter().enumerate() {
            if !(s.propensity > 0.0 && s.propensity <= 1.0) {
                return Err(Error::validation(format!("sample {idx}: propensity {} outside (0, 1]", s.propensity)));
            }
            if !s.imputed_error.is_finite() || s.imputed_error < 0.0 {
                return Err(Error::validation(format!(
                    "sample {idx}: imputed error {} must be finite and nonnegative",
                    s.imputed_error
                )));
            }
            if s.clicked != s.converted.is_some() {
                return Err(Error::validation(format!(
                    "sample {idx}: conversion label must be present exactly on clicked samples"
                )));
            }
        }
        if let Denominator::Population(0) = denominator {
            return Err(Error::validation("population denominator must be positive"));
        }
        Ok(SampleBundle { samples, denominator })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// |D| used by the averaged losses.
    pub fn denominator(&self) -> f64 {
        match self.denominator {
            Denominator::Population(n) => n as f64,
            Denominator::Batch => self.samples.len().max(1) as f64,
        }
    }

    fn clicked(&self) -> impl Iterator<Item = (&Sample, f64)> {
        self.samples.iter().filter_map(|s| s.error().map(|e| (s, e)))
    }
}

/// Cross entropy between a (possibly soft) label and a prediction clipped
/// into `[PROB_EPS, 1 - PROB_EPS]`.
pub fn cross_entropy_error(label: f64, predicted: f64) -> f64 {
    let p = predicted.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -label * p.ln() - (1.0 - label) * (1.0 - p).ln()
}

/// `max(floor, p)`.
pub fn clip_propensity(p: f64, floor: f64) -> f64 {
    p.max(floor)
}

/// Mean error over clicked samples.
pub fn loss_naive(bundle: &SampleBundle) -> Result<f64> {
    let (sum, count) = bundle.clicked().fold((0.0, 0usize), |(s, n), (_, e)| (s + e, n + 1));
    if count == 0 {
        return Err(Error::validation("naive loss needs at least one clicked sample"));
    }
    Ok(sum / count as f64)
}

/// Error-imputation loss: observed errors on clicked, imputed elsewhere.
pub fn loss_eib(bundle: &SampleBundle) -> f64 {
    let sum: f64 = bundle
        .samples
        .iter()
        .map(|s| match s.error() {
            Some(e) => e,
            None => s.imputed_error,
        })
        .sum();
    sum / bundle.denominator()
}

/// Inverse-propensity-scored loss.
pub fn loss_ips(bundle: &SampleBundle) -> f64 {
    let sum: f64 = bundle.clicked().map(|(s, e)| e / s.propensity).sum();
    sum / bundle.denominator()
}

/// Unnormalised doubly robust sum `Σ [ê + o (e - ê) / p̂]`.
pub fn dr_sum(bundle: &SampleBundle) -> f64 {
    bundle
        .samples
        .iter()
        .map(|s| {
            let correction = match s.error() {
                Some(e) => s.click_indicator() * (e - s.imputed_error) / s.propensity,
                None => 0.0,
            };
            s.imputed_error + correction
        })
        .sum()
}

/// Doubly robust loss `|D|⁻¹ Σ [ê + o (e - ê) / p̂]`.
pub fn loss_dr(bundle: &SampleBundle) -> f64 {
    dr_sum(bundle) / bundle.denominator()
}

/// Click-through cross entropy summed over the bundle, using the
/// propensity field as the predicted CTR and the click flag as label.
pub fn loss_ctr(bundle: &SampleBundle) -> f64 {
    bundle.samples.iter().map(|s| cross_entropy_error(s.click_indicator(), s.propensity)).sum()
}

/// Joint CTR + CVR objective: unnormalised DR sum plus CTR loss.
pub fn loss_ctcvr(bundle: &SampleBundle) -> f64 {
    dr_sum(bundle) + loss_ctr(bundle)
}

/// Loss used to fit the error-imputation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputationLoss {
    /// Unweighted squared deviation on clicked events (used by EIB).
    Plain,
    DrJl,
    Mrdr,
    DrBias,
    /// λ·DR-BIAS + (1-λ)·MRDR with a per-sample λ.
    DrMse,
}

/// MRDR weight `(1 - p̂) / p̂`.
pub fn mrdr_weight(p_hat: f64) -> f64 {
    (1.0 - p_hat) / p_hat
}

/// DR-BIAS weight `(1 - p̂)² / p̂²`, the square of the MRDR weight.
pub fn drbias_weight(p_hat: f64) -> f64 {
    let w = mrdr_weight(p_hat);
    w * w
}

/// Coefficient `c` such that a clicked sample contributes `c · (ê - e)²`.
///
/// `lambda` is only read for [`ImputationLoss::DrMse`].
pub fn imputation_coefficient(kind: ImputationLoss, p_hat: f64, lambda: f64) -> f64 {
    let inv = 1.0 / p_hat;
    match kind {
        ImputationLoss::Plain => 1.0,
        ImputationLoss::DrJl => inv,
        ImputationLoss::Mrdr => inv * mrdr_weight(p_hat),
        ImputationLoss::DrBias => inv * drbias_weight(p_hat),
        ImputationLoss::DrMse => inv * (lambda * drbias_weight(p_hat) + (1.0 - lambda) * mrdr_weight(p_hat)),
    }
}

fn imputation_sum(bundle: &SampleBundle, kind: ImputationLoss, lambdas: Option<&[f64]>) -> f64 {
    bundle
        .samples
        .iter()
        .enumerate()
        .filter_map(|(idx, s)| {
            let e = s.error()?;
            let lambda = lambdas.map_or(0.0, |l| l[idx]);
            let d = s.imputed_error - e;
            Some(imputation_coefficient(kind, s.propensity, lambda) * d * d)
        })
        .sum()
}

/// `Σ o (ê - e)² / p̂`.
pub fn imp_loss_drjl(bundle: &SampleBundle) -> f64 {
    imputation_sum(bundle, ImputationLoss::DrJl, None)
}

/// `Σ o (ê - e)² / p̂ · (1 - p̂) / p̂`.
pub fn imp_loss_mrdr(bundle: &SampleBundle) -> f64 {
    imputation_sum(bundle, ImputationLoss::Mrdr, None)
}

/// `Σ o (ê - e)² / p̂ · (o - p̂)² / p̂²`.
pub fn imp_loss_drbias(bundle: &SampleBundle) -> f64 {
    imputation_sum(bundle, ImputationLoss::DrBias, None)
}

/// Per-sample convex combination of the DR-BIAS and MRDR terms.
pub fn imp_loss_drmse(bundle: &SampleBundle, lambdas: &[f64]) -> Result<f64> {
    if lambdas.len() != bundle.len() {
        return Err(Error::validation(format!("expected {} lambda values, got {}", bundle.len(), lambdas.len())));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::validation(format!("lambda {bad} outside [0, 1]")));
    }
    Ok(imputation_sum(bundle, ImputationLoss::DrMse, Some(lambdas)))
}

/// Dispatch on [`ImputationLoss`]; `lambdas` is required for DR-MSE.
pub fn imputation_loss(bundle: &SampleBundle, kind: ImputationLoss, lambdas: Option<&[f64]>) -> Result<f64> {
    match kind {
        ImputationLoss::Plain => Ok(imputation_sum(bundle, kind, None)),
        ImputationLoss::DrJl => Ok(imp_loss_drjl(bundle)),
        ImputationLoss::Mrdr => Ok(imp_loss_mrdr(bundle)),
        ImputationLoss::DrBias => Ok(imp_loss_drbias(bundle)),
        ImputationLoss::DrMse => {
            let lambdas = lambdas.ok_or_else(|| Error::validation("DR-MSE needs per-sample lambda"))?;
            imp_loss_drmse(bundle, lambdas)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn clicked(converted: bool, predicted: f64, imputed: f64, propensity: f64) -> Sample {
        Sample {
            user: 0,
            item: 0,
            clicked: true,
            converted: Some(converted),
            predicted,
            imputed_error: imputed,
            propensity,
        }
    }

    fn unclicked(imputed: f64, propensity: f64) -> Sample {
        Sample { user: 0, item: 1, clicked: false, converted: None, predicted: 0.5, imputed_error: imputed, propensity }
    }

    /// Clicked sample with a positive label whose error equals `e`.
    fn with_error(e: f64, imputed: f64, propensity: f64) -> Sample {
        clicked(true, (-e).exp(), imputed, propensity)
    }

    fn bundle(samples: Vec<Sample>) -> SampleBundle {
        SampleBundle::new(samples, Denominator::Batch).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        assert_abs_diff_eq!(cross_entropy_error(1.0, 1.0 - PROB_EPS), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(cross_entropy_error(1.0, 0.5), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(cross_entropy_error(0.0, 0.9), -(0.1f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(cross_entropy_error(0.0, 0.9), std::f64::consts::LN_10, epsilon = 1e-12);
        // clipping keeps the loss finite
        assert!(cross_entropy_error(1.0, 0.0).is_finite());
    }

    #[test]
    fn naive_examples() {
        assert_abs_diff_eq!(loss_naive(&bundle(vec![with_error(0.4, 0.0, 1.0)])).unwrap(), 0.4, epsilon = 1e-12);
        let b = bundle(vec![with_error(0.2, 0.0, 1.0), with_error(0.6, 0.0, 1.0), unclicked(9.0, 0.1)]);
        assert_abs_diff_eq!(loss_naive(&b).unwrap(), 0.4, epsilon = 1e-12);
        assert!(loss_naive(&bundle(vec![unclicked(1.0, 0.5)])).is_err());
    }

    #[test]
    fn eib_examples() {
        let b = bundle(vec![with_error(0.2, 0.9, 1.0), unclicked(0.6, 0.3)]);
        assert_abs_diff_eq!(loss_eib(&b), 0.4, epsilon = 1e-12);
        let b = bundle(vec![unclicked(0.2, 0.3), unclicked(0.4, 0.3)]);
        assert_abs_diff_eq!(loss_eib(&b), 0.3, epsilon = 1e-12);
        let b = bundle(vec![with_error(0.2, 0.9, 1.0), with_error(0.4, 0.9, 1.0)]);
        assert_abs_diff_eq!(loss_eib(&b), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn ips_examples() {
        let b = bundle(vec![with_error(0.3, 0.0, 0.5)]);
        assert_abs_diff_eq!(loss_ips(&b), 0.6, epsilon = 1e-12);
        let b = bundle(vec![with_error(0.2, 0.0, 1.0), with_error(0.4, 0.0, 1.0)]);
        assert_abs_diff_eq!(loss_ips(&b), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn dr_examples() {
        let b = bundle(vec![unclicked(0.7, 0.2)]);
        assert_abs_diff_eq!(loss_dr(&b), 0.7, epsilon = 1e-12);
        let b = bundle(vec![with_error(0.2, 0.5, 0.5), unclicked(0.4, 0.5)]);
        assert_abs_diff_eq!(loss_dr(&b), 0.15, epsilon = 1e-12);
    }

    #[test]
    fn population_denominator() {
        let b = SampleBundle::new(vec![with_error(0.3, 0.0, 0.5)], Denominator::Population(3)).unwrap();
        assert_abs_diff_eq!(loss_ips(&b), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn imputation_examples() {
        let b = bundle(vec![with_error(0.3, 0.8, 0.5)]);
        assert_abs_diff_eq!(imp_loss_drjl(&b), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(imp_loss_mrdr(&b), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(imp_loss_drbias(&b), 0.5, epsilon = 1e-12);

        let b = bundle(vec![with_error(0.3, 0.8, 0.25)]);
        assert_abs_diff_eq!(imp_loss_mrdr(&b), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(imp_loss_drbias(&b), 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(imp_loss_drmse(&b, &[0.5]).unwrap(), 6.0, epsilon = 1e-12);

        let b = bundle(vec![with_error(0.3, 0.8, 1.0)]);
        assert_eq!(imp_loss_mrdr(&b), 0.0);
        assert_eq!(imp_loss_drbias(&b), 0.0);

        // unclicked samples contribute nothing
        let b = bundle(vec![unclicked(0.8, 0.1)]);
        assert_eq!(imp_loss_drjl(&b), 0.0);

        let b = bundle(vec![with_error(0.3, 0.3, 0.2)]);
        assert_eq!(imp_loss_drjl(&b), 0.0);
    }

    #[test]
    fn drmse_rejects_bad_lambda() {
        let b = bundle(vec![with_error(0.3, 0.8, 0.25)]);
        assert!(imp_loss_drmse(&b, &[1.5]).is_err());
        assert!(imp_loss_drmse(&b, &[-0.1]).is_err());
        assert!(imp_loss_drmse(&b, &[]).is_err());
    }

    #[test]
    fn ctr_examples() {
        let b = bundle(vec![clicked(true, 0.5, 0.0, 1.0 - PROB_EPS)]);
        assert_abs_diff_eq!(loss_ctr(&b), 0.0, epsilon = 1e-6);
        let b = bundle(vec![clicked(true, 0.5, 0.0, 0.5)]);
        assert_abs_diff_eq!(loss_ctr(&b), std::f64::consts::LN_2, epsilon = 1e-15);
        let b = bundle(vec![unclicked(0.0, 0.5)]);
        assert_abs_diff_eq!(loss_ctr(&b), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn ctcvr_decomposes() {
        let b = bundle(vec![with_error(0.3, 0.8, 0.4), unclicked(0.2, 0.1), unclicked(0.5, 0.7)]);
        let lhs = loss_ctcvr(&b);
        let rhs = loss_dr(&b) * b.denominator() + loss_ctr(&b);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-14);
        // perfect CVR on a certain click
        let b = bundle(vec![clicked(true, 1.0 - PROB_EPS, 0.0, 1.0 - PROB_EPS)]);
        assert_abs_diff_eq!(loss_ctcvr(&b), 0.0, epsilon = 1e-5);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_propensity(0.5, DEFAULT_PROPENSITY_FLOOR), 0.5);
        assert_eq!(clip_propensity(0.001, DEFAULT_PROPENSITY_FLOOR), 0.03);
        assert_eq!(clip_propensity(0.03, DEFAULT_PROPENSITY_FLOOR), 0.03);
    }

    #[test]
    fn bundle_validation() {
        assert!(SampleBundle::new(vec![with_error(0.1, 0.1, 0.0)], Denominator::Batch).is_err());
        assert!(SampleBundle::new(vec![with_error(0.1, -0.1, 0.5)], Denominator::Batch).is_err());
        let mut s = unclicked(0.1, 0.5);
        s.converted = Some(true);
        assert!(SampleBundle::new(vec![s], Denominator::Batch).is_err());
    }

    fn arb_sample() -> impl Strategy<Value = Sample> {
        (any::<bool>(), any::<bool>(), 0.01f64..0.99, 0.0f64..3.0, 0.01f64..1.0).prop_map(
            |(click, conv, pred, imp, prop)| Sample {
                user: 0,
                item: 0,
                clicked: click,
                converted: click.then_some(conv),
                predicted: pred,
                imputed_error: imp,
                propensity: prop,
            },
        )
    }

    proptest! {
        #[test]
        fn dr_equals_ideal_when_imputation_exact(
            samples in prop::collection::vec(arb_sample(), 1..20),
        ) {
            // imputed error equal to the true error on clicked samples; on
            // unclicked samples the "true" error is whatever ê says.
            let samples: Vec<Sample> = samples
                .into_iter()
                .map(|mut s| {
                    if let Some(e) = s.error() {
                        s.imputed_error = e;
                    }
                    s
                })
                .collect();
            let ideal: f64 = samples.iter().map(|s| s.error().unwrap_or(s.imputed_error)).sum::<f64>()
                / samples.len() as f64;
            let b = bundle(samples);
            prop_assert!((loss_dr(&b) - ideal).abs() < 1e-12);
        }

        #[test]
        fn drbias_weight_is_mrdr_squared(p in 0.001f64..1.0) {
            let m = mrdr_weight(p);
            prop_assert_eq!(drbias_weight(p), m * m);
            if p < 0.5 {
                prop_assert!(drbias_weight(p) > m);
            } else if p > 0.5 {
                prop_assert!(drbias_weight(p) < m);
            }
        }

        #[test]
        fn drmse_linear_in_lambda(
            samples in prop::collection::vec(arb_sample(), 1..20),
            lambdas in prop::collection::vec(0.0f64..=1.0, 20),
        ) {
            let b = bundle(samples);
            let lambdas = &lambdas[..b.len()];
            let mixed = imp_loss_drmse(&b, lambdas).unwrap();
            let expected: f64 = b.samples().iter().zip(lambdas).filter_map(|(s, &l)| {
                let e = s.error()?;
                let d = (s.imputed_error - e).powi(2) / s.propensity;
                Some(l * d * drbias_weight(s.propensity) + (1.0 - l) * d * mrdr_weight(s.propensity))
            }).sum();
            prop_assert!((mixed - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
            let zeros = vec![0.0; b.len()];
            let ones = vec![1.0; b.len()];
            prop_assert_eq!(imp_loss_drmse(&b, &zeros).unwrap(), imp_loss_mrdr(&b));
            prop_assert_eq!(imp_loss_drmse(&b, &ones).unwrap(), imp_loss_drbias(&b));
        }

        #[test]
        fn losses_are_permutation_invariant(
            samples in prop::collection::vec(arb_sample(), 1..20),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = samples.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = bundle(samples);
            let b = bundle(shuffled);
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs());
            prop_assert!(close(loss_dr(&a), loss_dr(&b)));
            prop_assert!(close(loss_ips(&a), loss_ips(&b)));
            prop_assert!(close(loss_eib(&a), loss_eib(&b)));
            prop_assert!(close(loss_ctr(&a), loss_ctr(&b)));
            prop_assert!(close(imp_loss_drbias(&a), imp_loss_drbias(&b)));
            prop_assert!(close(imp_loss_mrdr(&a), imp_loss_mrdr(&b)));
        }
    }
}

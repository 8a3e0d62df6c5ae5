//! Bias, variance and generalisation bound of the DR estimator on small,
//! fully specified worlds, with enumeration and simulation oracles.
//!
//! A world is a list of pairs with true click probability `p`, estimated
//! propensity `p̂`, true error `e` and imputed error `ê`. Clicks are
//! independent Bernoulli(p) draws; everything else is fixed.

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, stream_rng_raw, Rng, Stream};

/// Largest world enumerated exactly (2^20 click realisations).
pub const MAX_ENUMERATION_PAIRS: usize = 20;
pub const MIN_MONTE_CARLO_TRIALS: usize = 1000;
const MC_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryPair {
    pub p: f64,
    pub p_hat: f64,
    pub e: f64,
    pub e_hat: f64,
}

/// One candidate prediction matrix: its true errors and imputed errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub errors: Vec<f64>,
    pub imputed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryInstance {
    pub pairs: Vec<TheoryPair>,
    #[serde(default)]
    pub hypotheses: Vec<Hypothesis>,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrMoments {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub value: f64,
    pub bias_term: f64,
    pub variance_term: f64,
    /// Index of the hypothesis maximising `Σ (e - ê)² / p̂²`.
    pub dagger: usize,
}

impl TheoryInstance {
    pub fn new(pairs: Vec<TheoryPair>, eta: f64) -> Result<Self> {
        let instance = TheoryInstance { pairs, hypotheses: Vec::new(), eta };
        instance.validate()?;
        Ok(instance)
    }

    pub fn with_hypotheses(mut self, hypotheses: Vec<Hypothesis>) -> Result<Self> {
        self.hypotheses = hypotheses;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::validation("theory instance needs at least one pair"));
        }
        for (k, q) in self.pairs.iter().enumerate() {
            if !(0.0..=1.0).contains(&q.p) {
                return Err(Error::validation(format!("pair {k}: p = {} outside [0, 1]", q.p)));
            }
            if !(q.p_hat > 0.0 && q.p_hat <= 1.0) {
                return Err(Error::validation(format!("pair {k}: p̂ = {} outside (0, 1]", q.p_hat)));
            }
            if !(q.e >= 0.0 && q.e.is_finite() && q.e_hat >= 0.0 && q.e_hat.is_finite()) {
                return Err(Error::validation(format!("pair {k}: errors must be finite and non-negative")));
            }
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::validation(format!("eta = {} outside (0, 1)", self.eta)));
        }
        let n = self.pairs.len();
        for (h, hyp) in self.hypotheses.iter().enumerate() {
            if hyp.errors.len() != n || hyp.imputed.len() != n {
                return Err(Error::validation(format!("hypothesis {h} does not cover all {n} pairs")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `|D|⁻¹ Σ e`.
    pub fn ideal_loss(&self) -> f64 {
        self.pairs.iter().map(|q| q.e).sum::<f64>() / self.len() as f64
    }

    /// DR loss for one click realisation.
    pub fn dr_loss(&self, clicks: &[bool]) -> f64 {
        let sum: f64 = self.pairs.iter().zip(clicks).map(|(q, &o)| dr_term(q.e, q.e_hat, q.p_hat, o)).sum();
        sum / self.len() as f64
    }

    /// DR loss of hypothesis `h` for one click realisation.
    pub fn hypothesis_dr_loss(&self, h: usize, clicks: &[bool]) -> f64 {
        let hyp = &self.hypotheses[h];
        let sum: f64 =
            (0..self.len()).map(|k| dr_term(hyp.errors[k], hyp.imputed[k], self.pairs[k].p_hat, clicks[k])).sum();
        sum / self.len() as f64
    }
}

fn dr_term(e: f64, e_hat: f64, p_hat: f64, clicked: bool) -> f64 {
    if clicked {
        e_hat + (e - e_hat) / p_hat
    } else {
        e_hat
    }
}

/// `|D|⁻¹ |Σ (p - p̂)(e - ê) / p̂|`.
pub fn bias_closed_form(instance: &TheoryInstance) -> f64 {
    let sum: f64 = instance.pairs.iter().map(|q| (q.p - q.p_hat) * (q.e - q.e_hat) / q.p_hat).sum();
    sum.abs() / instance.len() as f64
}

/// `|D|⁻² Σ p (1 - p) (ê - e)² / p̂²`.
pub fn variance_closed_form(instance: &TheoryInstance) -> f64 {
    let sum: f64 =
        instance.pairs.iter().map(|q| q.p * (1.0 - q.p) * (q.e_hat - q.e).powi(2) / (q.p_hat * q.p_hat)).sum();
    let n = instance.len() as f64;
    sum / (n * n)
}

/// Exact mean and variance of the DR loss over all 2^|D| click
/// realisations.
pub fn enumerate_dr_distribution(instance: &TheoryInstance) -> Result<DrMoments> {
    let n = instance.len();
    if n > MAX_ENUMERATION_PAIRS {
        return Err(Error::Enumeration(format!(
            "{n} pairs exceed the enumeration limit of {MAX_ENUMERATION_PAIRS}; use monte_carlo_dr instead"
        )));
    }
    let outcomes: Vec<(f64, f64)> = (0u32..1 << n)
        .map(|mask| {
            let clicks: Vec<bool> = (0..n).map(|k| mask >> k & 1 == 1).collect();
            let prob: f64 = instance.pairs.iter().zip(&clicks).map(|(q, &o)| if o { q.p } else { 1.0 - q.p }).product();
            (prob, instance.dr_loss(&clicks))
        })
        .filter(|&(prob, _)| prob > 0.0)
        .collect();
    let mean: f64 = outcomes.iter().map(|(prob, l)| prob * l).sum();
    let variance: f64 = outcomes.iter().map(|(prob, l)| prob * (l - mean).powi(2)).sum();
    Ok(DrMoments { mean, variance })
}

fn sample_clicks(instance: &TheoryInstance, rng: &mut Rng, out: &mut Vec<bool>) {
    out.clear();
    out.extend(instance.pairs.iter().map(|q| rng.random::<f64>() < q.p));
}

/// Sample moments of the DR loss over simulated click realisations.
/// Chunks run in parallel on derived streams and are merged in order.
pub fn monte_carlo_dr(instance: &TheoryInstance, trials: usize, seed: u64) -> Result<MonteCarloEstimate> {
    if trials < MIN_MONTE_CARLO_TRIALS {
        return Err(Error::validation(format!(
            "monte carlo needs at least {MIN_MONTE_CARLO_TRIALS} trials, got {trials}"
        )));
    }
    let chunks = trials.div_ceil(MC_CHUNK);
    let per_chunk: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng_raw(seed, ((Stream::MonteCarlo as u64) << 32) | c as u64);
            let count = MC_CHUNK.min(trials - c * MC_CHUNK);
            let mut clicks = Vec::with_capacity(instance.len());
            (0..count)
                .map(|_| {
                    sample_clicks(instance, &mut rng, &mut clicks);
                    instance.dr_loss(&clicks)
                })
                .collect()
        })
        .collect();
    let values: Vec<f64> = per_chunk.into_iter().flatten().collect();
    let n = values.len() as f64;
    let mean = if values.iter().all(|&v| v == values[0]) { values[0] } else { values.iter().sum::<f64>() / n };
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let variance = m2 * n / (n - 1.0);
    Ok(MonteCarloEstimate {
        mean,
        variance,
        mean_se: (variance / n).sqrt(),
        variance_se: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        trials,
    })
}

/// Right-hand side of the generalisation bound for the hypothesis `chosen`
/// whose empirical DR loss is `dr_value`. Ties in the arg max are broken by
/// the lowest index.
pub fn generalization_bound(instance: &TheoryInstance, chosen: usize, dr_value: f64) -> Result<Bound> {
    if instance.hypotheses.is_empty() {
        return Err(Error::validation("generalization bound needs a non-empty hypothesis set"));
    }
    let hyp = instance.hypotheses.get(chosen).ok_or(Error::IndexOutOfRange {
        what: "hypotheses",
        index: chosen,
        size: instance.hypotheses.len(),
    })?;
    let n = instance.len() as f64;
    let bias_term = instance
        .pairs
        .iter()
        .enumerate()
        .map(|(k, q)| (q.p - q.p_hat).abs() / q.p_hat * (hyp.errors[k] - hyp.imputed[k]).abs())
        .sum::<f64>()
        / n;
    let spread = |h: &Hypothesis| -> f64 {
        instance.pairs.iter().enumerate().map(|(k, q)| ((h.errors[k] - h.imputed[k]) / q.p_hat).powi(2)).sum()
    };
    let (dagger, dagger_spread) = instance
        .hypotheses
        .iter()
        .map(spread)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (h, s)| if s > best.1 { (h, s) } else { best });
    let h_count = instance.hypotheses.len() as f64;
    let variance_term = ((2.0 * h_count / instance.eta).ln() / (2.0 * n * n) * dagger_spread).sqrt();
    Ok(Bound { value: dr_value + bias_term + variance_term, bias_term, variance_term, dagger })
}

/// `2 exp(-2 ε² / Σ (M - m)²)`.
pub fn hoeffding_tail(ranges: &[(f64, f64)], epsilon: f64) -> f64 {
    if epsilon == 0.0 {
        return 2.0;
    }
    let width: f64 = ranges.iter().map(|(m, big_m)| (big_m - m).powi(2)).sum();
    2.0 * (-2.0 * epsilon * epsilon / width).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub hits: usize,
    pub trials: usize,
}

impl Coverage {
    pub fn frequency(&self) -> f64 {
        self.hits as f64 / self.trials as f64
    }
}

/// Simulates click realisations; in each, selects the hypothesis with the
/// smallest empirical DR loss and checks that its ideal loss is below the
/// bound.
pub fn bound_coverage(instance: &TheoryInstance, trials: usize, seed: u64) -> Result<Coverage> {
    if instance.hypotheses.is_empty() {
        return Err(Error::validation("coverage needs a non-empty hypothesis set"));
    }
    let mut rng = stream_rng(seed, Stream::MonteCarlo);
    let mut clicks = Vec::with_capacity(instance.len());
    let n = instance.len() as f64;
    let mut hits = 0;
    for _ in 0..trials {
        sample_clicks(instance, &mut rng, &mut clicks);
        let (chosen, dr_value) = (0..instance.hypotheses.len())
            .map(|h| (h, instance.hypothesis_dr_loss(h, &clicks)))
            .fold((0, f64::INFINITY), |best, (h, l)| if l < best.1 { (h, l) } else { best });
        let ideal = instance.hypotheses[chosen].errors.iter().sum::<f64>() / n;
        if ideal <= generalization_bound(instance, chosen, dr_value)?.value {
            hits += 1;
        }
    }
    Ok(Coverage { hits, trials })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailCheck {
    pub epsilon: f64,
    pub empirical: f64,
    pub bound: f64,
}

/// Empirical frequency of `|mean(o) - mean(p)| > ε` for independent
/// Bernoulli(p) draws, next to the Hoeffding bound for the mean.
pub fn hoeffding_simulation(probs: &[f64], epsilons: &[f64], trials: usize, seed: u64) -> Vec<TailCheck> {
    let n = probs.len() as f64;
    let expected: f64 = probs.iter().sum::<f64>() / n;
    let mut rng = stream_rng(seed, Stream::Theory);
    let deviations: Vec<f64> = (0..trials)
        .map(|_| {
            let hits = probs.iter().filter(|&&p| rng.random::<f64>() < p).count();
            (hits as f64 / n - expected).abs()
        })
        .collect();
    let ranges = vec![(0.0, 1.0); probs.len()];
    epsilons
        .iter()
        .map(|&epsilon| TailCheck {
            epsilon,
            empirical: deviations.iter().filter(|&&d| d > epsilon).count() as f64 / trials as f64,
            bound: hoeffding_tail(&ranges, epsilon * n),
        })
        .collect()
}

/// Random world with `n` pairs: `p ~ U(0.05, 1)`, `p̂` a perturbation of
/// `p` clipped into `[0.05, 1]`, `e ~ U(0, 2)` and `ê = e + N(0, 0.5)`
/// clipped at zero. `num_hypotheses` candidate error vectors are drawn the
/// same way; the first one reuses the pair errors.
pub fn random_instance(n: usize, num_hypotheses: usize, eta: f64, rng: &mut Rng) -> Result<TheoryInstance> {
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut draw = |lo: f64, hi: f64| lo + (hi - lo) * unit.sample(rng);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let p = draw(0.05, 1.0);
        let p_hat = (p + draw(-0.3, 0.3)).clamp(0.05, 1.0);
        let e = draw(0.0, 2.0);
        let e_hat = (e + draw(-1.0, 1.0)).max(0.0);
        pairs.push(TheoryPair { p, p_hat, e, e_hat });
    }
    let mut hypotheses = Vec::with_capacity(num_hypotheses);
    for h in 0..num_hypotheses {
        if h == 0 {
            hypotheses.push(Hypothesis {
                errors: pairs.iter().map(|q| q.e).collect(),
                imputed: pairs.iter().map(|q| q.e_hat).collect(),
            });
            continue;
        }
        let errors: Vec<f64> = (0..n).map(|_| draw(0.0, 2.0)).collect();
        let imputed = errors.iter().map(|&e| (e + draw(-1.0, 1.0)).max(0.0)).collect();
        hypotheses.push(Hypothesis { errors, imputed });
    }
    TheoryInstance::new(pairs, eta)?.with_hypotheses(hypotheses)
}

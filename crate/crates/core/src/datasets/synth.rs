//! Semi-synthetic worlds with a known click and conversion process.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::mf::{DenseMatrix, MfConfig};
use super::{split_clicks, DatasetKind, Event, InteractionDataset, LabeledPair};
use crate::error::{Error, Result};
use crate::models::fm::sigmoid;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Click skew: p_ctr = Ô^ρ.
    pub rho: f64,
    /// Relevance offset: p_cvr = σ(R̂ - ε).
    pub epsilon: f64,
    pub seed: u64,
    pub mf_rank: usize,
    pub mf_epochs: usize,
    pub test_items_per_user: usize,
    pub rating_learning_rate: f64,
    pub logistic_learning_rate: f64,
    pub logistic_epochs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rho: 1.0,
            epsilon: 5.0,
            seed: 0,
            mf_rank: 8,
            mf_epochs: 30,
            test_items_per_user: 50,
            rating_learning_rate: 0.01,
            logistic_learning_rate: 0.05,
            logistic_epochs: 10,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::validation(format!("rho must be positive, got {}", self.rho)));
        }
        if !self.epsilon.is_finite() {
            return Err(Error::validation("epsilon must be finite"));
        }
        if self.test_items_per_user == 0 {
            return Err(Error::validation("test_items_per_user must be at least 1"));
        }
        Ok(())
    }

    pub fn rating_mf(&self) -> MfConfig {
        MfConfig {
            rank: self.mf_rank,
            epochs: self.mf_epochs,
            learning_rate: self.rating_learning_rate,
            ..MfConfig::default()
        }
    }

    pub fn logistic_mf(&self) -> MfConfig {
        MfConfig {
            rank: self.mf_rank,
            epochs: self.logistic_epochs,
            learning_rate: self.logistic_learning_rate,
            ..MfConfig::default()
        }
    }
}

/// True click and conversion probabilities for every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthWorld {
    pub p_ctr: DenseMatrix,
    pub p_cvr: DenseMatrix,
}

pub fn p_cvr_from_rating(r_hat: f64, epsilon: f64) -> f64 {
    sigmoid(r_hat - epsilon)
}

pub fn p_ctr_from_observation(o_hat: f64, rho: f64) -> f64 {
    o_hat.powf(rho)
}

/// Samples clicks and conversions for every pair, splits the clicked events
/// 90/10 and draws the per-user test set from unclicked pairs.
pub fn generate_semisynthetic(
    r_hat: &DenseMatrix,
    o_hat: &DenseMatrix,
    cfg: &SynthConfig,
) -> Result<(GroundTruthWorld, InteractionDataset)> {
    cfg.validate()?;
    if (r_hat.rows, r_hat.cols) != (o_hat.rows, o_hat.cols) {
        return Err(Error::validation(format!(
            "rating matrix is {}x{} but observation matrix is {}x{}",
            r_hat.rows, r_hat.cols, o_hat.rows, o_hat.cols
        )));
    }
    if let Some(bad) = o_hat.data.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::validation(format!("observation probability {bad} outside [0, 1]")));
    }
    let (users, items) = (r_hat.rows, r_hat.cols);
    let world = GroundTruthWorld {
        p_ctr: DenseMatrix {
            rows: users,
            cols: items,
            data: o_hat.data.iter().map(|&o| p_ctr_from_observation(o, cfg.rho)).collect(),
        },
        p_cvr: DenseMatrix {
            rows: users,
            cols: items,
            data: r_hat.data.iter().map(|&r| p_cvr_from_rating(r, cfg.epsilon)).collect(),
        },
    };
    let mut click_rng = stream_rng(cfg.seed, Stream::Clicks);
    let mut conv_rng = stream_rng(cfg.seed, Stream::Conversions);
    let clicked: Vec<bool> = world.p_ctr.data.iter().map(|&p| click_rng.random::<f64>() < p).collect();
    let converted: Vec<bool> = world.p_cvr.data.iter().map(|&p| conv_rng.random::<f64>() < p).collect();
    let events: Vec<Event> = (0..users * items)
        .filter(|&k| clicked[k])
        .map(|k| Event { user: k / items, item: k % items, converted: converted[k] })
        .collect();
    let (train, validation) = split_clicks(events, cfg.seed);
    let mut test_rng = stream_rng(cfg.seed, Stream::TestSampling);
    let mut test = Vec::with_capacity(users * cfg.test_items_per_user);
    for u in 0..users {
        let unclicked: Vec<usize> = (0..items).filter(|&i| !clicked[u * items + i]).collect();
        let take = cfg.test_items_per_user.min(unclicked.len());
        let mut chosen: Vec<usize> =
            sample(&mut test_rng, unclicked.len(), take).into_iter().map(|j| unclicked[j]).collect();
        chosen.sort_unstable();
        test.extend(chosen.into_iter().map(|i| LabeledPair { user: u, item: i, label: converted[u * items + i] }));
    }
    let dataset = InteractionDataset::new(DatasetKind::SemiSynthetic, users, items, train, validation, test)?;
    Ok((world, dataset))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(users: usize, items: usize, r: f64, o: f64) -> (DenseMatrix, DenseMatrix) {
        (DenseMatrix::filled(users, items, r), DenseMatrix::filled(users, items, o))
    }

    #[test]
    fn probability_maps() {
        assert_eq!(p_cvr_from_rating(5.0, 5.0), 0.5);
        assert_eq!(p_ctr_from_observation(0.37, 1.0), 0.37);
        assert_eq!(p_ctr_from_observation(0.5, 2.0), 0.25);
    }

    #[test]
    fn rejects_non_positive_rho() {
        let (r, o) = world(2, 2, 3.0, 0.5);
        for rho in [0.0, -1.0, f64::NAN] {
            let cfg = SynthConfig { rho, ..Default::default() };
            assert!(matches!(generate_semisynthetic(&r, &o, &cfg), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn test_items_are_unclicked_and_distinct() {
        let (r, o) = world(30, 80, 4.0, 0.5);
        let cfg = SynthConfig { rho: 1.0, seed: 3, ..Default::default() };
        let (w, ds) = generate_semisynthetic(&r, &o, &cfg).unwrap();
        assert!(w.p_cvr.data.iter().all(|&p| (p - sigmoid(-1.0)).abs() < 1e-15));
        let mut seen = std::collections::HashSet::new();
        for p in ds.test() {
            assert!(!ds.is_clicked(p.user, p.item));
            assert!(seen.insert((p.user, p.item)));
        }
        let per_user = ds.test().iter().filter(|p| p.user == 0).count();
        let unclicked = (0..80).filter(|&i| !ds.is_clicked(0, i)).count();
        assert_eq!(per_user, unclicked.min(50));
        let n = ds.num_clicked() as f64;
        assert_eq!(ds.validation().len(), (n * 0.1).round() as usize);
    }

    #[test]
    fn same_seed_same_dataset() {
        let (r, o) = world(10, 20, 4.5, 0.3);
        let cfg = SynthConfig { rho: 2.0, seed: 11, ..Default::default() };
        let (_, a) = generate_semisynthetic(&r, &o, &cfg).unwrap();
        let (_, b) = generate_semisynthetic(&r, &o, &cfg).unwrap();
        assert_eq!(a.train(), b.train());
        assert_eq!(a.validation(), b.validation());
        assert_eq!(a.test(), b.test());
    }

    #[test]
    fn users_with_few_unclicked_items_take_all() {
        let (r, o) = world(3, 10, 4.0, 0.999);
        let cfg = SynthConfig { rho: 1.0, seed: 1, test_items_per_user: 50, ..Default::default() };
        let (_, ds) = generate_semisynthetic(&r, &o, &cfg).unwrap();
        for u in 0..3 {
            let unclicked = (0..10).filter(|&i| !ds.is_clicked(u, i)).count();
            assert_eq!(ds.test().iter().filter(|p| p.user == u).count(), unclicked);
        }
    }
}

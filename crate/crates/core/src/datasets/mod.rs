//! Interaction datasets: loading explicit ratings, binarisation into
//! click/conversion events, and semi-synthetic generation.

pub mod dump;
pub mod mf;
pub mod ratings;
pub mod synth;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub use dump::{read_dump, write_dump, Manifest};
pub use mf::{fit_logistic_mf, fit_rating_mf, DenseMatrix, MfConfig, MfFit};
pub use ratings::{
    binarize_mnar, load_explicit_ratings, load_rating_pair, mar_test_pairs, restrict_test_users, Rating, RatingFormat,
    RatingTable,
};
pub use synth::{generate_semisynthetic, GroundTruthWorld, SynthConfig};

/// Share of clicked events held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Whether the test split is a sampled semi-synthetic set (evaluated with
/// AUC / log-loss) or a missing-at-random rating set (ranking metrics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Real,
    SemiSynthetic,
}

/// A clicked event with its observed conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub user: usize,
    pub item: usize,
    pub converted: bool,
}

/// A test pair with its relevance label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabeledPair {
    pub user: usize,
    pub item: usize,
    pub label: bool,
}

#[derive(Debug, Clone)]
pub struct InteractionDataset {
    kind: DatasetKind,
    num_users: usize,
    num_items: usize,
    train: Vec<Event>,
    validation: Vec<Event>,
    test: Vec<LabeledPair>,
    clicked: HashSet<(usize, usize)>,
}

impl InteractionDataset {
    /// Validates the split invariants: ids in range, no pair clicked twice,
    /// train and validation disjoint.
    pub fn new(
        kind: DatasetKind,
        num_users: usize,
        num_items: usize,
        train: Vec<Event>,
        validation: Vec<Event>,
        test: Vec<LabeledPair>,
    ) -> Result<Self> {
        let check = |user: usize, item: usize| -> Result<()> {
            if user >= num_users {
                return Err(Error::IndexOutOfRange { what: "users", index: user, size: num_users });
            }
            if item >= num_items {
                return Err(Error::IndexOutOfRange { what: "items", index: item, size: num_items });
            }
            Ok(())
        };
        let mut clicked = HashSet::with_capacity(train.len() + validation.len());
        for e in train.iter().chain(&validation) {
            check(e.user, e.item)?;
            if !clicked.insert((e.user, e.item)) {
                return Err(Error::validation(format!(
                    "pair ({}, {}) appears in more than one clicked event",
                    e.user, e.item
                )));
            }
        }
        for p in &test {
            check(p.user, p.item)?;
        }
        Ok(InteractionDataset { kind, num_users, num_items, train, validation, test, clicked })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_pairs(&self) -> usize {
        self.num_users * self.num_items
    }

    /// Size of the FM feature space (one-hot user ⊕ one-hot item).
    pub fn num_features(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn features(&self, user: usize, item: usize) -> [usize; 2] {
        [user, self.num_users + item]
    }

    pub fn train(&self) -> &[Event] {
        &self.train
    }

    pub fn validation(&self) -> &[Event] {
        &self.validation
    }

    pub fn test(&self) -> &[LabeledPair] {
        &self.test
    }

    pub fn num_clicked(&self) -> usize {
        self.clicked.len()
    }

    /// o_{u,i}: whether the pair is a clicked event in either split.
    pub fn is_clicked(&self, user: usize, item: usize) -> bool {
        self.clicked.contains(&(user, item))
    }

    pub fn with_test(mut self, test: Vec<LabeledPair>) -> Result<Self> {
        if let Some(p) = test.iter().find(|p| p.user >= self.num_users || p.item >= self.num_items) {
            return Err(Error::validation(format!(
                "test pair ({}, {}) outside the {}x{} universe",
                p.user, p.item, self.num_users, self.num_items
            )));
        }
        self.test = test;
        Ok(self)
    }

    /// All clicked events (train then validation).
    pub fn clicked_events(&self) -> impl Iterator<Item = &Event> {
        self.train.iter().chain(&self.validation)
    }
}

/// Splits clicked events 90/10 into train/validation. The input is sorted
/// first so the result depends only on the event set and the seed.
pub fn split_clicks(mut events: Vec<Event>, seed: u64) -> (Vec<Event>, Vec<Event>) {
    events.sort_unstable();
    events.shuffle(&mut stream_rng(seed, Stream::Split));
    let n_val = (events.len() as f64 * VALIDATION_FRACTION).round() as usize;
    let validation = events.split_off(events.len() - n_val);
    (events, validation)
}

//! Ranking and probabilistic metrics, aggregation over seeds and paired
//! significance tests.
//!
//! Rankings sort by descending score and break ties by ascending item id.
//! DCG is unnormalised and Recall@K defaults to the hit count in the top K.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::estimators::cross_entropy_error;
use crate::models::fm::sigmoid;

/// One user's candidate items in ranked order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: usize,
    /// `(item, relevant)` from best to worst.
    pub items: Vec<(usize, bool)>,
}

/// Groups `(user, item, score, label)` rows per user and ranks them.
pub fn rank_by_user(rows: impl IntoIterator<Item = (usize, usize, f64, bool)>) -> Result<Vec<RankedList>> {
    let mut per_user: BTreeMap<usize, Vec<(usize, f64, bool)>> = BTreeMap::new();
    for (user, item, score, label) in rows {
        if !score.is_finite() {
            return Err(Error::validation(format!("non-finite score for user {user}, item {item}")));
        }
        per_user.entry(user).or_default().push((item, score, label));
    }
    per_user
        .into_iter()
        .map(|(user, mut rows)| {
            rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            if rows.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::validation(format!("duplicate item in the list of user {user}")));
            }
            Ok(RankedList { user, items: rows.into_iter().map(|(item, _, label)| (item, label)).collect() })
        })
        .collect()
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::validation("cutoff K must be at least 1"));
    }
    Ok(())
}

fn mean_over_users(lists: &[RankedList], per_user: impl Fn(&RankedList) -> f64) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::validation("no users to evaluate"));
    }
    Ok(lists.iter().map(per_user).sum::<f64>() / lists.len() as f64)
}

/// `Σ_{k ≤ K} rel_k / log₂(k + 1)`, averaged over users.
pub fn dcg_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    check_k(k)?;
    mean_over_users(lists, |list| {
        list.items
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, (_, rel))| *rel)
            .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
            .sum()
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// Number of relevant items in the top K.
    #[default]
    HitCount,
    /// Hits divided by the user's number of relevant items.
    Classic,
}

pub fn recall_at_k(lists: &[RankedList], k: usize, mode: RecallMode) -> Result<f64> {
    check_k(k)?;
    mean_over_users(lists, |list| {
        let hits = list.items.iter().take(k).filter(|(_, rel)| *rel).count() as f64;
        match mode {
            RecallMode::HitCount => hits,
            RecallMode::Classic => {
                let relevant = list.items.iter().filter(|(_, rel)| *rel).count();
                if relevant == 0 {
                    0.0
                } else {
                    hits / relevant as f64
                }
            }
        }
    })
}

/// Area under the ROC curve by rank sum; tied scores share their average
/// rank, so a tied positive/negative pair counts one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::validation("scores and labels differ in length"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::validation("AUC is undefined when only one class is present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their mean
        let rank = (start + 1 + end) as f64 / 2.0;
        positive_rank_sum += rank * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let p = positives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean cross entropy of `sigmoid(logit)` against the labels.
pub fn log_loss(logits: &[f64], labels: &[bool]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::validation("log-loss needs equally long, non-empty inputs"));
    }
    let total: f64 =
        logits.iter().zip(labels).map(|(&z, &y)| cross_entropy_error(if y { 1.0 } else { 0.0 }, sigmoid(z))).sum();
    Ok(total / logits.len() as f64)
}

/// Two-sided paired t-test p-value.
///
/// With zero variance of the differences the statistic is undefined: the
/// p-value is 1 when all differences are zero and 0 otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation("paired samples differ in length"));
    }
    if a.len() < 2 {
        return Err(Error::validation("paired t-test needs at least two pairs"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 || diffs.iter().all(|&d| d == diffs[0]) {
        return Ok(if diffs[0] == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::validation(e.to_string()))?;
    Ok(2.0 * dist.cdf(-t.abs()))
}

/// Mean, sample standard deviation and raw per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl Aggregate {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / n };
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Aggregate { mean, std, per_seed: values }
    }
}

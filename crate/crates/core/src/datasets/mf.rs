//! Matrix factorisation fits used to build the semi-synthetic ground truth.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ratings::RatingTable;
use crate::error::{Error, Result};
use crate::models::fm::sigmoid;
use crate::rng::{stream_rng, Rng, Stream};

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfConfig {
    pub rank: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub init_std: f64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig { rank: 8, epochs: 30, learning_rate: 0.01, l2: 1e-5, init_std: 0.01 }
    }
}

impl MfConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.l2 >= 0.0 && self.init_std >= 0.0) {
            return Err(Error::validation("MF learning rate must be positive, l2 and init_std non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MfFit {
    pub matrix: DenseMatrix,
    /// Training loss after each epoch (RMSE for ratings, mean logistic loss
    /// for observations).
    pub epoch_loss: Vec<f64>,
}

/// Global bias + user/item biases + rank-k factors.
struct BiasedMf {
    global: f64,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
    rank: usize,
}

impl BiasedMf {
    fn new(users: usize, items: usize, global: f64, cfg: &MfConfig, rng: &mut Rng) -> Result<Self> {
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::validation(e.to_string()))?;
        let mut draw = |n: usize| (0..n).map(|_| normal.sample(rng)).collect::<Vec<f64>>();
        Ok(BiasedMf {
            global,
            user_bias: vec![0.0; users],
            item_bias: vec![0.0; items],
            user_factors: draw(users * cfg.rank),
            item_factors: draw(items * cfg.rank),
            rank: cfg.rank,
        })
    }

    fn predict(&self, u: usize, i: usize) -> f64 {
        let k = self.rank;
        let dot: f64 = self.user_factors[u * k..(u + 1) * k]
            .iter()
            .zip(&self.item_factors[i * k..(i + 1) * k])
            .map(|(a, b)| a * b)
            .sum();
        self.global + self.user_bias[u] + self.item_bias[i] + dot
    }

    /// One SGD step on a residual `grad = ∂loss/∂prediction`.
    fn update(&mut self, u: usize, i: usize, grad: f64, lr: f64, l2: f64, fit_global: bool) {
        if fit_global {
            self.global -= lr * grad;
        }
        self.user_bias[u] -= lr * (grad + l2 * self.user_bias[u]);
        self.item_bias[i] -= lr * (grad + l2 * self.item_bias[i]);
        let k = self.rank;
        for d in 0..k {
            let pu = self.user_factors[u * k + d];
            let qi = self.item_factors[i * k + d];
            self.user_factors[u * k + d] -= lr * (grad * qi + l2 * pu);
            self.item_factors[i * k + d] -= lr * (grad * pu + l2 * qi);
        }
    }

    fn to_matrix(&self, map: impl Fn(f64) -> f64) -> DenseMatrix {
        let (rows, cols) = (self.user_bias.len(), self.item_bias.len());
        let mut data = Vec::with_capacity(rows * cols);
        for u in 0..rows {
            for i in 0..cols {
                data.push(map(self.predict(u, i)));
            }
        }
        DenseMatrix { rows, cols, data }
    }
}

fn diverged(what: &str, epoch: usize, loss: f64) -> Error {
    Error::Divergence(format!("{what} loss became {loss} at epoch {epoch}; try a smaller learning rate"))
}

/// Squared-error MF; the global mean is fixed to the mean training rating.
pub fn fit_rating_mf(table: &RatingTable, cfg: &MfConfig, seed: u64) -> Result<MfFit> {
    cfg.validate()?;
    if table.ratings.is_empty() {
        return Err(Error::validation("rating MF needs at least one rating"));
    }
    let mut rng = stream_rng(seed, Stream::RatingMf);
    let n = table.ratings.len() as f64;
    let mean = table.ratings.iter().map(|r| r.rating as f64).sum::<f64>() / n;
    let mut model = BiasedMf::new(table.num_users, table.num_items, mean, cfg, &mut rng)?;
    let mut order: Vec<usize> = (0..table.ratings.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let r = table.ratings[k];
            let grad = model.predict(r.user, r.item) - r.rating as f64;
            model.update(r.user, r.item, grad, cfg.learning_rate, cfg.l2, false);
        }
        let sse: f64 = table.ratings.iter().map(|r| (model.predict(r.user, r.item) - r.rating as f64).powi(2)).sum();
        let rmse = (sse / n).sqrt();
        if !rmse.is_finite() {
            return Err(diverged("rating MF", epoch, rmse));
        }
        epoch_loss.push(rmse);
    }
    Ok(MfFit { matrix: model.to_matrix(|x| x), epoch_loss })
}

/// Logistic MF over every user-item pair with label "observed".
pub fn fit_logistic_mf(
    num_users: usize,
    num_items: usize,
    observed: &[(usize, usize)],
    cfg: &MfConfig,
    seed: u64,
) -> Result<MfFit> {
    cfg.validate()?;
    let pairs = num_users * num_items;
    if pairs == 0 {
        return Err(Error::validation("logistic MF needs a non-empty universe"));
    }
    let mut label = vec![false; pairs];
    for &(u, i) in observed {
        if u >= num_users || i >= num_items {
            return Err(Error::IndexOutOfRange { what: "observation matrix", index: u * num_items + i, size: pairs });
        }
        label[u * num_items + i] = true;
    }
    let mut rng = stream_rng(seed, Stream::LogisticMf);
    let mut model = BiasedMf::new(num_users, num_items, 0.0, cfg, &mut rng)?;
    let mut order: Vec<usize> = (0..pairs).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let (u, i) = (k / num_items, k % num_items);
            let y = if label[k] { 1.0 } else { 0.0 };
            let grad = sigmoid(model.predict(u, i)) - y;
            model.update(u, i, grad, cfg.learning_rate, cfg.l2, true);
        }
        let total: f64 = (0..pairs)
            .map(|k| {
                let p = sigmoid(model.predict(k / num_items, k % num_items));
                let y = if label[k] { 1.0 } else { 0.0 };
                crate::estimators::cross_entropy_error(y, p)
            })
            .sum();
        let loss = total / pairs as f64;
        if !loss.is_finite() {
            return Err(diverged("logistic MF", epoch, loss));
        }
        epoch_loss.push(loss);
    }
    Ok(MfFit { matrix: model.to_matrix(sigmoid), epoch_loss })
}

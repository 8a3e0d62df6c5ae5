//! Second-order factorization machine over sparse binary features.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Parameters are stored flat as `[bias | linear (n) | factors (n × rank)]`
/// so optimizers and checkpoints can treat them as one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationMachine {
    num_features: usize,
    rank: usize,
    params: Vec<f64>,
}

impl FactorizationMachine {
    pub fn zeros(num_features: usize, rank: usize) -> Self {
        FactorizationMachine { num_features, rank, params: vec![0.0; 1 + num_features * (1 + rank)] }
    }

    /// Gaussian(0, `init_std`) factors, zero bias and linear terms.
    pub fn init(num_features: usize, rank: usize, init_std: f64, rng: &mut Rng) -> Self {
        let mut fm = Self::zeros(num_features, rank);
        let normal = Normal::new(0.0, init_std).expect("init std must be finite and >= 0");
        let start = fm.factor_offset(0);
        for p in &mut fm.params[start..] {
            *p = normal.sample(rng);
        }
        fm
    }

    pub fn from_params(num_features: usize, rank: usize, params: Vec<f64>) -> Result<Self> {
        let expected = 1 + num_features * (1 + rank);
        if params.len() != expected {
            return Err(Error::validation(format!(
                "factorization machine with {num_features} features and rank {rank} needs {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(FactorizationMachine { num_features, rank, params })
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub const BIAS: usize = 0;

    #[inline]
    pub fn linear_offset(&self, feature: usize) -> usize {
        1 + feature
    }

    #[inline]
    pub fn factor_offset(&self, feature: usize) -> usize {
        1 + self.num_features + feature * self.rank
    }

    pub fn bias(&self) -> f64 {
        self.params[Self::BIAS]
    }

    pub fn linear(&self, feature: usize) -> f64 {
        self.params[self.linear_offset(feature)]
    }

    pub fn factors(&self, feature: usize) -> &[f64] {
        let start = self.factor_offset(feature);
        &self.params[start..start + self.rank]
    }

    fn check(&self, features: &[usize]) -> Result<()> {
        match features.iter().find(|&&f| f >= self.num_features) {
            Some(&index) => Err(Error::IndexOutOfRange { what: "feature space", index, size: self.num_features }),
            None => Ok(()),
        }
    }

    /// Logit `b + Σ w_a + Σ_{a<b} <v_a, v_b>` over the active features.
    pub fn score(&self, features: &[usize]) -> Result<f64> {
        self.check(features)?;
        Ok(self.score_unchecked(features))
    }

    pub fn score_unchecked(&self, features: &[usize]) -> f64 {
        let mut logit = self.bias();
        for &f in features {
            logit += self.linear(f);
        }
        if self.rank > 0 {
            // Σ_{a<b} <v_a, v_b> = ½ (|Σ v|² - Σ |v|²), evaluated per factor
            let mut pairwise = 0.0;
            for k in 0..self.rank {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for &f in features {
                    let v = self.params[self.factor_offset(f) + k];
                    sum += v;
                    sum_sq += v * v;
                }
                pairwise += sum * sum - sum_sq;
            }
            logit += 0.5 * pairwise;
        }
        logit
    }

    /// Adds `upstream · ∂logit/∂params` into `grad` (dense, same layout as
    /// the parameters).
    pub fn accumulate_gradient(&self, features: &[usize], upstream: f64, grad: &mut [f64]) -> Result<()> {
        self.check(features)?;
        if grad.len() != self.params.len() {
            return Err(Error::validation("gradient buffer does not match parameter count"));
        }
        self.accumulate_gradient_unchecked(features, upstream, grad);
        Ok(())
    }

    pub fn accumulate_gradient_unchecked(&self, features: &[usize], upstream: f64, grad: &mut [f64]) {
        if upstream == 0.0 {
            return;
        }
        grad[Self::BIAS] += upstream;
        for &f in features {
            grad[self.linear_offset(f)] += upstream;
        }
        for k in 0..self.rank {
            let sum: f64 = features.iter().map(|&f| self.params[self.factor_offset(f) + k]).sum();
            for &f in features {
                let idx = self.factor_offset(f) + k;
                grad[idx] += upstream * (sum - self.params[idx]);
            }
        }
    }

    /// Directional derivative `⟨∂logit/∂params, direction⟩` without
    /// materialising the gradient.
    pub fn gradient_dot_unchecked(&self, features: &[usize], direction: &[f64]) -> f64 {
        let mut out = direction[Self::BIAS];
        for &f in features {
            out += direction[self.linear_offset(f)];
        }
        for k in 0..self.rank {
            let sum: f64 = features.iter().map(|&f| self.params[self.factor_offset(f) + k]).sum();
            for &f in features {
                let idx = self.factor_offset(f) + k;
                out += (sum - self.params[idx]) * direction[idx];
            }
        }
        out
    }

    /// Indices of all parameters touched by `features`.
    pub fn touched(&self, features: &[usize], out: &mut Vec<usize>) {
        out.push(Self::BIAS);
        for &f in features {
            out.push(self.linear_offset(f));
            let start = self.factor_offset(f);
            out.extend(start..start + self.rank);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.params.iter().fold(0.0f64, |m, p| m.max(p.abs()))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

//! Adaptive-moment (Adam) and plain SGD updates over flat parameter blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig { learning_rate, ..Default::default() }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate, ..Default::default() }
    }
}

/// Optimizer state for one named parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    block: String,
    config: OptimizerConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Optimizer {
    pub fn new(block: impl Into<String>, config: OptimizerConfig, num_params: usize) -> Self {
        let moments = match config.kind {
            OptimizerKind::Adam => num_params,
            OptimizerKind::Sgd => 0,
        };
        Optimizer {
            block: block.into(),
            config,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
            step: 0,
        }
    }

    pub fn block(&self) -> &str {
        &self.block
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Applies one update in place. Fails without touching `params` if any
    /// gradient entry is not finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::validation(format!(
                "block `{}`: {} parameters but {} gradients",
                self.block,
                params.len(),
                grads.len()
            )));
        }
        if let Some(offset) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { block: self.block.clone(), offset });
        }
        self.step += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= c.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::validation(format!(
                        "block `{}`: optimizer sized for {} parameters, got {}",
                        self.block,
                        self.first_moment.len(),
                        params.len()
                    )));
                }
                let t = self.step as i32;
                let correction1 = 1.0 - c.beta1.powi(t);
                let correction2 = 1.0 - c.beta2.powi(t);
                for (((p, g), m), v) in
                    params.iter_mut().zip(grads).zip(self.first_moment.iter_mut()).zip(self.second_moment.iter_mut())
                {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / correction1;
                    let v_hat = *v / correction2;
                    *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        for config in [OptimizerConfig::adam(0.1), OptimizerConfig::sgd(0.1)] {
            let mut opt = Optimizer::new("test", config, 3);
            let mut p = vec![1.0, -2.0, 3.0];
            opt.step(&mut p, &[0.0; 3]).unwrap();
            assert_eq!(p, vec![1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new("test", OptimizerConfig::sgd(0.1), 1);
        let mut p = vec![1.0];
        opt.step(&mut p, &[0.5]).unwrap();
        assert_abs_diff_eq!(p[0], 0.95, epsilon = 1e-15);
    }

    #[test]
    fn adam_without_moment_decay_is_normalised_sgd() {
        let config = OptimizerConfig { beta1: 0.0, beta2: 0.0, ..OptimizerConfig::adam(0.1) };
        let mut opt = Optimizer::new("test", config, 1);
        let mut p = vec![1.0];
        opt.step(&mut p, &[0.5]).unwrap();
        // p - η g / (|g| + ε)
        assert_abs_diff_eq!(p[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut opt = Optimizer::new("test", OptimizerConfig::adam(0.01), 2);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.2]).unwrap();
        assert_abs_diff_eq!(p[0], -0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], 0.01, epsilon = 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut opt = Optimizer::new("imputation", OptimizerConfig::adam(0.1), 2);
        let mut p = vec![1.0, 1.0];
        let err = opt.step(&mut p, &[0.0, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("imputation"));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn long_run_moments_stay_finite() {
        let mut opt = Optimizer::new("soak", OptimizerConfig::adam(1e-3), 4);
        let mut p = vec![0.0; 4];
        let mut prev = 0;
        for t in 0..10_000u64 {
            let g: Vec<f64> = (0..4).map(|k| ((t * 7 + k) as f64 * 0.37).sin() * 5.0).collect();
            opt.step(&mut p, &g).unwrap();
            assert!(opt.steps() > prev);
            prev = opt.steps();
        }
        let (m, v) = opt.moments();
        assert!(m.iter().chain(v).chain(&p).all(|x| x.is_finite()));
        assert!(v.iter().all(|&x| x <= 25.0));
    }
}

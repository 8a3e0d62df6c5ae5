//! Per-sample bias/variance trade-off network λ(x) ∈ (0, 1).
//!
//! User and item ids are looked up in embedding tables private to this
//! network, concatenated, passed through one tanh hidden layer and squashed
//! by a sigmoid. The output pre-activation is clamped to ±30 so λ never
//! reaches 0 or 1 exactly.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::fm::sigmoid;
use crate::rng::Rng;

pub const DEFAULT_EMBED_DIM: usize = 8;
pub const DEFAULT_HIDDEN: usize = 16;
const OUTPUT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaShape {
    pub num_users: usize,
    pub num_items: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl LambdaShape {
    pub fn new(num_users: usize, num_items: usize) -> Self {
        LambdaShape { num_users, num_items, embed_dim: DEFAULT_EMBED_DIM, hidden: DEFAULT_HIDDEN }
    }

    fn input_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn num_params(&self) -> usize {
        (self.num_users + self.num_items) * self.embed_dim + self.hidden * self.input_dim() + 2 * self.hidden + 1
    }

    fn user_emb(&self) -> usize {
        0
    }

    fn item_emb(&self) -> usize {
        self.num_users * self.embed_dim
    }

    fn w1(&self) -> usize {
        (self.num_users + self.num_items) * self.embed_dim
    }

    fn b1(&self) -> usize {
        self.w1() + self.hidden * self.input_dim()
    }

    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }

    fn b2(&self) -> usize {
        self.w2() + self.hidden
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaNetwork {
    shape: LambdaShape,
    params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
struct Activations {
    input: Vec<f64>,
    hidden: Vec<f64>,
    pre_output: f64,
    output: f64,
}

impl LambdaNetwork {
    /// Embeddings ~ N(0, `embed_std`), hidden weights ~ N(0, 1/√fan_in),
    /// zero hidden bias, zero output weights and an output bias chosen so
    /// that every initial λ equals `initial_lambda`.
    pub fn init(shape: LambdaShape, embed_std: f64, initial_lambda: f64, rng: &mut Rng) -> Result<Self> {
        if !(initial_lambda > 0.0 && initial_lambda < 1.0) {
            return Err(Error::validation(format!("initial lambda {initial_lambda} must lie strictly inside (0, 1)")));
        }
        let mut params = vec![0.0; shape.num_params()];
        let emb = Normal::new(0.0, embed_std).map_err(|e| Error::validation(e.to_string()))?;
        for p in &mut params[..shape.w1()] {
            *p = emb.sample(rng);
        }
        let hidden = Normal::new(0.0, 1.0 / (shape.input_dim() as f64).sqrt()).expect("positive std");
        for p in &mut params[shape.w1()..shape.b1()] {
            *p = hidden.sample(rng);
        }
        params[shape.b2()] = (initial_lambda / (1.0 - initial_lambda)).ln();
        Ok(LambdaNetwork { shape, params })
    }

    pub fn from_params(shape: LambdaShape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.num_params() {
            return Err(Error::validation(format!(
                "lambda network expects {} parameters, got {}",
                shape.num_params(),
                params.len()
            )));
        }
        Ok(LambdaNetwork { shape, params })
    }

    pub fn shape(&self) -> &LambdaShape {
        &self.shape
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

    /// Sets the output layer to zero so that λ = σ(0) = 0.5 everywhere.
    pub fn zero_output_layer(&mut self) {
        let (w2, b2) = (self.shape.w2(), self.shape.b2());
        for p in &mut self.params[w2..=b2] {
            *p = 0.0;
        }
    }

    fn check(&self, user: usize, item: usize) -> Result<()> {
        if user >= self.shape.num_users {
            return Err(Error::IndexOutOfRange { what: "users", index: user, size: self.shape.num_users });
        }
        if item >= self.shape.num_items {
            return Err(Error::IndexOutOfRange { what: "items", index: item, size: self.shape.num_items });
        }
        Ok(())
    }

    fn activations(&self, user: usize, item: usize) -> Activations {
        let s = &self.shape;
        let e = s.embed_dim;
        let mut input = Vec::with_capacity(2 * e);
        let u0 = s.user_emb() + user * e;
        let i0 = s.item_emb() + item * e;
        input.extend_from_slice(&self.params[u0..u0 + e]);
        input.extend_from_slice(&self.params[i0..i0 + e]);
        let d = s.input_dim();
        let mut hidden = Vec::with_capacity(s.hidden);
        for h in 0..s.hidden {
            let row = s.w1() + h * d;
            let z: f64 =
                self.params[row..row + d].iter().zip(&input).map(|(w, x)| w * x).sum::<f64>() + self.params[s.b1() + h];
            hidden.push(z.tanh());
        }
        let pre_output: f64 =
            self.params[s.w2()..s.w2() + s.hidden].iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
                + self.params[s.b2()];
        let output = sigmoid(pre_output.clamp(-OUTPUT_CLAMP, OUTPUT_CLAMP));
        Activations { input, hidden, pre_output, output }
    }

    pub fn forward(&self, user: usize, item: usize) -> Result<f64> {
        self.check(user, item)?;
        Ok(self.activations(user, item).output)
    }

    /// λ for an id pair known to be in range.
    pub fn forward_unchecked(&self, user: usize, item: usize) -> f64 {
        self.activations(user, item).output
    }

    /// Adds `upstream · ∂λ/∂params` into `grad`.
    pub fn accumulate_gradient(&self, user: usize, item: usize, upstream: f64, grad: &mut [f64]) -> Result<()> {
        self.check(user, item)?;
        if grad.len() != self.params.len() {
            return Err(Error::validation("gradient buffer does not match parameter count"));
        }
        if upstream == 0.0 {
            return Ok(());
        }
        let s = &self.shape;
        let act = self.activations(user, item);
        if act.pre_output.abs() >= OUTPUT_CLAMP {
            return Ok(());
        }
        let d_out = upstream * act.output * (1.0 - act.output);
        grad[s.b2()] += d_out;
        let d = s.input_dim();
        let mut d_input = vec![0.0; d];
        for h in 0..s.hidden {
            grad[s.w2() + h] += d_out * act.hidden[h];
            let d_z = d_out * self.params[s.w2() + h] * (1.0 - act.hidden[h] * act.hidden[h]);
            if d_z == 0.0 {
                continue;
            }
            grad[s.b1() + h] += d_z;
            let row = s.w1() + h * d;
            for j in 0..d {
                grad[row + j] += d_z * act.input[j];
                d_input[j] += d_z * self.params[row + j];
            }
        }
        let e = s.embed_dim;
        let u0 = s.user_emb() + user * e;
        let i0 = s.item_emb() + item * e;
        for j in 0..e {
            grad[u0 + j] += d_input[j];
            grad[i0 + j] += d_input[e + j];
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

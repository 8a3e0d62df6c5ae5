//! Alternating joint learning, the tri-level loop and propensity
//! pretraining.
//!
//! A round is one imputation step on a clicked chunk followed by one
//! prediction step on the chunk plus sampled unclicked events. Joint learning
//! runs one round per chunk; tri-level training interleaves a λ-network
//! update before every `inner_steps` rounds.

use rand::Rng as _;
use serde::Serialize;

use crate::datasets::{DatasetKind, InteractionDataset};
use crate::error::{Error, Result};
use crate::evaluation::{auc, dcg_at_k, rank_by_user};
use crate::models::{
    sigmoid, Checkpoint, FactorizationMachine, LambdaNetwork, LambdaShape, ModelBundle, Optimizer, OptimizerConfig,
    OptimizerKind,
};
use crate::rng::{stream_rng, Rng, Stream};

use super::batches::{clicked_pair, epoch_chunks, full_batch, sample_clicked};
use super::config::{Estimator, PropensityMode, TrainConfig, ValidationMetric};
use super::heads::{click_gradient, imputation_gradient, prediction_gradient, Heads, Pair, PredictionLoss};
use super::hyper::{hypergradient, lambdas, MetaBatch, MetaModels};

/// Where the per-event λ of the DR-MSE imputation loss comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSource {
    /// The estimator has no λ.
    None,
    Fixed(f64),
    /// Evaluated from the current λ network.
    Network,
}

/// Losses of one round, each as optimised (before L2).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RoundLosses {
    pub imputation: f64,
    pub prediction: f64,
    /// Mean λ over the clicked chunk, when λ exists.
    pub mean_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rounds: usize,
    pub outer_steps: usize,
    pub imputation_loss: f64,
    pub prediction_loss: f64,
    pub upper_loss: Option<f64>,
    pub mean_lambda: Option<f64>,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: ModelBundle,
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) whose models were kept; 0 means the initial models.
    pub best_epoch: usize,
    pub best_validation: Option<f64>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// Checkpoint of the kept models. The header records only what is needed
    /// to use them, so estimators that train identical models produce
    /// identical bytes.
    pub fn checkpoint(&self, config: &TrainConfig, seed: u64) -> Checkpoint {
        Checkpoint {
            seed,
            hyperparameters: serde_json::json!({
                "rank": config.rank,
                "imputation_head": config.imputation_head,
                "propensity_floor": config.propensity.floor,
            }),
            models: self.models.clone(),
        }
    }
}

/// All mutable state of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cvr: FactorizationMachine,
    pub ctr: Option<FactorizationMachine>,
    pub imputation: Option<FactorizationMachine>,
    pub lambda: Option<LambdaNetwork>,
    cvr_opt: Optimizer,
    ctr_opt: Option<Optimizer>,
    imputation_opt: Option<Optimizer>,
    lambda_opt: Option<Optimizer>,
    pub rounds: usize,
    pub outer_steps: usize,
}

impl TrainState {
    pub fn bundle(&self) -> ModelBundle {
        ModelBundle {
            cvr: self.cvr.clone(),
            ctr: self.ctr.clone(),
            imputation: self.imputation.clone(),
            lambda: self.lambda.clone(),
        }
    }

    fn max_abs_param(&self) -> f64 {
        let mut m = self.cvr.max_abs();
        for fm in self.ctr.iter().chain(self.imputation.iter()) {
            m = m.max(fm.max_abs());
        }
        if let Some(net) = &self.lambda {
            m = net.params().iter().fold(m, |acc, p| acc.max(p.abs()));
        }
        m
    }

    fn is_finite(&self) -> bool {
        self.cvr.is_finite()
            && self.ctr.as_ref().is_none_or(FactorizationMachine::is_finite)
            && self.imputation.as_ref().is_none_or(FactorizationMachine::is_finite)
            && self.lambda.as_ref().is_none_or(LambdaNetwork::is_finite)
    }
}

fn optimizer_config(config: &TrainConfig, learning_rate: f64) -> OptimizerConfig {
    match config.optimizer {
        OptimizerKind::Adam => OptimizerConfig::adam(learning_rate),
        OptimizerKind::Sgd => OptimizerConfig::sgd(learning_rate),
    }
}

fn add_l2(grad: &mut [f64], params: &[f64], l2: f64) {
    if l2 > 0.0 {
        for (g, p) in grad.iter_mut().zip(params) {
            *g += l2 * p;
        }
    }
}

/// Fits the CTR model on uniformly drawn user-item pairs labelled by whether
/// they were clicked. Runs `epochs × ⌈pairs / batch⌉` Adam steps.
pub fn pretrain_propensity(
    dataset: &InteractionDataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<FactorizationMachine> {
    let pc = &config.propensity;
    let mut init_rng = stream_rng(seed, Stream::CtrInit);
    let mut model = FactorizationMachine::init(dataset.num_features(), config.rank, config.init_std, &mut init_rng);
    let mut opt = Optimizer::new("ctr", OptimizerConfig::adam(pc.learning_rate), model.num_params());
    let mut rng = stream_rng(seed, Stream::PropensityBatches);
    let steps = pc.epochs * dataset.num_pairs().div_ceil(pc.batch_size);
    let scale = 1.0 / pc.batch_size as f64;
    let mut batch = Vec::with_capacity(pc.batch_size);
    let mut grad = vec![0.0; model.num_params()];
    for step in 0..steps {
        batch.clear();
        for _ in 0..pc.batch_size {
            let user = rng.random_range(0..dataset.num_users());
            let item = rng.random_range(0..dataset.num_items());
            let converted = dataset.is_clicked(user, item).then_some(false);
            batch.push(Pair { user, item, converted });
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = click_gradient(&model, dataset.num_users(), &batch, scale, &mut grad);
        add_l2(&mut grad, model.params(), config.l2);
        opt.step(model.params_mut(), &grad)?;
        if !loss.is_finite() || !model.is_finite() {
            return Err(Error::Divergence(format!(
                "propensity pretraining step {step}: loss {loss}, max |param| {}",
                model.max_abs()
            )));
        }
    }
    Ok(model)
}

/// Clipped propensities `max(floor, σ(z))` for the given pairs.
pub fn propensities(ctr: &FactorizationMachine, num_users: usize, pairs: &[(usize, usize)], floor: f64) -> Vec<f64> {
    pairs.iter().map(|&(u, i)| sigmoid(ctr.score_unchecked(&[u, num_users + i])).max(floor)).collect()
}

/// Validation score of a CVR model, or `None` when undefined.
pub fn validation_score(
    dataset: &InteractionDataset,
    cvr: &FactorizationMachine,
    config: &TrainConfig,
) -> Result<Option<f64>> {
    let events = dataset.validation();
    if events.is_empty() {
        return Ok(None);
    }
    let metric = match (config.validation_metric, dataset.kind()) {
        (ValidationMetric::Auto, DatasetKind::SemiSynthetic) | (ValidationMetric::Auc, _) => ValidationMetric::Auc,
        _ => ValidationMetric::Dcg,
    };
    let scores: Vec<f64> = events.iter().map(|e| cvr.score_unchecked(&dataset.features(e.user, e.item))).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Divergence("non-finite validation score".into()));
    }
    match metric {
        ValidationMetric::Auc => {
            let labels: Vec<bool> = events.iter().map(|e| e.converted).collect();
            Ok(auc(&scores, &labels).ok())
        }
        _ => {
            let rows = events.iter().zip(&scores).map(|(e, &s)| (e.user, e.item, s, e.converted));
            Ok(Some(dcg_at_k(&rank_by_user(rows)?, config.dcg_k)?))
        }
    }
}

/// Drives one training run.
pub struct Trainer<'a> {
    dataset: &'a InteractionDataset,
    config: &'a TrainConfig,
    state: TrainState,
    loss: PredictionLoss,
    batch_rng: Rng,
    meta_rng: Rng,
}

impl<'a> Trainer<'a> {
    /// Initialises all models; pretrains the CTR model when the estimator
    /// weights by propensity and the mode is `pretrained`.
    pub fn new(dataset: &'a InteractionDataset, config: &'a TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if dataset.train().is_empty() {
            return Err(Error::validation("training split holds no clicked events"));
        }
        let n = dataset.num_features();
        let estimator = config.estimator;
        let cvr = FactorizationMachine::init(n, config.rank, config.init_std, &mut stream_rng(seed, Stream::CvrInit));
        let cvr_opt = Optimizer::new("cvr", optimizer_config(config, config.learning_rate), cvr.num_params());

        let ctr = if estimator.needs_propensity() {
            Some(match config.propensity.mode {
                PropensityMode::Pretrained => pretrain_propensity(dataset, config, seed)?,
                PropensityMode::Joint => {
                    FactorizationMachine::init(n, config.rank, config.init_std, &mut stream_rng(seed, Stream::CtrInit))
                }
            })
        } else {
            None
        };
        let ctr_opt = match (&ctr, config.propensity.mode) {
            (Some(m), PropensityMode::Joint) => {
                Some(Optimizer::new("ctr", optimizer_config(config, config.learning_rate), m.num_params()))
            }
            _ => None,
        };

        let imputation = estimator.imputation_loss().map(|_| {
            FactorizationMachine::init(n, config.rank, config.init_std, &mut stream_rng(seed, Stream::ImputationInit))
        });
        let imputation_opt = imputation
            .as_ref()
            .map(|m| Optimizer::new("imputation", optimizer_config(config, config.learning_rate), m.num_params()));

        let lambda = if estimator == Estimator::DrMseTrilevel {
            let shape = LambdaShape {
                num_users: dataset.num_users(),
                num_items: dataset.num_items(),
                embed_dim: config.lambda.embed_dim,
                hidden: config.lambda.hidden,
            };
            Some(LambdaNetwork::init(
                shape,
                config.lambda.embed_std,
                config.lambda.init,
                &mut stream_rng(seed, Stream::LambdaInit),
            )?)
        } else {
            None
        };
        let lambda_opt = lambda.as_ref().map(|net| {
            Optimizer::new("lambda", optimizer_config(config, config.lambda.learning_rate), net.num_params())
        });

        Ok(Trainer {
            dataset,
            config,
            state: TrainState {
                cvr,
                ctr,
                imputation,
                lambda,
                cvr_opt,
                ctr_opt,
                imputation_opt,
                lambda_opt,
                rounds: 0,
                outer_steps: 0,
            },
            loss: PredictionLoss::for_estimator(estimator),
            batch_rng: stream_rng(seed, Stream::TrainBatches),
            meta_rng: stream_rng(seed, Stream::MetaBatches),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    fn lambda_source(&self) -> LambdaSource {
        match self.config.estimator {
            Estimator::DrMse => LambdaSource::Fixed(self.config.lambda.fixed),
            Estimator::DrMseTrilevel => LambdaSource::Network,
            _ => LambdaSource::None,
        }
    }

    fn heads(&self) -> Heads<'_> {
        Heads {
            cvr: &self.state.cvr,
            ctr: self.state.ctr.as_ref(),
            imputation: self.state.imputation.as_ref(),
            num_users: self.dataset.num_users(),
            head: self.config.imputation_head,
            floor: self.config.propensity.floor,
        }
    }

    fn divergence(&self, what: &str, losses: &[(&str, f64)]) -> Error {
        let losses: Vec<String> = losses.iter().map(|(n, v)| format!("{n} {v}")).collect();
        Error::Divergence(format!(
            "{what} at round {}, outer step {}: {}; max |param| {}",
            self.state.rounds,
            self.state.outer_steps,
            losses.join(", "),
            self.state.max_abs_param()
        ))
    }

    /// One imputation step on `clicked` and one prediction step on `clicked`
    /// plus sampled unclicked events.
    pub fn round(&mut self, clicked: &[Pair]) -> Result<RoundLosses> {
        let cfg = self.config;
        let mut out = RoundLosses::default();

        if let Some(kind) = cfg.estimator.imputation_loss() {
            let lambda: Option<Vec<f64>> = match self.lambda_source() {
                LambdaSource::None => None,
                LambdaSource::Fixed(v) => Some(vec![v; clicked.len()]),
                LambdaSource::Network => {
                    let net = self.state.lambda.as_ref().expect("trilevel run without λ network");
                    Some(lambdas(net, clicked))
                }
            };
            out.mean_lambda = lambda.as_ref().filter(|l| !l.is_empty()).map(|l| l.iter().sum::<f64>() / l.len() as f64);
            let scale = if cfg.normalize_imputation { 1.0 / clicked.len().max(1) as f64 } else { 1.0 };
            let theta = self.state.imputation.as_ref().expect("imputation model");
            let mut grad = vec![0.0; theta.num_params()];
            out.imputation = imputation_gradient(&self.heads(), clicked, kind, lambda.as_deref(), scale, &mut grad);
            add_l2(&mut grad, theta.params(), cfg.l2);
            let state = &mut self.state;
            let theta = state.imputation.as_mut().expect("imputation model");
            state.imputation_opt.as_mut().expect("imputation optimizer").step(theta.params_mut(), &grad)?;
        }

        let batch = if self.loss.uses_unclicked() {
            full_batch(self.dataset, clicked.to_vec(), cfg.sample_ratio, &mut self.batch_rng)?
        } else {
            clicked.to_vec()
        };
        let scale = match self.loss {
            PredictionLoss::Ctcvr => 1.0,
            _ => 1.0 / batch.len().max(1) as f64,
        };
        let mut g_cvr = vec![0.0; self.state.cvr.num_params()];
        let mut g_ctr = self.state.ctr_opt.as_ref().map(|_| vec![0.0; self.state.ctr.as_ref().unwrap().num_params()]);
        out.prediction = prediction_gradient(&self.heads(), self.loss, &batch, scale, &mut g_cvr, g_ctr.as_deref_mut());
        add_l2(&mut g_cvr, self.state.cvr.params(), cfg.l2);
        let state = &mut self.state;
        state.cvr_opt.step(state.cvr.params_mut(), &g_cvr)?;
        if let (Some(mut g), Some(ctr), Some(opt)) = (g_ctr, state.ctr.as_mut(), state.ctr_opt.as_mut()) {
            add_l2(&mut g, ctr.params(), cfg.l2);
            opt.step(ctr.params_mut(), &g)?;
        }
        state.rounds += 1;

        if !out.imputation.is_finite() || !out.prediction.is_finite() || !self.state.is_finite() {
            return Err(self.divergence(
                "non-finite training state",
                &[("imputation", out.imputation), ("prediction", out.prediction)],
            ));
        }
        Ok(out)
    }

    /// Models and step size seen by the hypergradient.
    pub fn meta_models(&self) -> Result<MetaModels<'_>> {
        let (Some(ctr), Some(imputation)) = (self.state.ctr.as_ref(), self.state.imputation.as_ref()) else {
            return Err(Error::validation("tri-level training needs CTR and imputation models"));
        };
        Ok(MetaModels {
            cvr: &self.state.cvr,
            ctr,
            imputation,
            num_users: self.dataset.num_users(),
            head: self.config.imputation_head,
            floor: self.config.propensity.floor,
            joint: self.config.propensity.mode == PropensityMode::Joint,
            eta: self.config.meta.pseudo_learning_rate,
        })
    }

    /// Draws the lower, upper and full batches of the next outer step.
    pub fn sample_meta_batch(&mut self) -> Result<MetaBatch> {
        let size = self.config.meta.batch_size;
        let train = self.dataset.train();
        let lower = sample_clicked(train, size, &mut self.meta_rng);
        let upper = sample_clicked(train, size, &mut self.meta_rng);
        let clicked = sample_clicked(train, size, &mut self.meta_rng);
        let full = full_batch(self.dataset, clicked, self.config.sample_ratio, &mut self.meta_rng)?;
        Ok(MetaBatch { lower, upper, full })
    }

    /// One λ-network update from the one-step lookahead hypergradient.
    /// Returns the upper loss.
    pub fn outer_step(&mut self) -> Result<f64> {
        let batch = self.sample_meta_batch()?;
        let net = self
            .state
            .lambda
            .as_ref()
            .ok_or_else(|| Error::validation("outer steps need the drmse-trilevel estimator"))?;
        let hyper = hypergradient(&self.meta_models()?, net, &batch)?;
        let state = &mut self.state;
        let net = state.lambda.as_mut().expect("λ network");
        state.lambda_opt.as_mut().expect("λ optimizer").step(net.params_mut(), &hyper.grad_xi)?;
        state.outer_steps += 1;
        if !hyper.upper_loss.is_finite() || !self.state.is_finite() {
            return Err(self.divergence("non-finite λ update", &[("upper", hyper.upper_loss)]));
        }
        Ok(hyper.upper_loss)
    }

    /// One pass over the shuffled training events.
    pub fn epoch(&mut self, epoch: usize) -> Result<EpochLog> {
        let dataset = self.dataset;
        let chunks = epoch_chunks(dataset.train().len(), self.config.batch_size, &mut self.batch_rng);
        let trilevel = self.config.estimator == Estimator::DrMseTrilevel;
        let inner = self.config.meta.inner_steps;
        let (rounds0, outer0) = (self.state.rounds, self.state.outer_steps);
        let (mut imp, mut pred, mut upper, mut lam, mut lam_n) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for (idx, chunk) in chunks.iter().enumerate() {
            if trilevel && (inner == 0 || idx % inner == 0) {
                upper += self.outer_step()?;
            }
            if trilevel && inner == 0 {
                continue;
            }
            let clicked: Vec<Pair> = chunk.iter().map(|&i| clicked_pair(&dataset.train()[i])).collect();
            let losses = self.round(&clicked)?;
            imp += losses.imputation;
            pred += losses.prediction;
            if let Some(l) = losses.mean_lambda {
                lam += l;
                lam_n += 1;
            }
        }
        let rounds = self.state.rounds - rounds0;
        let outer_steps = self.state.outer_steps - outer0;
        let per = |v: f64, n: usize| if n == 0 { 0.0 } else { v / n as f64 };
        Ok(EpochLog {
            epoch,
            rounds,
            outer_steps,
            imputation_loss: per(imp, rounds),
            prediction_loss: per(pred, rounds),
            upper_loss: (outer_steps > 0).then(|| upper / outer_steps as f64),
            mean_lambda: (lam_n > 0).then(|| lam / lam_n as f64),
            validation: validation_score(dataset, &self.state.cvr, self.config)?,
        })
    }

    /// Trains until `max_epochs` or until the validation score has not
    /// strictly improved for `patience` epochs; keeps the best models.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let mut best = self.state.bundle();
        let mut best_validation = validation_score(self.dataset, &self.state.cvr, self.config)?;
        let mut best_epoch = 0;
        let mut stale = 0;
        let mut epochs = Vec::new();
        let mut stopped_early = false;
        for epoch in 1..=self.config.max_epochs {
            let log = self.epoch(epoch)?;
            log::debug!(
                "epoch {epoch}: imputation {:.6} prediction {:.6} validation {:?}",
                log.imputation_loss,
                log.prediction_loss,
                log.validation
            );
            let improved = match (log.validation, best_validation) {
                (Some(v), Some(b)) => v > b,
                (Some(_), None) => true,
                (None, _) => true,
            };
            epochs.push(log.clone());
            if improved {
                best = self.state.bundle();
                best_validation = log.validation;
                best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        Ok(TrainOutcome { models: best, epochs, best_epoch, best_validation, stopped_early })
    }
}

/// Alternating joint learning for every estimator except `drmse-trilevel`.
pub fn joint_learn(dataset: &InteractionDataset, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if config.estimator == Estimator::DrMseTrilevel {
        return Err(Error::validation("joint_learn does not train the λ network; use trilevel_train"));
    }
    Trainer::new(dataset, config, seed)?.run()
}

/// Tri-level training of the `drmse-trilevel` estimator.
pub fn trilevel_train(dataset: &InteractionDataset, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if config.estimator != Estimator::DrMseTrilevel {
        return Err(Error::validation(format!("trilevel_train needs drmse-trilevel, not {}", config.estimator)));
    }
    Trainer::new(dataset, config, seed)?.run()
}

/// Trains with the loop that matches the configured estimator.
pub fn train(dataset: &InteractionDataset, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    match config.estimator {
        Estimator::DrMseTrilevel => trilevel_train(dataset, config, seed),
        _ => joint_learn(dataset, config, seed),
    }
}

//! Training configuration.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::estimators::{ImputationLoss, DEFAULT_PROPENSITY_FLOOR};
use crate::models::lambda::{DEFAULT_EMBED_DIM, DEFAULT_HIDDEN};
use crate::models::optim::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "eib")]
    Eib,
    #[serde(rename = "ips")]
    Ips,
    #[serde(rename = "drjl")]
    DrJl,
    #[serde(rename = "mrdr")]
    Mrdr,
    #[serde(rename = "drbias")]
    DrBias,
    #[serde(rename = "drmse")]
    DrMse,
    #[serde(rename = "drmse-trilevel")]
    DrMseTrilevel,
}

impl Estimator {
    pub const ALL: [Estimator; 8] = [
        Estimator::Naive,
        Estimator::Eib,
        Estimator::Ips,
        Estimator::DrJl,
        Estimator::Mrdr,
        Estimator::DrBias,
        Estimator::DrMse,
        Estimator::DrMseTrilevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Naive => "naive",
            Estimator::Eib => "eib",
            Estimator::Ips => "ips",
            Estimator::DrJl => "drjl",
            Estimator::Mrdr => "mrdr",
            Estimator::DrBias => "drbias",
            Estimator::DrMse => "drmse",
            Estimator::DrMseTrilevel => "drmse-trilevel",
        }
    }

    /// Loss of the imputation model, if the estimator has one.
    pub fn imputation_loss(self) -> Option<ImputationLoss> {
        match self {
            Estimator::Naive | Estimator::Ips => None,
            Estimator::Eib => Some(ImputationLoss::Plain),
            Estimator::DrJl => Some(ImputationLoss::DrJl),
            Estimator::Mrdr => Some(ImputationLoss::Mrdr),
            Estimator::DrBias => Some(ImputationLoss::DrBias),
            Estimator::DrMse | Estimator::DrMseTrilevel => Some(ImputationLoss::DrMse),
        }
    }

    /// Whether the estimator weights by estimated propensities.
    pub fn needs_propensity(self) -> bool {
        !matches!(self, Estimator::Naive | Estimator::Eib)
    }

    pub fn is_doubly_robust(self) -> bool {
        matches!(
            self,
            Estimator::DrJl | Estimator::Mrdr | Estimator::DrBias | Estimator::DrMse | Estimator::DrMseTrilevel
        )
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Unclicked events drawn per clicked event in a full-event batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SampleRatio {
    Finite(u32),
    /// As many unclicked events per clicked event as the data holds.
    All,
}

impl SampleRatio {
    pub const ALLOWED: [u32; 5] = [0, 2, 4, 6, 8];
}

impl fmt::Display for SampleRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleRatio::Finite(r) => write!(f, "{r}"),
            SampleRatio::All => f.write_str("all"),
        }
    }
}

impl Serialize for SampleRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SampleRatio::Finite(r) => s.serialize_u32(*r),
            SampleRatio::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for SampleRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(r) if SampleRatio::ALLOWED.contains(&r) => Ok(SampleRatio::Finite(r)),
            Raw::Text(t) if t == "all" => Ok(SampleRatio::All),
            Raw::Num(r) => {
                Err(serde::de::Error::custom(format!("sample ratio {r} not in {:?} or \"all\"", SampleRatio::ALLOWED)))
            }
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unknown sample ratio `{t}`"))),
        }
    }
}

/// How the imputation model produces ê.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputationHead {
    /// The model predicts a soft conversion label r̃ = σ(g);
    /// ê = CE(r̃, r̂) is the expected error of the CVR prediction.
    #[default]
    ImputedLabel,
    /// The model predicts the error directly: ê = softplus(g).
    DirectError,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    /// CTR model fitted once on click labels and frozen.
    #[default]
    Pretrained,
    /// CTR model trained together with the CVR model on the CTCVR loss.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropensityConfig {
    pub mode: PropensityMode,
    pub floor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            mode: PropensityMode::Pretrained,
            floor: DEFAULT_PROPENSITY_FLOOR,
            epochs: 2,
            batch_size: 2048,
            learning_rate: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaConfig {
    /// Constant λ of the `drmse` estimator.
    pub fixed: f64,
    /// Initial λ of the network used by `drmse-trilevel`.
    pub init: f64,
    pub learning_rate: f64,
    pub embed_dim: usize,
    pub hidden: usize,
    pub embed_std: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig {
            fixed: 0.5,
            init: 0.5,
            learning_rate: 1e-3,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden: DEFAULT_HIDDEN,
            embed_std: 0.01,
        }
    }
}

/// Settings of the tri-level outer loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Step size of the unrolled SGD steps.
    pub pseudo_learning_rate: f64,
    pub batch_size: usize,
    /// Real inner steps per outer step.
    pub inner_steps: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig { pseudo_learning_rate: 0.1, batch_size: 1024, inner_steps: 1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    /// AUC for semi-synthetic data, DCG@4 for real data.
    #[default]
    Auto,
    Auc,
    Dcg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub estimator: Estimator,
    /// FM embedding size.
    pub rank: usize,
    pub init_std: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub l2: f64,
    /// Clicked events per batch.
    pub batch_size: usize,
    pub sample_ratio: SampleRatio,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_metric: ValidationMetric,
    pub dcg_k: usize,
    pub imputation_head: ImputationHead,
    /// Divide imputation sums by the batch size.
    pub normalize_imputation: bool,
    pub propensity: PropensityConfig,
    pub lambda: LambdaConfig,
    pub meta: MetaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            estimator: Estimator::DrJl,
            rank: 16,
            init_std: 0.01,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            l2: 1e-5,
            batch_size: 1024,
            sample_ratio: SampleRatio::Finite(4),
            max_epochs: 50,
            patience: 5,
            validation_metric: ValidationMetric::Auto,
            dcg_k: 4,
            imputation_head: ImputationHead::ImputedLabel,
            normalize_imputation: false,
            propensity: PropensityConfig::default(),
            lambda: LambdaConfig::default(),
            meta: MetaConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("propensity.learning_rate", self.propensity.learning_rate)?;
        positive("meta.pseudo_learning_rate", self.meta.pseudo_learning_rate)?;
        if !(self.l2 >= 0.0 && self.init_std >= 0.0 && self.lambda.learning_rate >= 0.0) {
            return Err(Error::validation("l2, init_std and lambda.learning_rate must be non-negative"));
        }
        if self.batch_size == 0 || self.meta.batch_size == 0 || self.propensity.batch_size == 0 {
            return Err(Error::validation("batch sizes must be at least 1"));
        }
        if self.dcg_k == 0 {
            return Err(Error::validation("dcg_k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda.fixed) {
            return Err(Error::validation(format!("lambda.fixed = {} outside [0, 1]", self.lambda.fixed)));
        }
        if !(self.lambda.init > 0.0 && self.lambda.init < 1.0) {
            return Err(Error::validation(format!("lambda.init = {} outside (0, 1)", self.lambda.init)));
        }
        if !(self.propensity.floor > 0.0 && self.propensity.floor <= 1.0) {
            return Err(Error::validation("propensity.floor must lie in (0, 1]"));
        }
        if self.propensity.mode == PropensityMode::Joint && !self.estimator.is_doubly_robust() {
            return Err(Error::validation(format!(
                "joint propensity training needs a doubly robust estimator, not {}",
                self.estimator
            )));
        }
        Ok(())
    }
}

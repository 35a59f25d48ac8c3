//! Conditional average treatment effect estimators: an S-learner over ridge
//! regression, propensity score matching, TARNet and CFR with a Sinkhorn
//! balance penalty.

pub mod linear;
pub mod net;
pub mod nn;
pub mod psm;
pub mod sinkhorn;

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::ObservationalDataset;
use crate::error::{Error, Result};
pub use linear::{fit_logistic, fit_ridge, LinearModel, LogisticModel};
pub use net::{fit_two_head, Balance, NetModel, NetSpec, OutcomeKind, TwoHeadNet};
pub use nn::{mlp_forward_backward, Activation, Mlp, MlpSpec};
pub use psm::{fit_psm, PsmModel};
pub use sinkhorn::{sinkhorn_divergence, sinkhorn_with_grad};

/// Serializes `Vec<f64>` as the hex encoding of its little-endian bytes.
pub mod hex_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(v: &[f64]) -> String {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        hex::encode(bytes)
    }

    pub fn decode(s: &str) -> Result<Vec<f64>, String> {
        let bytes = hex::decode(s).map_err(|e| e.to_string())?;
        if bytes.len() % 8 != 0 {
            return Err(format!("{} bytes is not a whole number of f64 values", bytes.len()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    SLearner,
    Psm,
    Tarnet,
    CfrWass,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::SLearner => "s-learner",
            Self::Psm => "psm",
            Self::Tarnet => "tarnet",
            Self::CfrWass => "cfr-wass",
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(self, Self::Tarnet | Self::CfrWass)
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s-learner" => Ok(Self::SLearner),
            "psm" => Ok(Self::Psm),
            "tarnet" => Ok(Self::Tarnet),
            "cfr-wass" => Ok(Self::CfrWass),
            other => Err(Error::InvalidConfig(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the balance penalty (CFR only).
    pub balance_weight: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_ridge")]
    pub ridge_penalty: f64,
    #[serde(default = "default_eps")]
    pub sinkhorn_epsilon: f64,
    #[serde(default = "default_iters")]
    pub sinkhorn_iters: usize,
    /// Standardize network inputs with training-split statistics.
    #[serde(default = "default_true")]
    pub standardize_inputs: bool,
}

fn default_max_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    30
}
fn default_ridge() -> f64 {
    1e-6
}
fn default_eps() -> f64 {
    0.1
}
fn default_iters() -> usize {
    30
}
fn default_true() -> bool {
    true
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            balance_weight: 1e-2,
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            ridge_penalty: default_ridge(),
            sinkhorn_epsilon: default_eps(),
            sinkhorn_iters: default_iters(),
            standardize_inputs: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} must be at least 2", self.batch_size));
        }
        if !(self.balance_weight >= 0.0 && self.balance_weight.is_finite()) {
            return bad(format!("balance weight {} must be nonnegative", self.balance_weight));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be positive".into());
        }
        if !(self.ridge_penalty >= 0.0) {
            return bad(format!("ridge penalty {} must be nonnegative", self.ridge_penalty));
        }
        if !(self.sinkhorn_epsilon > 0.0) || self.sinkhorn_iters == 0 {
            return bad("Sinkhorn epsilon and iterations must be positive".into());
        }
        Ok(())
    }

    pub fn balance(&self) -> Balance {
        Balance {
            weight: self.balance_weight,
            epsilon: self.sinkhorn_epsilon,
            iters: self.sinkhorn_iters,
        }
    }
}

/// Ridge regression on `[X, T]`; the effect is the treatment coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SLearnerModel {
    pub linear: LinearModel,
}

impl SLearnerModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        linear::check_dim(self.linear.weights.len() - 1, x.ncols())?;
        let d = x.ncols();
        Ok(vec![self.linear.weights[d]; x.nrows()])
    }
}

pub fn fit_s_learner(ds: &ObservationalDataset, cfg: &EstimatorConfig) -> Result<SLearnerModel> {
    let x = ds.covariates().clone().insert_column(ds.d(), 0.0);
    let mut x = x;
    for (i, &t) in ds.treatments().iter().enumerate() {
        x[(i, ds.d())] = f64::from(t);
    }
    Ok(SLearnerModel {
        linear: fit_ridge(&x, ds.outcomes(), cfg.ridge_penalty, true)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CateModel {
    SLearner(SLearnerModel),
    Psm(PsmModel),
    Tarnet(NetModel),
    CfrWass(NetModel),
}

impl CateModel {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            Self::SLearner(_) => EstimatorKind::SLearner,
            Self::Psm(_) => EstimatorKind::Psm,
            Self::Tarnet(_) => EstimatorKind::Tarnet,
            Self::CfrWass(_) => EstimatorKind::CfrWass,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Validation factual loss for neural models.
    pub fn validation_loss(&self) -> Option<f64> {
        match self {
            Self::Tarnet(m) | Self::CfrWass(m) => Some(m.history.best_val_loss),
            _ => None,
        }
    }
}

/// Fits one estimator. Neural models need a validation split for early stopping.
pub fn fit_estimator(
    kind: EstimatorKind,
    train: &ObservationalDataset,
    val: &ObservationalDataset,
    cfg: &EstimatorConfig,
    spec: &NetSpec,
) -> Result<CateModel> {
    Ok(match kind {
        EstimatorKind::SLearner => CateModel::SLearner(fit_s_learner(train, cfg)?),
        EstimatorKind::Psm => CateModel::Psm(fit_psm(train)?),
        EstimatorKind::Tarnet => CateModel::Tarnet(fit_two_head(train, val, cfg, spec, None)?),
        EstimatorKind::CfrWass => CateModel::CfrWass(fit_two_head(train, val, cfg, spec, Some(cfg.balance()))?),
    })
}

pub fn predict_cate(model: &CateModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let out = match model {
        CateModel::SLearner(m) => m.predict(x)?,
        CateModel::Psm(m) => m.predict(x)?,
        CateModel::Tarnet(m) | CateModel::CfrWass(m) => m.predict(x)?,
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("effect predictions".into()));
    }
    Ok(out)
}

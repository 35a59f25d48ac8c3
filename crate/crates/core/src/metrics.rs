//! Effect-estimation error metrics: PEHE, ATE and ATT errors, and policy risk.

use serde::{Deserialize, Serialize};

use crate::bench::BenchmarkDataset;
use crate::error::{Error, Result};

/// Estimated effects, optionally with the potential outcomes they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimates {
    pub tau_hat: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0_hat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y1_hat: Option<Vec<f64>>,
}

impl EffectEstimates {
    pub fn from_effects(tau_hat: Vec<f64>) -> Self {
        Self {
            tau_hat,
            y0_hat: None,
            y1_hat: None,
        }
    }

    pub fn from_potential_outcomes(y0_hat: Vec<f64>, y1_hat: Vec<f64>) -> Result<Self> {
        check_len("y1_hat", y0_hat.len(), y1_hat.len())?;
        Ok(Self {
            tau_hat: y1_hat.iter().zip(&y0_hat).map(|(a, b)| a - b).collect(),
            y0_hat: Some(y0_hat),
            y1_hat: Some(y1_hat),
        })
    }

    pub fn len(&self) -> usize {
        self.tau_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau_hat.is_empty()
    }

    /// Checks that `tau_hat = y1_hat - y0_hat` within 1e-10 when all are present.
    pub fn validate(&self) -> Result<()> {
        match (&self.y0_hat, &self.y1_hat) {
            (Some(y0), Some(y1)) => {
                check_len("y0_hat", self.len(), y0.len())?;
                check_len("y1_hat", self.len(), y1.len())?;
                for i in 0..self.len() {
                    if ((y1[i] - y0[i]) - self.tau_hat[i]).abs() > 1e-10 {
                        return Err(Error::InvalidDataset(format!(
                            "tau_hat[{i}] = {} but y1_hat - y0_hat = {}",
                            self.tau_hat[i],
                            y1[i] - y0[i]
                        )));
                    }
                }
                Ok(())
            }
            (None, None) => Ok(()),
            _ => Err(Error::InvalidDataset("only one estimated potential-outcome vector present".into())),
        }
    }
}

/// Treat-or-not decisions `pi_i = 1` iff the estimated effect is strictly positive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub pi: Vec<u8>,
}

impl PolicyDecision {
    pub fn from_estimates(est: &EffectEstimates) -> Self {
        Self {
            pi: est.tau_hat.iter().map(|&t| u8::from(t > 0.0)).collect(),
        }
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::LengthMismatch { what, expected, actual })
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn check_truth(true_y0: &[f64], true_y1: &[f64], est: &EffectEstimates) -> Result<()> {
    check_len("true_y1", true_y0.len(), true_y1.len())?;
    check_len("estimates", true_y0.len(), est.len())?;
    if est.is_empty() {
        return Err(Error::InvalidDataset("no units to evaluate".into()));
    }
    Ok(())
}

/// Mean squared error of the individual effects, without a square root.
pub fn pehe(true_y0: &[f64], true_y1: &[f64], est: &EffectEstimates) -> Result<f64> {
    check_truth(true_y0, true_y1, est)?;
    let n = est.len() as f64;
    Ok((0..est.len())
        .map(|i| ((true_y1[i] - true_y0[i]) - est.tau_hat[i]).powi(2))
        .sum::<f64>()
        / n)
}

/// Absolute difference between the true and estimated average effects.
pub fn ate_error(true_y0: &[f64], true_y1: &[f64], est: &EffectEstimates) -> Result<f64> {
    check_truth(true_y0, true_y1, est)?;
    let n = est.len() as f64;
    let truth = (0..est.len()).map(|i| true_y1[i] - true_y0[i]).sum::<f64>() / n;
    let estimate = est.tau_hat.iter().sum::<f64>() / n;
    Ok((truth - estimate).abs())
}

/// Source of the reference ATT on the randomized subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttReference {
    /// Mean true effect over randomized treated units.
    TrueEffects,
    /// Randomized treated mean outcome minus randomized control mean outcome.
    RandomizedArmMeans,
}

impl AttReference {
    /// True effects when the benchmark has them, arm means otherwise.
    pub fn for_dataset(ds: &BenchmarkDataset) -> Self {
        if ds.true_y0.is_some() && ds.true_y1.is_some() {
            Self::TrueEffects
        } else {
            Self::RandomizedArmMeans
        }
    }
}

fn randomized_arm(ds: &BenchmarkDataset, arm: u8) -> Vec<usize> {
    let t = ds.base.treatments();
    (0..ds.n()).filter(|&i| ds.randomized_mask[i] && t[i] == arm).collect()
}

/// `|ATT_true - ATT_est|` over the randomized treated units, with the
/// reference chosen by [`AttReference::for_dataset`].
pub fn att_error(ds: &BenchmarkDataset, est: &EffectEstimates) -> Result<f64> {
    att_error_with(ds, est, AttReference::for_dataset(ds))
}

pub fn att_error_with(ds: &BenchmarkDataset, est: &EffectEstimates, reference: AttReference) -> Result<f64> {
    check_len("estimates", ds.n(), est.len())?;
    check_len("randomized mask", ds.n(), ds.randomized_mask.len())?;
    let treated = randomized_arm(ds, 1);
    if treated.is_empty() {
        return Err(Error::EmptyArm("randomized treated"));
    }
    let y = ds.base.outcomes();
    let truth = match reference {
        AttReference::TrueEffects => {
            let effects = ds
                .true_effects()
                .ok_or_else(|| Error::InvalidDataset("benchmark has no true potential outcomes".into()))?;
            mean(treated.iter().map(|&i| effects[i])).expect("nonempty")
        }
        AttReference::RandomizedArmMeans => {
            let control = randomized_arm(ds, 0);
            let c = mean(control.iter().map(|&i| y[i])).ok_or(Error::EmptyArm("randomized control"))?;
            mean(treated.iter().map(|&i| y[i])).expect("nonempty") - c
        }
    };
    let estimate = mean(treated.iter().map(|&i| est.tau_hat[i])).expect("nonempty");
    Ok((truth - estimate).abs())
}

/// Policy risk of `pi = 1{tau_hat > 0}` on the randomized subset `E`:
/// `1 - (mean(y | pi=1, t=1, E) P(pi=1 | E) + mean(y | pi=0, t=0, E) P(pi=0 | E))`.
pub fn policy_risk(ds: &BenchmarkDataset, est: &EffectEstimates) -> Result<f64> {
    check_len("estimates", ds.n(), est.len())?;
    check_len("randomized mask", ds.n(), ds.randomized_mask.len())?;
    let pi = PolicyDecision::from_estimates(est).pi;
    let (t, y) = (ds.base.treatments(), ds.base.outcomes());
    let e: Vec<usize> = (0..ds.n()).filter(|&i| ds.randomized_mask[i]).collect();
    if e.is_empty() {
        return Err(Error::InvalidDataset("no randomized units".into()));
    }
    let mut risk = 1.0;
    for arm in [1u8, 0] {
        let policy: Vec<usize> = e.iter().copied().filter(|&i| pi[i] == arm).collect();
        if policy.is_empty() {
            continue;
        }
        let weight = policy.len() as f64 / e.len() as f64;
        let cell = mean(policy.iter().filter(|&&i| t[i] == arm).map(|&i| y[i])).ok_or_else(|| {
            Error::UndefinedCell(format!(
                "no randomized units with policy {arm} and treatment {arm}, but the policy assigns {arm} to {} units",
                policy.len()
            ))
        })?;
        risk -= cell * weight;
    }
    Ok(risk)
}

/// All metrics that the benchmark supports; a metric whose inputs are absent
/// or whose cells are undefined is `None`, with the reason in `undefined`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub pehe: Option<f64>,
    pub ate_error: Option<f64>,
    pub att_error: Option<f64>,
    pub policy_risk: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl MetricSet {
    /// PEHE as stored, or its square root for reporting.
    pub fn pehe_for_report(&self, sqrt: bool) -> Option<f64> {
        self.pehe.map(|p| if sqrt { p.sqrt() } else { p })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "pehe" => self.pehe,
            "ate_error" => self.ate_error,
            "att_error" => self.att_error,
            "policy_risk" => self.policy_risk,
            _ => None,
        }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["pehe", "ate_error", "att_error", "policy_risk"];

pub fn evaluate(ds: &BenchmarkDataset, est: &EffectEstimates) -> Result<MetricSet> {
    check_len("estimates", ds.n(), est.len())?;
    est.validate()?;
    let mut out = MetricSet::default();
    let mut note = |what: &str, r: Result<f64>| -> Result<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(e @ (Error::UndefinedCell(_) | Error::EmptyArm(_) | Error::InvalidDataset(_))) => {
                out.undefined.push(format!("{what}: {e}"));
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };
    let (pehe_v, ate_v) = match (&ds.true_y0, &ds.true_y1) {
        (Some(y0), Some(y1)) => (note("pehe", pehe(y0, y1, est))?, note("ate_error", ate_error(y0, y1, est))?),
        _ => (None, None),
    };
    let att_v = note("att_error", att_error(ds, est))?;
    let pol_v = note("policy_risk", policy_risk(ds, est))?;
    out.pehe = pehe_v;
    out.ate_error = ate_v;
    out.att_error = att_v;
    out.policy_risk = pol_v;
    Ok(out)
}

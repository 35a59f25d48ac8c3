//! Deterministic stand-ins for a live model.
//!
//! [`ReplayOracle`] returns canned replies in order. [`RuleOracle`] answers
//! from a benchmark dataset using fixed rules, so end-to-end runs can be
//! checked against known hidden confounders and potential outcomes.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Oracle, OracleRequest, OracleResponse, PromptKind};
use crate::bench::{BenchmarkDataset, HiddenColumn};
use crate::error::{Error, Result};
use crate::imputation::DistributionFamily;
use crate::rng::{derive_seed, label_hash, stream_rng};

/// One entry of a replay script file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    /// Prompt kind label: `var`, `var-many`, `dist`, `param`, `out` or `values`.
    pub kind: String,
    pub reply: String,
}

/// Returns canned replies in order, checking that each request has the expected kind.
pub struct ReplayOracle {
    queue: VecDeque<ReplayEntry>,
    served: usize,
}

impl ReplayOracle {
    pub fn new(replies: Vec<(PromptKind, String)>) -> Self {
        Self::from_entries(
            replies
                .into_iter()
                .map(|(k, reply)| ReplayEntry {
                    kind: k.label().to_owned(),
                    reply,
                })
                .collect(),
        )
    }

    pub fn from_entries(entries: Vec<ReplayEntry>) -> Self {
        Self {
            queue: entries.into(),
            served: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.len()
    }
}

impl Oracle for ReplayOracle {
    fn complete(&mut self, request: &OracleRequest) -> Result<OracleResponse> {
        let entry = self.queue.pop_front().ok_or_else(|| {
            Error::Script(format!(
                "script exhausted after {} replies; next request is `{}`",
                self.served,
                request.kind.label()
            ))
        })?;
        if entry.kind != request.kind.label() {
            return Err(Error::Script(format!(
                "reply {} is scripted for `{}` but the request is `{}`",
                self.served,
                entry.kind,
                request.kind.label()
            )));
        }
        self.served += 1;
        Ok(OracleResponse::text(entry.reply))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum ConfounderRule {
    /// Reveal the benchmark's hidden columns one by one, with their true values.
    TruthRevealing,
    /// Standard-normal noise unrelated to the data.
    RandomNoise,
    /// The same value for every unit.
    Constant { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum CounterfactualRule {
    /// The benchmark's true counterfactual outcome.
    TruthRevealing,
    /// The factual outcome plus a constant.
    FactualPlusConstant { value: f64 },
    /// Draws matching the marginal scale of the outcome, or fair coin flips for binary outcomes.
    RandomNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub confounder: ConfounderRule,
    pub counterfactual: CounterfactualRule,
    #[serde(default)]
    pub seed: u64,
}

/// Scripted oracle file contents: a replay list or a rule specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptSpec {
    Replay(Vec<ReplayEntry>),
    Rules(RuleSpec),
}

impl ScriptSpec {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Script(format!("{}: {e}", path.display())))
    }

    /// Builds the oracle. Rule scripts need the benchmark they answer from.
    pub fn build(self, bench: Option<&BenchmarkDataset>) -> Result<Box<dyn Oracle>> {
        match self {
            Self::Replay(entries) => Ok(Box::new(ReplayOracle::from_entries(entries))),
            Self::Rules(spec) => {
                let bench = bench.ok_or_else(|| Error::Script("rule scripts must be bound to a benchmark dataset".into()))?;
                Ok(Box::new(RuleOracle::new(bench.clone(), spec)?))
            }
        }
    }
}

/// Answers every prompt kind from fixed rules over a benchmark dataset.
///
/// Unit ids in requests index rows of the bound benchmark. All randomness is
/// derived from (seed, prompt kind, variable name, unit id), so replies do not
/// depend on call order.
pub struct RuleOracle {
    bench: BenchmarkDataset,
    spec: RuleSpec,
}

fn wrap(payload: Value) -> OracleResponse {
    OracleResponse::text(format!("Here is my answer.\n```json\n{payload}\n```"))
}

fn is_binary(values: &[f64]) -> bool {
    values.iter().all(|&v| v == 0.0 || v == 1.0)
}

impl RuleOracle {
    pub fn new(bench: BenchmarkDataset, spec: RuleSpec) -> Result<Self> {
        if spec.counterfactual == CounterfactualRule::TruthRevealing && bench.true_counterfactuals().is_none() {
            return Err(Error::Script(
                "the truth-revealing counterfactual rule needs ground-truth potential outcomes".into(),
            ));
        }
        Ok(Self { bench, spec })
    }

    fn hidden(&self, name: &str) -> Option<&HiddenColumn> {
        let lower = name.to_lowercase();
        self.bench.hidden.iter().find(|h| h.meta.name.to_lowercase() == lower)
    }

    fn noise(&self, kind: &str, name: &str, unit: usize) -> f64 {
        let seed = derive_seed(derive_seed(self.spec.seed, label_hash(kind)), label_hash(name));
        stream_rng(seed, unit as u64).sample(StandardNormal)
    }

    fn check_units(&self, request: &OracleRequest) -> Result<()> {
        match request.unit_ids.iter().find(|&&i| i >= self.bench.n()) {
            Some(i) => Err(Error::Script(format!("unit id {i} outside the bound benchmark ({} rows)", self.bench.n()))),
            None => Ok(()),
        }
    }

    /// Proposals not yet present among `known`, most informative first.
    fn proposals(&self, known: &[String], count: usize) -> Vec<(String, String)> {
        let taken = |name: &str| known.iter().any(|k| k.eq_ignore_ascii_case(name));
        let mut out = Vec::new();
        if self.spec.confounder == ConfounderRule::TruthRevealing {
            for h in &self.bench.hidden {
                if out.len() < count && !taken(&h.meta.name) {
                    let explanation = if h.meta.description.is_empty() {
                        format!("{} influences both treatment and outcome.", h.meta.name)
                    } else {
                        h.meta.description.clone()
                    };
                    out.push((h.meta.name.clone(), explanation));
                }
            }
            return out;
        }
        let stem = match self.spec.confounder {
            ConfounderRule::Constant { .. } => "Constant Factor",
            _ => "Noise Factor",
        };
        let mut k = 1;
        while out.len() < count {
            let name = format!("{stem} {k}");
            if !taken(&name) {
                out.push((name, "An unobserved factor that may influence both treatment and outcome.".into()));
            }
            k += 1;
        }
        out
    }

    fn variable<'a>(&self, request: &'a OracleRequest) -> Result<&'a str> {
        request
            .variable
            .as_deref()
            .ok_or_else(|| Error::Script(format!("`{}` request without a variable name", request.kind.label())))
    }

    /// The value a unit should receive: the hidden truth, noise, or the constant.
    fn confounder_value(&self, name: &str, unit: usize) -> f64 {
        match (&self.spec.confounder, self.hidden(name)) {
            (ConfounderRule::TruthRevealing, Some(h)) => h.values[unit],
            (ConfounderRule::Constant { value }, _) => *value,
            _ => self.noise("confounder", name, unit),
        }
    }

    fn parameters(&self, request: &OracleRequest) -> Result<Value> {
        let name = self.variable(request)?;
        let family = request
            .family
            .as_ref()
            .ok_or_else(|| Error::Script("parameter request without a family".into()))?;
        let truth = match self.spec.confounder {
            ConfounderRule::TruthRevealing => self.hidden(name),
            _ => None,
        };
        let rows: Vec<Value> = request
            .unit_ids
            .iter()
            .map(|&i| {
                let exact = truth.map(|h| h.values[i]);
                match family {
                    DistributionFamily::Gaussian => match (&self.spec.confounder, exact) {
                        (_, Some(v)) => json!({"mean": v, "std": 1e-6}),
                        (ConfounderRule::Constant { value }, _) => json!({"mean": value, "std": 1e-9}),
                        _ => json!({"mean": 0.0, "std": 1.0}),
                    },
                    DistributionFamily::Bernoulli => match (&self.spec.confounder, exact) {
                        (_, Some(v)) => json!({"p": v.clamp(0.0, 1.0)}),
                        (ConfounderRule::Constant { value }, _) => json!({"p": value.clamp(0.0, 1.0)}),
                        _ => json!({"p": 0.5}),
                    },
                    DistributionFamily::Categorical { levels } => {
                        let code = match (&self.spec.confounder, exact) {
                            (_, Some(v)) => Some(v),
                            (ConfounderRule::Constant { value }, _) => Some(*value),
                            _ => None,
                        };
                        let probs: Vec<f64> = match code {
                            Some(c) => {
                                let c = (c.round().max(0.0) as usize).min(levels - 1);
                                (0..*levels).map(|k| f64::from(u8::from(k == c))).collect()
                            }
                            None => vec![1.0 / *levels as f64; *levels],
                        };
                        json!({ "probs": probs })
                    }
                }
            })
            .collect();
        Ok(json!({ "parameters": rows }))
    }

    fn counterfactuals(&self, request: &OracleRequest) -> Result<Value> {
        let y = self.bench.base.outcomes();
        let values: Vec<f64> = match &self.spec.counterfactual {
            CounterfactualRule::TruthRevealing => {
                let cf = self.bench.true_counterfactuals().expect("checked at construction");
                request.unit_ids.iter().map(|&i| cf[i]).collect()
            }
            CounterfactualRule::FactualPlusConstant { value } => request.unit_ids.iter().map(|&i| y[i] + value).collect(),
            CounterfactualRule::RandomNoise => {
                let n = y.len() as f64;
                let mean = y.iter().sum::<f64>() / n;
                let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                let binary = is_binary(y);
                request
                    .unit_ids
                    .iter()
                    .map(|&i| {
                        let z = self.noise("counterfactual", "", i);
                        if binary {
                            f64::from(u8::from(z > 0.0))
                        } else {
                            mean + sd * z
                        }
                    })
                    .collect()
            }
        };
        Ok(json!({ "counterfactuals": values }))
    }
}

impl Oracle for RuleOracle {
    fn complete(&mut self, request: &OracleRequest) -> Result<OracleResponse> {
        self.check_units(request)?;
        let payload = match &request.kind {
            PromptKind::Var => match self.proposals(&request.known_variables, 1).pop() {
                Some((name, explanation)) => json!({"name": name, "explanation": explanation}),
                None => return Ok(OracleResponse::text("I cannot think of any further confounders for this dataset.")),
            },
            PromptKind::VarMany(count) => {
                let list: Vec<Value> = self
                    .proposals(&request.known_variables, *count)
                    .into_iter()
                    .map(|(name, explanation)| json!({"name": name, "explanation": explanation}))
                    .collect();
                json!({ "confounders": list })
            }
            PromptKind::Dist => {
                let name = self.variable(request)?;
                let label = match (&self.spec.confounder, self.hidden(name)) {
                    (ConfounderRule::TruthRevealing, Some(h)) if is_binary(&h.values) => "Binary",
                    _ => "Normal distribution",
                };
                json!({ "distribution": label })
            }
            PromptKind::Param => self.parameters(request)?,
            PromptKind::Out => self.counterfactuals(request)?,
            PromptKind::Values => {
                let name = self.variable(request)?;
                let values: Vec<f64> = request.unit_ids.iter().map(|&i| self.confounder_value(name, i)).collect();
                json!({ "values": values })
            }
        };
        Ok(wrap(payload))
    }
}

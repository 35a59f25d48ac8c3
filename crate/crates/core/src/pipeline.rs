//! The progressive loop: propose a confounder, impute its values, impute
//! counterfactuals, and test unconfoundedness of the augmented covariate set,
//! stopping at the first iteration that passes.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{append_confounder, write_csv, ObservationalDataset, VariableMeta};
use crate::error::{Error, Result};
use crate::imputation::{
    construct_potential_outcomes, sample_confounder_values, standardize_column, DistributionFamily,
    PotentialOutcomeTable,
};
use crate::kernel::{kcit_pvalue, KcitConfig, KcitResult};
use crate::oracle::{
    direct_values, identify_distribution, impute_counterfactuals, infer_parameters, propose_variable,
    propose_variables, OracleSession, PromptContext, ValueTable,
};
use crate::rng::{derive_seed, label_hash};

/// When the loop stops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "iterations")]
pub enum GateMode {
    /// Stop at the first iteration whose KCIT p-value exceeds alpha.
    Kcit,
    /// Run exactly this many iterations without testing.
    Fixed(usize),
}

/// How confounder values are obtained from the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueMode {
    /// Family, then per-unit parameters, then one draw per unit.
    Distributional,
    /// Values requested directly.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "count")]
pub enum GenerationMode {
    /// One confounder per iteration, each proposal seeing the earlier ones.
    Progressive,
    /// All confounders proposed in a single reply, then tested once.
    AllAtOnce(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProciConfig {
    #[serde(default)]
    pub kcit: KcitConfig,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_gate")]
    pub gate: GateMode,
    #[serde(default = "default_values")]
    pub values: ValueMode,
    #[serde(default = "default_generation")]
    pub generation: GenerationMode,
    /// Test the unaugmented covariates first; a pass there ends the run at iteration 0.
    #[serde(default)]
    pub precheck: bool,
}

fn default_max_iterations() -> usize {
    5
}
fn default_gate() -> GateMode {
    GateMode::Kcit
}
fn default_values() -> ValueMode {
    ValueMode::Distributional
}
fn default_generation() -> GenerationMode {
    GenerationMode::Progressive
}

impl Default for ProciConfig {
    fn default() -> Self {
        Self {
            kcit: KcitConfig::default(),
            max_iterations: default_max_iterations(),
            seed: 0,
            gate: default_gate(),
            values: default_values(),
            generation: default_generation(),
            precheck: false,
        }
    }
}

impl ProciConfig {
    pub fn validate(&self) -> Result<()> {
        self.kcit.validate()?;
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if let GateMode::Fixed(0) = self.gate {
            return Err(Error::InvalidConfig("a fixed gate needs at least 1 iteration".into()));
        }
        if let GenerationMode::AllAtOnce(0) = self.generation {
            return Err(Error::InvalidConfig("all-at-once generation needs at least 1 confounder".into()));
        }
        Ok(())
    }

    fn iteration_cap(&self) -> usize {
        match (self.generation, self.gate) {
            (GenerationMode::AllAtOnce(_), _) => 1,
            (_, GateMode::Fixed(k)) => k,
            (_, GateMode::Kcit) => self.max_iterations,
        }
    }
}

/// Record of one generated confounder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedConfounder {
    pub name: String,
    pub explanation: String,
    pub iteration: usize,
    /// Absent when values were requested directly.
    pub family: Option<DistributionFamily>,
    /// SHA-256 of the per-unit parameters in JSON form.
    pub params_digest: Option<String>,
    /// Values before standardization.
    pub raw_values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub added: Vec<String>,
    pub covariates: usize,
    /// Absent under a fixed gate.
    pub kcit: Option<KcitResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum Termination {
    Passed { iteration: usize },
    MaxIterationsReached,
    FixedIterations { iterations: usize },
    OracleFailure { iteration: usize, operation: String, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProciResult {
    pub augmented: ObservationalDataset,
    pub confounders: Vec<GeneratedConfounder>,
    /// Table of the last completed iteration.
    pub potential_outcomes: Option<PotentialOutcomeTable>,
    pub iteration_log: Vec<IterationRecord>,
    pub termination: Termination,
}

impl ProciResult {
    pub fn passed(&self) -> Option<usize> {
        match self.termination {
            Termination::Passed { iteration } => Some(iteration),
            _ => None,
        }
    }

    /// Writes `augmented.csv`, `confounders.json`, `po_table.csv`,
    /// `iterations.json` and, when a session is given, `transcript.jsonl`.
    pub fn write_run_dir(&self, dir: &Path, session: Option<&OracleSession>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&self.augmented, &dir.join("augmented.csv"))?;
        let confounders: Vec<serde_json::Value> = self
            .confounders
            .iter()
            .map(|c| {
                serde_json::json!({
                    "name": c.name,
                    "explanation": c.explanation,
                    "iteration": c.iteration,
                    "family": c.family,
                    "params_digest": c.params_digest,
                    "mean": c.mean,
                    "sd": c.sd,
                })
            })
            .collect();
        std::fs::write(dir.join("confounders.json"), serde_json::to_string_pretty(&confounders)?)?;
        if let Some(po) = &self.potential_outcomes {
            po.write_csv(&dir.join("po_table.csv"))?;
        }
        let iterations = serde_json::json!({
            "termination": self.termination,
            "iterations": self.iteration_log,
        });
        std::fs::write(dir.join("iterations.json"), serde_json::to_string_pretty(&iterations)?)?;
        if let Some(s) = session {
            s.write_transcript(&dir.join("transcript.jsonl"))?;
        }
        Ok(())
    }
}

fn is_oracle_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Parse(_) | Error::OracleRejected(_) | Error::Transport(_) | Error::Script(_)
    )
}

/// Covariates with every column standardized, as used for conditioning.
pub fn standardized_covariates(ds: &ObservationalDataset) -> DMatrix<f64> {
    let x = ds.covariates();
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for j in 0..x.ncols() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        out.set_column(j, &DMatrix::from_vec(x.nrows(), 1, standardize_column(&col).values).column(0));
    }
    out
}

fn kcit_on(ds: &ObservationalDataset, po: &PotentialOutcomeTable, cfg: &KcitConfig) -> Result<KcitResult> {
    let n = ds.n();
    let y = DMatrix::from_fn(n, 2, |i, j| if j == 0 { po.y0_hat[i] } else { po.y1_hat[i] });
    kcit_pvalue(&y, ds.treatments(), &standardized_covariates(ds), cfg)
}

/// The unconfoundedness test on the unaugmented covariates.
pub fn kcit_precheck(ds: &ObservationalDataset, po: &PotentialOutcomeTable, cfg: &KcitConfig) -> Result<KcitResult> {
    if po.n() != ds.n() {
        return Err(Error::LengthMismatch {
            what: "potential outcomes",
            expected: ds.n(),
            actual: po.n(),
        });
    }
    kcit_on(ds, po, cfg)
}

fn full_context(ds: &ObservationalDataset) -> PromptContext {
    let rows: Vec<usize> = (0..ds.n()).collect();
    PromptContext::from_dataset(ds).with_values(ValueTable::from_dataset(ds, &rows))
}

fn counterfactual_table(session: &mut OracleSession, ds: &ObservationalDataset) -> Result<PotentialOutcomeTable> {
    let y_cf = impute_counterfactuals(session, &full_context(ds), ds.has_binary_outcome())?;
    construct_potential_outcomes(ds.treatments(), ds.outcomes(), &y_cf)
}

/// Everything one iteration adds, applied only once the iteration completes.
struct Step {
    dataset: ObservationalDataset,
    confounders: Vec<GeneratedConfounder>,
    po: PotentialOutcomeTable,
}

fn failure(iteration: usize, operation: &str, e: Error) -> Result<Termination> {
    if is_oracle_error(&e) {
        Ok(Termination::OracleFailure {
            iteration,
            operation: operation.to_owned(),
            message: e.to_string(),
        })
    } else {
        Err(e)
    }
}

fn generate(
    session: &mut OracleSession,
    current: &ObservationalDataset,
    cfg: &ProciConfig,
    iteration: usize,
) -> std::result::Result<Step, (&'static str, Error)> {
    let ctx = PromptContext::from_dataset(current);
    let metas: Vec<VariableMeta> = match cfg.generation {
        GenerationMode::Progressive => vec![propose_variable(session, &ctx).map_err(|e| ("propose_variable", e))?],
        GenerationMode::AllAtOnce(count) => {
            propose_variables(session, &ctx, count).map_err(|e| ("propose_variables", e))?
        }
    };
    let mut dataset = current.clone();
    let mut confounders = Vec::new();
    for (j, meta) in metas.into_iter().enumerate() {
        let ctx = full_context(&dataset);
        let (raw, family, digest) = match cfg.values {
            ValueMode::Distributional => {
                let family = identify_distribution(session, &ctx, &meta).map_err(|e| ("identify_distribution", e))?;
                let pp = infer_parameters(session, &ctx, &meta, &family).map_err(|e| ("infer_parameters", e))?;
                let digest = hex::encode(Sha256::digest(serde_json::to_vec(&pp).map_err(|e| ("digest", e.into()))?));
                let seed = derive_seed(cfg.seed, label_hash(&format!("confounder-{iteration}-{j}")));
                let raw = sample_confounder_values(&pp, seed).map_err(|e| ("sample_confounder_values", e))?;
                (raw, Some(family), Some(digest))
            }
            ValueMode::Direct => (
                direct_values(session, &ctx, &meta).map_err(|e| ("direct_values", e))?,
                None,
                None,
            ),
        };
        let std = standardize_column(&raw);
        dataset = append_confounder(&dataset, &std.values, meta.clone()).map_err(|e| ("append_confounder", e))?;
        confounders.push(GeneratedConfounder {
            name: meta.name,
            explanation: meta.explanation.unwrap_or_default(),
            iteration,
            family,
            params_digest: digest,
            raw_values: raw,
            mean: std.mean,
            sd: std.sd,
        });
    }
    let po = counterfactual_table(session, &dataset).map_err(|e| ("impute_counterfactuals", e))?;
    Ok(Step {
        dataset,
        confounders,
        po,
    })
}

/// Runs the loop. Oracle failures end the run with the state of the last
/// completed iteration; other errors are returned.
pub fn run_proci(ds: &ObservationalDataset, cfg: &ProciConfig, session: &mut OracleSession) -> Result<ProciResult> {
    cfg.validate()?;
    let mut result = ProciResult {
        augmented: ds.clone(),
        confounders: Vec::new(),
        potential_outcomes: None,
        iteration_log: Vec::new(),
        termination: Termination::MaxIterationsReached,
    };
    let kcit_cfg = |iteration: usize| KcitConfig {
        seed: derive_seed(cfg.kcit.seed, iteration as u64),
        ..cfg.kcit.clone()
    };

    if cfg.precheck {
        let po = match counterfactual_table(session, ds) {
            Ok(po) => po,
            Err(e) => {
                result.termination = failure(0, "impute_counterfactuals", e)?;
                return Ok(result);
            }
        };
        let test = kcit_precheck(ds, &po, &kcit_cfg(0))?;
        let pass = test.pass;
        result.iteration_log.push(IterationRecord {
            iteration: 0,
            added: Vec::new(),
            covariates: ds.d(),
            kcit: Some(test),
        });
        result.potential_outcomes = Some(po);
        if pass {
            result.termination = Termination::Passed { iteration: 0 };
            return Ok(result);
        }
    }

    let cap = cfg.iteration_cap();
    for iteration in 1..=cap {
        let step = match generate(session, &result.augmented, cfg, iteration) {
            Ok(s) => s,
            Err((op, e)) => {
                result.termination = failure(iteration, op, e)?;
                return Ok(result);
            }
        };
        let kcit = match cfg.gate {
            GateMode::Kcit => Some(kcit_on(&step.dataset, &step.po, &kcit_cfg(iteration))?),
            GateMode::Fixed(_) => None,
        };
        let pass = kcit.as_ref().is_some_and(|k| k.pass);
        result.iteration_log.push(IterationRecord {
            iteration,
            added: step.confounders.iter().map(|c| c.name.clone()).collect(),
            covariates: step.dataset.d(),
            kcit,
        });
        result.augmented = step.dataset;
        result.confounders.extend(step.confounders);
        result.potential_outcomes = Some(step.po);
        if pass {
            result.termination = Termination::Passed { iteration };
            return Ok(result);
        }
    }
    result.termination = match cfg.gate {
        GateMode::Fixed(_) => Termination::FixedIterations { iterations: cap },
        GateMode::Kcit => Termination::MaxIterationsReached,
    };
    Ok(result)
}

//! The language-model oracle: a pluggable completion backend plus the four
//! structured operations built on it (propose a variable, pick its
//! distribution family, infer per-unit parameters, impute counterfactuals).
//!
//! Every reply is parsed against an expected shape. A parse failure or a
//! semantic violation triggers exactly one re-prompt that explains the
//! problem; a second failure is a hard error.

pub mod http;
pub mod parse;
pub mod prompt;
pub mod scripted;

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::VariableMeta;
use crate::error::{Error, Result};
use crate::imputation::{DistributionFamily, PerUnitParams, UnitParams};
pub use parse::{family_from_label, parse_oracle_reply, Payload, Proposal, Shape};
pub use prompt::{render_prompt, PromptContext, PromptKind, RenderedPrompt, ValueTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Transport-level retries for HTTP failures and rate limits.
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
}

fn default_temperature() -> f64 {
    0.7
}
fn default_batch_size() -> usize {
    50
}
fn default_max_retries() -> usize {
    3
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}

impl OracleConfig {
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            temperature: default_temperature(),
            batch_size: default_batch_size(),
            max_retries: default_max_retries(),
            timeout_secs: default_timeout_secs(),
            api_key_env: default_api_key_env(),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::InvalidConfig(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One completion request handed to an [`Oracle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub kind: PromptKind,
    pub prompt: RenderedPrompt,
    /// Dataset rows covered by a batched request, in prompt order.
    pub unit_ids: Vec<usize>,
    /// Confounder the request is about, when applicable.
    pub variable: Option<String>,
    pub family: Option<DistributionFamily>,
    /// Names of the covariates already in the context.
    pub known_variables: Vec<String>,
    /// 0 for the first try, 1 for the re-prompt.
    pub attempt: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl OracleResponse {
    pub fn text(raw: impl Into<String>) -> Self {
        Self {
            raw_text: raw.into(),
            usage: None,
        }
    }
}

pub trait Oracle: Send {
    fn complete(&mut self, request: &OracleRequest) -> Result<OracleResponse>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub kind: String,
    pub attempt: usize,
    pub variable: Option<String>,
    pub unit_ids: Vec<usize>,
    pub system: String,
    pub user: String,
    pub response: Option<String>,
    pub usage: Option<Usage>,
    pub error: Option<String>,
}

/// Wraps an oracle with batching, the re-prompt policy and a transcript.
pub struct OracleSession {
    oracle: Box<dyn Oracle>,
    batch_size: usize,
    transcript: Vec<TranscriptEntry>,
}

enum Rejection {
    Parse(String),
    Semantic(String),
}

impl Rejection {
    fn note(&self) -> String {
        match self {
            Self::Parse(d) => format!(
                "Your previous reply could not be parsed ({d}). Reply again with only the requested JSON object."
            ),
            Self::Semantic(d) => format!("Your previous reply was rejected: {d}. Please correct it."),
        }
    }
}

struct Ask<'a> {
    kind: PromptKind,
    ctx: &'a PromptContext,
    variable: Option<&'a str>,
    family: Option<&'a DistributionFamily>,
    shape: Shape,
    what: String,
}

impl OracleSession {
    pub fn new(oracle: Box<dyn Oracle>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(Self {
            oracle,
            batch_size,
            transcript: Vec::new(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn write_transcript(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for entry in &self.transcript {
            serde_json::to_writer(&mut f, entry)?;
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }

    fn ask<T>(&mut self, ask: Ask<'_>, check: impl Fn(Payload) -> std::result::Result<T, String>) -> Result<T> {
        let unit_ids = ask.ctx.values.as_ref().map(|v| v.unit_ids.clone()).unwrap_or_default();
        let mut note: Option<String> = None;
        let mut last = Rejection::Parse(String::new());
        for attempt in 0..2 {
            let mut prompt = render_prompt(&ask.kind, ask.ctx, ask.variable, ask.family)?;
            if let Some(n) = &note {
                prompt.body.push_str("\n\n");
                prompt.body.push_str(n);
            }
            let request = OracleRequest {
                kind: ask.kind.clone(),
                prompt,
                unit_ids: unit_ids.clone(),
                variable: ask.variable.map(str::to_owned),
                family: ask.family.cloned(),
                known_variables: ask.ctx.covariate_names(),
                attempt,
            };
            let mut entry = TranscriptEntry {
                kind: ask.kind.label().to_owned(),
                attempt,
                variable: request.variable.clone(),
                unit_ids: unit_ids.clone(),
                system: request.prompt.prefix.clone(),
                user: request.prompt.body.clone(),
                response: None,
                usage: None,
                error: None,
            };
            let response = match self.oracle.complete(&request) {
                Ok(r) => r,
                Err(e) => {
                    entry.error = Some(e.to_string());
                    self.transcript.push(entry);
                    return Err(e);
                }
            };
            entry.response = Some(response.raw_text.clone());
            entry.usage = response.usage.clone();
            let outcome = match parse_oracle_reply(&response.raw_text, &ask.shape) {
                Err(e) => Err(Rejection::Parse(e.to_string())),
                Ok(payload) => check(payload).map_err(Rejection::Semantic),
            };
            match outcome {
                Ok(v) => {
                    self.transcript.push(entry);
                    return Ok(v);
                }
                Err(rej) => {
                    entry.error = Some(match &rej {
                        Rejection::Parse(d) | Rejection::Semantic(d) => d.clone(),
                    });
                    self.transcript.push(entry);
                    note = Some(rej.note());
                    last = rej;
                }
            }
        }
        Err(match last {
            Rejection::Parse(d) => Error::Parse(format!("{} after re-prompt: {d}", ask.what)),
            Rejection::Semantic(d) => Error::OracleRejected(format!("{} after re-prompt: {d}", ask.what)),
        })
    }
}

fn check_new_name(name: &str, existing: &[String]) -> std::result::Result<(), String> {
    let lower = name.to_lowercase();
    if existing.iter().any(|e| e.to_lowercase() == lower) {
        Err(format!("a variable named `{name}` already exists; propose a confounder with a different meaning"))
    } else {
        Ok(())
    }
}

fn reserved_names(ctx: &PromptContext) -> Vec<String> {
    let mut names = ctx.covariate_names();
    names.push(ctx.treatment_meta.name.clone());
    names.push(ctx.outcome_meta.name.clone());
    names
}

/// Asks for one new confounder whose name is not already in use.
pub fn propose_variable(session: &mut OracleSession, ctx: &PromptContext) -> Result<VariableMeta> {
    let existing = reserved_names(ctx);
    let ask = Ask {
        kind: PromptKind::Var,
        ctx,
        variable: None,
        family: None,
        shape: Shape::Variable,
        what: "variable proposal".into(),
    };
    session.ask(ask, |payload| match payload {
        Payload::Variable(p) => {
            check_new_name(&p.name, &existing)?;
            Ok(VariableMeta::generated(p.name, p.explanation.clone(), p.explanation))
        }
        _ => Err("unexpected payload".into()),
    })
}

/// Asks for `count` distinct new confounders in one reply.
pub fn propose_variables(session: &mut OracleSession, ctx: &PromptContext, count: usize) -> Result<Vec<VariableMeta>> {
    let existing = reserved_names(ctx);
    let ask = Ask {
        kind: PromptKind::VarMany(count),
        ctx,
        variable: None,
        family: None,
        shape: Shape::Variables(count),
        what: "variable proposals".into(),
    };
    session.ask(ask, |payload| match payload {
        Payload::Variables(list) => {
            let mut seen = existing.clone();
            let mut out = Vec::new();
            for p in list {
                check_new_name(&p.name, &seen)?;
                seen.push(p.name.clone());
                out.push(VariableMeta::generated(p.name, p.explanation.clone(), p.explanation));
            }
            Ok(out)
        }
        _ => Err("unexpected payload".into()),
    })
}

/// Asks for the distribution family of `variable`.
pub fn identify_distribution(
    session: &mut OracleSession,
    ctx: &PromptContext,
    variable: &VariableMeta,
) -> Result<DistributionFamily> {
    let ask = Ask {
        kind: PromptKind::Dist,
        ctx,
        variable: Some(&variable.name),
        family: None,
        shape: Shape::Distribution,
        what: format!("distribution of `{}`", variable.name),
    };
    session.ask(ask, |payload| match payload {
        Payload::Distribution { label, levels } => match family_from_label(&label, levels) {
            Some(DistributionFamily::Categorical { levels }) if levels < 2 => {
                Err("a categorical distribution needs `levels` of at least 2".into())
            }
            Some(f) => Ok(f),
            None => Err(format!(
                "`{label}` is not supported; choose one of gaussian, bernoulli, categorical"
            )),
        },
        _ => Err("unexpected payload".into()),
    })
}

fn batches(len: usize, size: usize) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> {
    (0..len.div_ceil(size)).map(move |b| (b, b * size..((b + 1) * size).min(len)))
}

fn values_of(ctx: &PromptContext) -> Result<&ValueTable> {
    ctx.values.as_ref().ok_or(Error::MissingPlaceholder("D_X"))
}

/// Per-unit parameters for every row of `ctx.values`, requested in batches
/// and concatenated in row order.
pub fn infer_parameters(
    session: &mut OracleSession,
    ctx: &PromptContext,
    variable: &VariableMeta,
    family: &DistributionFamily,
) -> Result<PerUnitParams> {
    let table = values_of(ctx)?;
    let mut params: Vec<UnitParams> = Vec::with_capacity(table.len());
    for (b, range) in batches(table.len(), session.batch_size) {
        let rows = range.len();
        let batch_ctx = ctx.with_values(table.slice(range));
        let ask = Ask {
            kind: PromptKind::Param,
            ctx: &batch_ctx,
            variable: Some(&variable.name),
            family: Some(family),
            shape: Shape::Parameters {
                family: family.clone(),
                rows,
            },
            what: format!("parameters for `{}` in batch {b}", variable.name),
        };
        let got = session.ask(ask, |payload| match payload {
            Payload::Parameters(list) => {
                for (i, p) in list.iter().enumerate() {
                    p.check(family).map_err(|e| format!("entry {i}: {e}"))?;
                }
                Ok(list)
            }
            _ => Err("unexpected payload".into()),
        })?;
        params.extend(got);
    }
    Ok(PerUnitParams {
        family: family.clone(),
        params,
    })
}

fn batched_numbers(
    session: &mut OracleSession,
    ctx: &PromptContext,
    kind: PromptKind,
    variable: Option<&str>,
    binary: bool,
    label: &str,
) -> Result<Vec<f64>> {
    let table = values_of(ctx)?;
    let mut out = Vec::with_capacity(table.len());
    for (b, range) in batches(table.len(), session.batch_size) {
        let rows = range.len();
        let batch_ctx = ctx.with_values(table.slice(range));
        let shape = match kind {
            PromptKind::Out => Shape::Counterfactuals { rows },
            _ => Shape::Values { rows },
        };
        let ask = Ask {
            kind: kind.clone(),
            ctx: &batch_ctx,
            variable,
            family: None,
            shape,
            what: format!("{label} in batch {b}"),
        };
        let got = session.ask(ask, |payload| match payload {
            Payload::Numbers(v) => {
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(format!("entry {i} is not finite"));
                }
                if binary {
                    if let Some(i) = v.iter().position(|&x| x != 0.0 && x != 1.0) {
                        return Err(format!("entry {i} is {}, but the outcome is binary (0 or 1)", v[i]));
                    }
                }
                Ok(v)
            }
            _ => Err("unexpected payload".into()),
        })?;
        out.extend(got);
    }
    Ok(out)
}

/// Counterfactual outcome for every row of `ctx.values`, in row order.
pub fn impute_counterfactuals(session: &mut OracleSession, ctx: &PromptContext, binary: bool) -> Result<Vec<f64>> {
    batched_numbers(session, ctx, PromptKind::Out, None, binary, "counterfactuals")
}

/// Confounder values requested directly, without a distribution.
pub fn direct_values(session: &mut OracleSession, ctx: &PromptContext, variable: &VariableMeta) -> Result<Vec<f64>> {
    batched_numbers(
        session,
        ctx,
        PromptKind::Values,
        Some(&variable.name),
        false,
        &format!("values of `{}`", variable.name),
    )
}

//! Prompt templates. Each prompt is a dataset prefix plus a kind-specific body,
//! followed by a strict JSON output instruction so replies can be parsed.

use serde::{Deserialize, Serialize};

use crate::data::{ObservationalDataset, VariableMeta};
use crate::error::{Error, Result};
use crate::imputation::DistributionFamily;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "count")]
pub enum PromptKind {
    /// Propose one new confounder.
    Var,
    /// Propose several confounders in a single reply.
    VarMany(usize),
    /// Choose a distribution family.
    Dist,
    /// Per-unit distribution parameters.
    Param,
    /// Counterfactual outcomes.
    Out,
    /// Per-unit confounder values requested directly.
    Values,
}

impl PromptKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Var => "var",
            Self::VarMany(_) => "var-many",
            Self::Dist => "dist",
            Self::Param => "param",
            Self::Out => "out",
            Self::Values => "values",
        }
    }
}

/// Rows shown to the oracle, aligned with `unit_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub unit_ids: Vec<usize>,
    pub covariates: Vec<Vec<f64>>,
    pub treatments: Vec<u8>,
    pub outcomes: Vec<f64>,
}

impl ValueTable {
    pub fn from_dataset(ds: &ObservationalDataset, rows: &[usize]) -> Self {
        Self {
            unit_ids: rows.to_vec(),
            covariates: rows.iter().map(|&i| ds.row(i)).collect(),
            treatments: rows.iter().map(|&i| ds.treatments()[i]).collect(),
            outcomes: rows.iter().map(|&i| ds.outcomes()[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            unit_ids: self.unit_ids[range.clone()].to_vec(),
            covariates: self.covariates[range.clone()].to_vec(),
            treatments: self.treatments[range.clone()].to_vec(),
            outcomes: self.outcomes[range].to_vec(),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.unit_ids.len();
        if self.covariates.len() != n || self.treatments.len() != n || self.outcomes.len() != n {
            return Err(Error::DimensionMismatch("value table columns have different row counts".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptContext {
    pub dataset_name: String,
    pub dataset_intro: String,
    pub treatment_meta: VariableMeta,
    pub outcome_meta: VariableMeta,
    pub covariate_metas: Vec<VariableMeta>,
    pub values: Option<ValueTable>,
}

impl PromptContext {
    pub fn from_dataset(ds: &ObservationalDataset) -> Self {
        Self {
            dataset_name: ds.name().to_owned(),
            dataset_intro: ds.intro().to_owned(),
            treatment_meta: ds.treatment_meta().clone(),
            outcome_meta: ds.outcome_meta().clone(),
            covariate_metas: ds.covariate_meta().to_vec(),
            values: None,
        }
    }

    pub fn with_values(&self, values: ValueTable) -> Self {
        Self {
            values: Some(values),
            ..self.clone()
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariate_metas.iter().map(|m| m.name.clone()).collect()
    }
}

/// Rendered prompt: the prefix goes in the system message, the body in the user message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub prefix: String,
    pub body: String,
}

impl RenderedPrompt {
    pub fn text(&self) -> String {
        format!("{}\n\n{}", self.prefix, self.body)
    }
}

/// Placeholder markers used by the templates below.
pub const PLACEHOLDERS: &[&str] = &[
    "{D_name}", "{D_intro}", "{T_name}", "{T_desc}", "{Y_name}", "{Y_desc}", "{X_name}", "{X_desc}", "{U_name}",
    "{D_X}", "{D_T}", "{D_Y}", "{count}", "{family_request}", "{levels}",
];

const PREFIX: &str = "Brief introduction of the {D_name} dataset: {D_intro}
This observational dataset contains:
(1) Treatment — {T_name}: {T_desc}
(2) Outcome — {Y_name}: {Y_desc}
(3) Confounders — {X_name}: {X_desc}";

const VAR: &str = "Based on your world knowledge, please propose one additional confounder which both affects the treatment and outcome.
Make sure that the proposed confounder has a different meaning compared to existing confounders.
For this proposed confounder, please provide:
(1) A clear name for the confounder.
(2) A brief explanation of why it affects both treatment and outcome.";

const VAR_MANY: &str = "Based on your world knowledge, please propose {count} additional confounders which both affect the treatment and outcome.
Make sure that each proposed confounder has a different meaning compared to existing confounders and to each other.
For each proposed confounder, please provide:
(1) A clear name for the confounder.
(2) A brief explanation of why it affects both treatment and outcome.";

const DIST: &str = "Based on your world knowledge, please provide the distribution type of confounder {U_name}. For example:
(1) Continuous — e.g., Normal distribution
(2) Discrete — e.g., Multi-categorical distribution
(3) Binary — e.g., Bernoulli distribution";

const PARAM: &str = "The values of existing confounders, treatments, and outcomes are given by:
(1) Confounder Values: {D_X}
(2) Treatment Values: {D_T}
(3) Outcome Values: {D_Y}
For the confounder {U_name}, please specify {family_request} for each individual from which we can sample the confounder value.";

const OUT: &str = "The values of existing confounders, treatments, and outcomes are given by:
(1) Confounders: {D_X}
(2) Treatments: {D_T}
(3) Outcomes: {D_Y}
Based on the observed data and your world knowledge, please infer the values of the counterfactual outcome corresponding to the alternative value of treatment.";

const VALUES: &str = "The values of existing confounders, treatments, and outcomes are given by:
(1) Confounder Values: {D_X}
(2) Treatment Values: {D_T}
(3) Outcome Values: {D_Y}
For the new confounder {U_name}, please specify a value for each individual.";

const JSON_VAR: &str = "Respond with a single JSON object of the form {\"name\": \"<confounder name>\", \"explanation\": \"<why it affects both treatment and outcome>\"}.";

const JSON_VAR_MANY: &str = "Respond with a single JSON object of the form {\"confounders\": [{\"name\": \"<confounder name>\", \"explanation\": \"<why it affects both treatment and outcome>\"}, ...]} containing exactly {count} entries.";

const JSON_DIST: &str = "Respond with a single JSON object of the form {\"distribution\": \"gaussian\" | \"bernoulli\" | \"categorical\", \"levels\": <number of categories, categorical only>}.";

const JSON_OUT: &str = "Respond with a single JSON object of the form {\"counterfactuals\": [<value>, ...]} with exactly {count} numbers, one per individual in the order given.";

const JSON_VALUES: &str = "Respond with a single JSON object of the form {\"values\": [<value>, ...]} with exactly {count} numbers, one per individual in the order given.";

fn format_number(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" {
            "0".into()
        } else {
            s.to_owned()
        }
    }
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(", ")
}

fn family_request(family: &DistributionFamily) -> (String, String) {
    match family {
        DistributionFamily::Gaussian => (
            "a normal distribution (mean and standard deviation)".into(),
            "{\"parameters\": [{\"mean\": <mean>, \"std\": <standard deviation>}, ...]}".into(),
        ),
        DistributionFamily::Bernoulli => (
            "a Bernoulli distribution (probability that the value is 1)".into(),
            "{\"parameters\": [{\"p\": <probability>}, ...]}".into(),
        ),
        DistributionFamily::Categorical { levels } => (
            format!("a categorical distribution over {levels} levels (one probability per level)"),
            format!("{{\"parameters\": [{{\"probs\": [<{levels} probabilities summing to 1>]}}, ...]}}"),
        ),
    }
}

/// Renders one prompt. `variable` names the confounder for the kinds that
/// need it; `family` is required by parameter prompts.
pub fn render_prompt(
    kind: &PromptKind,
    ctx: &PromptContext,
    variable: Option<&str>,
    family: Option<&DistributionFamily>,
) -> Result<RenderedPrompt> {
    let x_names = join(&ctx.covariate_metas, |m| m.name.clone());
    let x_desc = ctx
        .covariate_metas
        .iter()
        .map(|m| format!("{} ({})", m.name, m.description))
        .collect::<Vec<_>>()
        .join("; ");
    let prefix = PREFIX
        .replace("{D_name}", &ctx.dataset_name)
        .replace("{D_intro}", &ctx.dataset_intro)
        .replace("{T_name}", &ctx.treatment_meta.name)
        .replace("{T_desc}", &ctx.treatment_meta.description)
        .replace("{Y_name}", &ctx.outcome_meta.name)
        .replace("{Y_desc}", &ctx.outcome_meta.description)
        .replace("{X_name}", if x_names.is_empty() { "none" } else { &x_names })
        .replace("{X_desc}", if x_desc.is_empty() { "no observed confounders" } else { &x_desc });

    let need_var = || variable.ok_or(Error::MissingPlaceholder("U_name"));
    let table = || -> Result<&ValueTable> {
        let t = ctx.values.as_ref().ok_or(Error::MissingPlaceholder("D_X"))?;
        t.check()?;
        if t.is_empty() {
            return Err(Error::MissingPlaceholder("D_X"));
        }
        Ok(t)
    };
    let fill_table = |template: &str, t: &ValueTable| {
        let rows = join(&t.covariates, |r| format!("[{}]", join(r, |v| format_number(*v))));
        template
            .replace("{D_X}", &rows)
            .replace("{D_T}", &join(&t.treatments, |v| v.to_string()))
            .replace("{D_Y}", &join(&t.outcomes, |v| format_number(*v)))
    };

    let body = match kind {
        PromptKind::Var => format!("{VAR}\n{JSON_VAR}"),
        PromptKind::VarMany(count) => {
            format!("{VAR_MANY}\n{JSON_VAR_MANY}").replace("{count}", &count.to_string())
        }
        PromptKind::Dist => format!("{DIST}\n{JSON_DIST}").replace("{U_name}", need_var()?),
        PromptKind::Param => {
            let family = family.ok_or(Error::MissingPlaceholder("family_request"))?;
            let t = table()?;
            let (request, schema) = family_request(family);
            let instruction = format!(
                "Respond with a single JSON object of the form {schema} with exactly {} entries, one per individual in the order given.",
                t.len()
            );
            fill_table(&format!("{PARAM}\n{instruction}"), t)
                .replace("{U_name}", need_var()?)
                .replace("{family_request}", &request)
        }
        PromptKind::Out => {
            let t = table()?;
            fill_table(&format!("{OUT}\n{JSON_OUT}"), t).replace("{count}", &t.len().to_string())
        }
        PromptKind::Values => {
            let t = table()?;
            fill_table(&format!("{VALUES}\n{JSON_VALUES}"), t)
                .replace("{U_name}", need_var()?)
                .replace("{count}", &t.len().to_string())
        }
    };
    Ok(RenderedPrompt { prefix, body })
}

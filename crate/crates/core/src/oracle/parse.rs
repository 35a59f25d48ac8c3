//! Extraction of structured payloads from free-text oracle replies.
//!
//! Every `{` in the reply is tried as the start of a JSON value; the first
//! object that matches the expected shape wins. Fenced code blocks need no
//! special handling because their opening brace is found the same way.

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::imputation::{DistributionFamily, UnitParams};

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Variable,
    Variables(usize),
    Distribution,
    Parameters { family: DistributionFamily, rows: usize },
    Counterfactuals { rows: usize },
    Values { rows: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub name: String,
    pub explanation: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Variable(Proposal),
    Variables(Vec<Proposal>),
    /// Raw family label plus the optional level count.
    Distribution { label: String, levels: Option<usize> },
    Parameters(Vec<UnitParams>),
    Numbers(Vec<f64>),
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> std::result::Result<&'a Value, String> {
    obj.get(key).ok_or_else(|| format!("missing field `{key}`"))
}

fn text(obj: &Map<String, Value>, key: &str) -> std::result::Result<String, String> {
    match field(obj, key)? {
        Value::String(s) if !s.trim().is_empty() => Ok(s.trim().to_owned()),
        _ => Err(format!("field `{key}` must be a nonempty string")),
    }
}

fn number(v: &Value, what: &str) -> std::result::Result<f64, String> {
    v.as_f64().ok_or_else(|| format!("{what} is not a number"))
}

fn array<'a>(obj: &'a Map<String, Value>, key: &str, rows: Option<usize>) -> std::result::Result<&'a Vec<Value>, String> {
    let arr = field(obj, key)?.as_array().ok_or_else(|| format!("field `{key}` must be an array"))?;
    if let Some(rows) = rows {
        if arr.len() != rows {
            return Err(format!("field `{key}` has {} entries, expected {rows}", arr.len()));
        }
    }
    Ok(arr)
}

fn proposal(v: &Value) -> std::result::Result<Proposal, String> {
    let obj = v.as_object().ok_or("proposal is not an object")?;
    Ok(Proposal {
        name: text(obj, "name")?,
        explanation: text(obj, "explanation")?,
    })
}

fn unit_params(v: &Value, family: &DistributionFamily, i: usize) -> std::result::Result<UnitParams, String> {
    let obj = v.as_object().ok_or_else(|| format!("entry {i} is not an object"))?;
    let num = |key: &str| number(field(obj, key).map_err(|e| format!("entry {i}: {e}"))?, &format!("entry {i} `{key}`"));
    Ok(match family {
        DistributionFamily::Gaussian => UnitParams::Gaussian {
            mean: num("mean")?,
            std: num("std")?,
        },
        DistributionFamily::Bernoulli => UnitParams::Bernoulli { p: num("p")? },
        DistributionFamily::Categorical { .. } => {
            let probs = field(obj, "probs")
                .map_err(|e| format!("entry {i}: {e}"))?
                .as_array()
                .ok_or_else(|| format!("entry {i} `probs` must be an array"))?
                .iter()
                .map(|p| number(p, &format!("entry {i} probability")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            UnitParams::Categorical { probs }
        }
    })
}

fn numbers(obj: &Map<String, Value>, key: &str, rows: usize) -> std::result::Result<Vec<f64>, String> {
    array(obj, key, Some(rows))?
        .iter()
        .enumerate()
        .map(|(i, v)| number(v, &format!("entry {i}")))
        .collect()
}

fn match_shape(value: &Value, shape: &Shape) -> std::result::Result<Payload, String> {
    let obj = value.as_object().ok_or("not a JSON object")?;
    match shape {
        Shape::Variable => proposal(value).map(Payload::Variable),
        Shape::Variables(k) => array(obj, "confounders", Some(*k))?
            .iter()
            .map(proposal)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Payload::Variables),
        Shape::Distribution => {
            let label = text(obj, "distribution")?;
            let levels = match obj.get("levels") {
                None | Some(Value::Null) => None,
                Some(v) => Some(v.as_u64().ok_or("field `levels` must be a nonnegative integer")? as usize),
            };
            Ok(Payload::Distribution { label, levels })
        }
        Shape::Parameters { family, rows } => array(obj, "parameters", Some(*rows))?
            .iter()
            .enumerate()
            .map(|(i, v)| unit_params(v, family, i))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Payload::Parameters),
        Shape::Counterfactuals { rows } => numbers(obj, "counterfactuals", *rows).map(Payload::Numbers),
        Shape::Values { rows } => numbers(obj, "values", *rows).map(Payload::Numbers),
    }
}

/// Returns the first JSON object in `raw` matching `shape`. On failure the
/// error lists the byte offset and rejection reason of every candidate.
pub fn parse_oracle_reply(raw: &str, shape: &Shape) -> Result<Payload> {
    let mut diagnostics = Vec::new();
    for (offset, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[offset..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(value)) => match match_shape(&value, shape) {
                Ok(payload) => return Ok(payload),
                Err(reason) => diagnostics.push(format!("offset {offset}: {reason}")),
            },
            Some(Err(e)) => diagnostics.push(format!("offset {offset}: invalid JSON ({e})")),
            None => {}
        }
    }
    if diagnostics.is_empty() {
        return Err(Error::Parse(format!(
            "no JSON object found in a {}-byte reply",
            raw.len()
        )));
    }
    Err(Error::Parse(diagnostics.join("; ")))
}

/// Maps common family labels onto the supported families.
pub fn family_from_label(label: &str, levels: Option<usize>) -> Option<DistributionFamily> {
    let l = label.to_lowercase();
    let has = |words: &[&str]| words.iter().any(|w| l.contains(w));
    if has(&["multi-categorical", "multicategorical", "categorical", "multinomial", "discrete"]) {
        return Some(DistributionFamily::Categorical {
            levels: levels.unwrap_or(0),
        });
    }
    if has(&["bernoulli", "binary", "boolean", "dichotomous"]) {
        return Some(DistributionFamily::Bernoulli);
    }
    if has(&["normal", "gauss", "continuous"]) {
        return Some(DistributionFamily::Gaussian);
    }
    None
}

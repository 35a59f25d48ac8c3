//! Dataset model shared by every stage: observed covariates, binary treatment,
//! factual outcome and the variable metadata used to render oracle prompts.
//!
//! Covariates are stored column-major. Generated confounders are always
//! appended on the right, so the observed/generated boundary is recoverable from
//! the column index alone.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, mix64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariableKind {
    Covariate,
    Treatment,
    Outcome,
    GeneratedConfounder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableMeta {
    pub name: String,
    pub description: String,
    pub kind: VariableKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

impl VariableMeta {
    pub fn new(name: impl Into<String>, description: impl Into<String>, kind: VariableKind) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            kind,
            explanation: None,
        }
    }

    pub fn covariate(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self::new(name, description, VariableKind::Covariate)
    }

    pub fn treatment(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self::new(name, description, VariableKind::Treatment)
    }

    pub fn outcome(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self::new(name, description, VariableKind::Outcome)
    }

    pub fn generated(
        name: impl Into<String>,
        description: impl Into<String>,
        explanation: impl Into<String>,
    ) -> Self {
        Self {
            explanation: Some(explanation.into()),
            ..Self::new(name, description, VariableKind::GeneratedConfounder)
        }
    }
}

/// Raw constituents of a dataset. No invariants are checked here.
#[derive(Clone, Debug)]
pub struct DatasetParts {
    pub name: String,
    pub intro: String,
    pub covariates: DMatrix<f64>,
    pub treatments: Vec<u8>,
    pub outcomes: Vec<f64>,
    pub covariate_meta: Vec<VariableMeta>,
    pub treatment_meta: VariableMeta,
    pub outcome_meta: VariableMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationalDataset {
    name: String,
    intro: String,
    covariates: DMatrix<f64>,
    treatments: Vec<u8>,
    outcomes: Vec<f64>,
    covariate_meta: Vec<VariableMeta>,
    treatment_meta: VariableMeta,
    outcome_meta: VariableMeta,
}

impl ObservationalDataset {
    /// Builds a dataset, rejecting it if [`validate_dataset`] reports anything.
    pub fn new(parts: DatasetParts) -> Result<Self> {
        let ds = Self::from_parts_unchecked(parts);
        let report = validate_dataset(&ds);
        if report.is_valid() {
            Ok(ds)
        } else {
            Err(Error::InvalidDataset(report.to_string()))
        }
    }

    /// Builds a dataset without validation; useful for inspecting broken input
    /// with [`validate_dataset`].
    pub fn from_parts_unchecked(parts: DatasetParts) -> Self {
        Self {
            name: parts.name,
            intro: parts.intro,
            covariates: parts.covariates,
            treatments: parts.treatments,
            outcomes: parts.outcomes,
            covariate_meta: parts.covariate_meta,
            treatment_meta: parts.treatment_meta,
            outcome_meta: parts.outcome_meta,
        }
    }

    pub fn into_parts(self) -> DatasetParts {
        DatasetParts {
            name: self.name,
            intro: self.intro,
            covariates: self.covariates,
            treatments: self.treatments,
            outcomes: self.outcomes,
            covariate_meta: self.covariate_meta,
            treatment_meta: self.treatment_meta,
            outcome_meta: self.outcome_meta,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn intro(&self) -> &str {
        &self.intro
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn d(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn treatments_f64(&self) -> Vec<f64> {
        self.treatments.iter().map(|&t| f64::from(t)).collect()
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn covariate_meta(&self) -> &[VariableMeta] {
        &self.covariate_meta
    }

    pub fn treatment_meta(&self) -> &VariableMeta {
        &self.treatment_meta
    }

    pub fn outcome_meta(&self) -> &VariableMeta {
        &self.outcome_meta
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.covariates.row(i).iter().copied().collect()
    }

    /// Number of control and treated units.
    pub fn arm_counts(&self) -> (usize, usize) {
        let treated = self.treatments.iter().filter(|&&t| t == 1).count();
        (self.treatments.len() - treated, treated)
    }

    /// True when every outcome is exactly 0 or 1.
    pub fn has_binary_outcome(&self) -> bool {
        self.outcomes.iter().all(|&y| y == 0.0 || y == 1.0)
    }

    /// Number of generated-confounder columns (always the rightmost ones).
    pub fn generated_count(&self) -> usize {
        self.covariate_meta
            .iter()
            .filter(|m| m.kind == VariableKind::GeneratedConfounder)
            .count()
    }

    pub fn has_name(&self, name: &str) -> bool {
        let lower = name.to_lowercase();
        self.all_meta().any(|m| m.name.to_lowercase() == lower)
    }

    fn all_meta(&self) -> impl Iterator<Item = &VariableMeta> {
        self.covariate_meta
            .iter()
            .chain(std::iter::once(&self.treatment_meta))
            .chain(std::iter::once(&self.outcome_meta))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let covariates = DMatrix::from_fn(rows.len(), self.d(), |i, j| self.covariates[(rows[i], j)]);
        Self {
            name: self.name.clone(),
            intro: self.intro.clone(),
            covariates,
            treatments: rows.iter().map(|&i| self.treatments[i]).collect(),
            outcomes: rows.iter().map(|&i| self.outcomes[i]).collect(),
            covariate_meta: self.covariate_meta.clone(),
            treatment_meta: self.treatment_meta.clone(),
            outcome_meta: self.outcome_meta.clone(),
        }
    }

    /// Keeps only the listed covariate columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let covariates = DMatrix::from_fn(self.n(), cols.len(), |i, j| self.covariates[(i, cols[j])]);
        Self {
            covariates,
            covariate_meta: cols.iter().map(|&j| self.covariate_meta[j].clone()).collect(),
            ..self.clone()
        }
    }

    pub fn with_outcomes(&self, outcomes: Vec<f64>) -> Result<Self> {
        if outcomes.len() != self.n() {
            return Err(Error::LengthMismatch {
                what: "outcomes",
                expected: self.n(),
                actual: outcomes.len(),
            });
        }
        Ok(Self {
            outcomes,
            ..self.clone()
        })
    }

    /// Stacks the rows of `other` under `self`. Schemas must agree by name.
    pub fn concat_rows(&self, other: &Self) -> Result<Self> {
        let names = |ds: &Self| ds.covariate_meta.iter().map(|m| m.name.clone()).collect::<Vec<_>>();
        if names(self) != names(other) {
            return Err(Error::DimensionMismatch("covariate schemas differ".into()));
        }
        let n = self.n() + other.n();
        let covariates = DMatrix::from_fn(n, self.d(), |i, j| {
            if i < self.n() {
                self.covariates[(i, j)]
            } else {
                other.covariates[(i - self.n(), j)]
            }
        });
        let mut treatments = self.treatments.clone();
        treatments.extend_from_slice(&other.treatments);
        let mut outcomes = self.outcomes.clone();
        outcomes.extend_from_slice(&other.outcomes);
        Ok(Self {
            covariates,
            treatments,
            outcomes,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Control,
    Treated,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValidationIssue {
    TooFewRows(usize),
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    NonFiniteCovariate { row: usize, col: usize },
    NonFiniteOutcome { row: usize },
    NonBinaryTreatment { row: usize, value: u8 },
    EmptyArm(Arm),
    EmptyName { index: usize },
    DuplicateName(String),
    MissingExplanation(String),
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooFewRows(n) => write!(f, "too few rows: {n} (need at least 2)"),
            Self::LengthMismatch {
                what,
                expected,
                actual,
            } => write!(f, "length mismatch: {what} has {actual} entries, expected {expected}"),
            Self::NonFiniteCovariate { row, col } => {
                write!(f, "non-finite covariate at ({row},{col})")
            }
            Self::NonFiniteOutcome { row } => write!(f, "non-finite outcome at row {row}"),
            Self::NonBinaryTreatment { row, value } => {
                write!(f, "treatment at row {row} is {value}, expected 0 or 1")
            }
            Self::EmptyArm(Arm::Control) => write!(f, "empty control arm"),
            Self::EmptyArm(Arm::Treated) => write!(f, "empty treated arm"),
            Self::EmptyName { index } => write!(f, "variable {index} has an empty name"),
            Self::DuplicateName(name) => write!(f, "duplicate variable name `{name}`"),
            Self::MissingExplanation(name) => {
                write!(f, "generated confounder `{name}` has no explanation")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

/// Lists every invariant violation. Never fails.
pub fn validate_dataset(ds: &ObservationalDataset) -> ValidationReport {
    let mut issues = Vec::new();
    let n = ds.covariates.nrows();
    let d = ds.covariates.ncols();
    if n < 2 {
        issues.push(ValidationIssue::TooFewRows(n));
    }
    for (what, actual) in [("treatments", ds.treatments.len()), ("outcomes", ds.outcomes.len())] {
        if actual != n {
            issues.push(ValidationIssue::LengthMismatch {
                what,
                expected: n,
                actual,
            });
        }
    }
    if ds.covariate_meta.len() != d {
        issues.push(ValidationIssue::LengthMismatch {
            what: "covariate metadata",
            expected: d,
            actual: ds.covariate_meta.len(),
        });
    }
    for j in 0..d {
        for i in 0..n {
            if !ds.covariates[(i, j)].is_finite() {
                issues.push(ValidationIssue::NonFiniteCovariate { row: i, col: j });
            }
        }
    }
    for (row, y) in ds.outcomes.iter().enumerate() {
        if !y.is_finite() {
            issues.push(ValidationIssue::NonFiniteOutcome { row });
        }
    }
    for (row, &value) in ds.treatments.iter().enumerate() {
        if value > 1 {
            issues.push(ValidationIssue::NonBinaryTreatment { row, value });
        }
    }
    if !ds.treatments.is_empty() {
        if !ds.treatments.contains(&0) {
            issues.push(ValidationIssue::EmptyArm(Arm::Control));
        }
        if !ds.treatments.contains(&1) {
            issues.push(ValidationIssue::EmptyArm(Arm::Treated));
        }
    }
    let mut seen = HashSet::new();
    for (index, meta) in ds.all_meta().enumerate() {
        if meta.name.trim().is_empty() {
            issues.push(ValidationIssue::EmptyName { index });
        } else if !seen.insert(meta.name.to_lowercase()) {
            issues.push(ValidationIssue::DuplicateName(meta.name.clone()));
        }
        if meta.kind == VariableKind::GeneratedConfounder
            && meta.explanation.as_deref().is_none_or(|e| e.trim().is_empty())
        {
            issues.push(ValidationIssue::MissingExplanation(meta.name.clone()));
        }
    }
    ValidationReport { issues }
}

/// Train/validation/test ratios plus shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            ratios: [train, val, test],
            seed,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        if self.ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidConfig(format!("split ratios must be positive: {:?}", self.ratios)));
        }
        let total: f64 = self.ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split ratios sum to {total}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Training plus validation rows, in that order.
    pub fn in_sample(&self) -> Vec<usize> {
        self.train.iter().chain(&self.val).copied().collect()
    }
}

/// Row key used for shuffling: depends only on the row's content and the seed,
/// so the partition does not depend on the in-memory row order.
fn row_key(ds: &ObservationalDataset, i: usize, seed: u64) -> u64 {
    let mut h = derive_seed(seed, 0x5eed);
    for v in ds.covariates.row(i).iter() {
        h = mix64(h ^ v.to_bits());
    }
    h = mix64(h ^ u64::from(ds.treatments[i]));
    mix64(h ^ ds.outcomes[i].to_bits())
}

/// Shuffles rows (by seeded content key) and cuts them into train/val/test.
/// Validation and test get `floor(ratio * n)` rows; the remainder goes to train.
pub fn split_indices(ds: &ObservationalDataset, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.check()?;
    let n = ds.n();
    if n < 10 {
        return Err(Error::InvalidDataset(format!("{n} rows is too few to split (need 10)")));
    }
    // The epsilon absorbs representation error such as 0.27 * 100 = 27.000000000000004
    // or 0.29 * 100 = 28.999999999999996.
    let size = |r: f64| (r * n as f64 + 1e-9).floor() as usize;
    let n_val = size(spec.ratios[1]);
    let n_test = size(spec.ratios[2]);
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(Error::InvalidDataset(format!(
            "{n} rows cannot give every split at least one row with ratios {:?}",
            spec.ratios
        )));
    }
    let mut order: Vec<(u64, usize)> = (0..n).map(|i| (row_key(ds, i, spec.seed), i)).collect();
    order.sort_unstable();
    let order: Vec<usize> = order.into_iter().map(|(_, i)| i).collect();
    let n_train = n - n_val - n_test;
    Ok(SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

pub fn split_dataset(
    ds: &ObservationalDataset,
    spec: &SplitSpec,
) -> Result<(ObservationalDataset, ObservationalDataset, ObservationalDataset)> {
    let idx = split_indices(ds, spec)?;
    Ok((ds.select_rows(&idx.train), ds.select_rows(&idx.val), ds.select_rows(&idx.test)))
}

/// Returns a new dataset with `values` appended as the rightmost covariate.
pub fn append_confounder(
    ds: &ObservationalDataset,
    values: &[f64],
    meta: VariableMeta,
) -> Result<ObservationalDataset> {
    if values.len() != ds.n() {
        return Err(Error::LengthMismatch {
            what: "confounder values",
            expected: ds.n(),
            actual: values.len(),
        });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("confounder `{}` at row {i}", meta.name)));
    }
    if meta.kind != VariableKind::GeneratedConfounder {
        return Err(Error::InvalidConfig(format!(
            "`{}` must be a generated confounder to be appended",
            meta.name
        )));
    }
    if meta.explanation.as_deref().is_none_or(|e| e.trim().is_empty()) {
        return Err(Error::InvalidConfig(format!("`{}` has no explanation", meta.name)));
    }
    if meta.name.trim().is_empty() {
        return Err(Error::InvalidConfig("confounder name is empty".into()));
    }
    if ds.has_name(&meta.name) {
        return Err(Error::DuplicateName(meta.name));
    }
    let d = ds.d();
    let covariates = ds.covariates.clone().insert_column(d, 0.0);
    let mut covariates = covariates;
    covariates.column_mut(d).copy_from_slice(values);
    let mut covariate_meta = ds.covariate_meta.clone();
    covariate_meta.push(meta);
    Ok(ObservationalDataset {
        covariates,
        covariate_meta,
        ..ds.clone()
    })
}

/// Column names for the CSV ingestion schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub treatment: String,
    pub outcome: String,
}

/// JSON sidecar with the free-text metadata that prompts need.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub dataset_intro: String,
    #[serde(default)]
    pub variables: std::collections::BTreeMap<String, String>,
}

impl DatasetSidecar {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Reads a comma-separated file with a header row. Missing or unparsable
/// values reject the whole file.
pub fn read_csv(path: &Path, schema: &CsvSchema, sidecar: Option<&DatasetSidecar>) -> Result<ObservationalDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidDataset(format!("column `{name}` not found in {}", path.display())))
    };
    let t_col = find(&schema.treatment)?;
    let y_col = find(&schema.outcome)?;
    let x_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != t_col && c != y_col).collect();

    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "missing value at row {row}, column `{}`",
                    headers[c]
                )));
            }
            raw.parse::<f64>().map_err(|_| {
                Error::InvalidDataset(format!("unparsable value `{raw}` at row {row}, column `{}`", headers[c]))
            })
        };
        let t = field(t_col)?;
        if t != 0.0 && t != 1.0 {
            return Err(Error::InvalidDataset(format!("treatment at row {row} is {t}, expected 0 or 1")));
        }
        ts.push(t as u8);
        ys.push(field(y_col)?);
        xs.push(x_cols.iter().map(|&c| field(c)).collect::<Result<_>>()?);
    }
    let n = xs.len();
    let covariates = DMatrix::from_fn(n, x_cols.len(), |i, j| xs[i][j]);
    let describe = |name: &str| {
        sidecar
            .and_then(|s| s.variables.get(name).cloned())
            .unwrap_or_else(|| name.to_owned())
    };
    let parts = DatasetParts {
        name: sidecar
            .map(|s| s.name.clone())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            }),
        intro: sidecar.map(|s| s.dataset_intro.clone()).unwrap_or_default(),
        covariates,
        treatments: ts,
        outcomes: ys,
        covariate_meta: x_cols
            .iter()
            .map(|&c| VariableMeta::covariate(headers[c].clone(), describe(&headers[c])))
            .collect(),
        treatment_meta: VariableMeta::treatment(schema.treatment.clone(), describe(&schema.treatment)),
        outcome_meta: VariableMeta::outcome(schema.outcome.clone(), describe(&schema.outcome)),
    };
    ObservationalDataset::new(parts)
}

/// Writes covariates, treatment and outcome as one CSV in the ingestion schema.
pub fn write_csv(ds: &ObservationalDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ds.covariate_meta.iter().map(|m| m.name.clone()).collect();
    header.push(ds.treatment_meta.name.clone());
    header.push(ds.outcome_meta.name.clone());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.covariates.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.treatments[i].to_string());
        rec.push(ds.outcomes[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

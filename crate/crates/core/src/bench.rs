//! Semi-synthetic benchmarks with known potential outcomes and controllable
//! hidden confounding.
//!
//! Twins-style data: `X ~ N(0, I)`, proxy `Z` uniform on `1..=levels`,
//! `T ~ Bern(sigmoid(w_o'x + w_h (z/10 - 0.1)))` and
//! `y^t = beta0'x + beta_z z/10 + t (tau0 + beta_tau'x) + eps`. `Z` is kept as a
//! hidden column.
//!
//! Jobs-style data: a randomized experiment stacked with observational
//! controls. Only the randomized subset is used for evaluation.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, DatasetParts, ObservationalDataset, SplitIndices, SplitSpec, VariableMeta};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, label_hash, rng_from};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A covariate withheld from the base dataset, kept for oracles and diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenColumn {
    /// Index in the full column space (base columns first, then proxies).
    pub original_index: usize,
    pub meta: VariableMeta,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkDataset {
    pub base: ObservationalDataset,
    /// Full-space index of each base column.
    pub column_ids: Vec<usize>,
    /// Ground-truth potential outcomes; absent for data built from real records.
    pub true_y0: Option<Vec<f64>>,
    pub true_y1: Option<Vec<f64>>,
    /// Membership in the randomized subset used for ATT and policy risk.
    pub randomized_mask: Vec<bool>,
    pub hidden: Vec<HiddenColumn>,
    pub selection: Option<SelectionBiasParams>,
}

impl BenchmarkDataset {
    pub fn n(&self) -> usize {
        self.base.n()
    }

    /// Checks consistency, lengths and index disjointness.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let check_len = |what: &'static str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::LengthMismatch {
                    what,
                    expected: n,
                    actual: len,
                })
            }
        };
        check_len("randomized mask", self.randomized_mask.len())?;
        if self.column_ids.len() != self.base.d() {
            return Err(Error::DimensionMismatch(format!(
                "{} column ids for {} base columns",
                self.column_ids.len(),
                self.base.d()
            )));
        }
        for h in &self.hidden {
            check_len("hidden column", h.values.len())?;
            if self.column_ids.contains(&h.original_index) {
                return Err(Error::InvalidDataset(format!(
                    "hidden column {} is also present in the base",
                    h.original_index
                )));
            }
        }
        match (&self.true_y0, &self.true_y1) {
            (Some(y0), Some(y1)) => {
                check_len("true_y0", y0.len())?;
                check_len("true_y1", y1.len())?;
                for i in 0..n {
                    let expected = if self.base.treatments()[i] == 1 { y1[i] } else { y0[i] };
                    if self.base.outcomes()[i] != expected {
                        return Err(Error::InvalidDataset(format!("consistency violated at row {i}")));
                    }
                }
            }
            (None, None) => {}
            _ => return Err(Error::InvalidDataset("only one potential-outcome vector present".into())),
        }
        Ok(())
    }

    /// Per-unit true effects, when known.
    pub fn true_effects(&self) -> Option<Vec<f64>> {
        match (&self.true_y0, &self.true_y1) {
            (Some(y0), Some(y1)) => Some(y1.iter().zip(y0).map(|(a, b)| a - b).collect()),
            _ => None,
        }
    }

    /// True counterfactual outcome of every unit, when known.
    pub fn true_counterfactuals(&self) -> Option<Vec<f64>> {
        let (y0, y1) = (self.true_y0.as_ref()?, self.true_y1.as_ref()?);
        Some(
            self.base
                .treatments()
                .iter()
                .enumerate()
                .map(|(i, &t)| if t == 1 { y0[i] } else { y1[i] })
                .collect(),
        )
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            base: self.base.select_rows(rows),
            column_ids: self.column_ids.clone(),
            true_y0: self.true_y0.as_ref().map(pick),
            true_y1: self.true_y1.as_ref().map(pick),
            randomized_mask: rows.iter().map(|&i| self.randomized_mask[i]).collect(),
            hidden: self
                .hidden
                .iter()
                .map(|h| HiddenColumn {
                    values: pick(&h.values),
                    ..h.clone()
                })
                .collect(),
            selection: self.selection.clone(),
        }
    }

    pub fn split(&self, spec: &SplitSpec) -> Result<(SplitIndices, [Self; 3])> {
        let idx = split_indices(&self.base, spec)?;
        let parts = [
            self.select_rows(&idx.train),
            self.select_rows(&idx.val),
            self.select_rows(&idx.test),
        ];
        Ok((idx, parts))
    }

    /// Moves base column `col` into the hidden set.
    pub fn hide_column(&self, col: usize) -> Result<Self> {
        if col >= self.base.d() {
            return Err(Error::DimensionMismatch(format!("column {col} out of range ({})", self.base.d())));
        }
        let keep: Vec<usize> = (0..self.base.d()).filter(|&j| j != col).collect();
        let mut hidden = self.hidden.clone();
        hidden.push(HiddenColumn {
            original_index: self.column_ids[col],
            meta: self.base.covariate_meta()[col].clone(),
            values: self.base.covariates().column(col).iter().copied().collect(),
        });
        Ok(Self {
            base: self.base.select_columns(&keep),
            column_ids: keep.iter().map(|&j| self.column_ids[j]).collect(),
            hidden,
            ..self.clone()
        })
    }
}

/// Selection-bias weights for the treatment assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionBiasParams {
    pub w_o: Vec<f64>,
    pub w_h: f64,
}

impl SelectionBiasParams {
    /// `w_o ~ N(0, 0.1 I)` and `w_h ~ N(5, 0.1)`, with 0.1 read as a variance.
    pub fn draw(d: usize, seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, label_hash("selection")));
        let sd = 0.1f64.sqrt();
        let w_o = (0..d).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let w_h = 5.0 + sd * rng.sample::<f64, _>(StandardNormal);
        Self { w_o, w_h }
    }

    pub fn probability(&self, x: &[f64], z: u32) -> f64 {
        let lin: f64 = self.w_o.iter().zip(x).map(|(w, v)| w * v).sum();
        sigmoid(lin + self.w_h * (f64::from(z) / 10.0 - 0.1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "params")]
pub enum SelectionSource {
    /// Draw `w_o`, `w_h` from their priors using the spec seed.
    Drawn,
    Fixed(SelectionBiasParams),
}

/// Coefficients of the structural outcome surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCoefficients {
    pub beta0: Vec<f64>,
    pub beta_z: f64,
    pub tau0: f64,
    pub beta_tau: Vec<f64>,
}

impl OutcomeCoefficients {
    pub fn zero(d: usize) -> Self {
        Self {
            beta0: vec![0.0; d],
            beta_z: 0.0,
            tau0: 0.0,
            beta_tau: vec![0.0; d],
        }
    }

    /// Seeded coefficients: `beta0 ~ N(0, 1/d)`, `beta_tau ~ N(0, 0.25/d)`.
    pub fn random(d: usize, beta_z: f64, tau0: f64, seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, label_hash("outcome-coefficients")));
        let scale = 1.0 / (d.max(1) as f64).sqrt();
        let beta0 = (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let beta_tau = (0..d).map(|_| 0.5 * scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            beta0,
            beta_z,
            tau0,
            beta_tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinsStyleSpec {
    pub n: usize,
    pub d: usize,
    pub proxy_levels: u32,
    pub w_outcome: OutcomeCoefficients,
    pub noise_sd: f64,
    pub seed: u64,
    #[serde(default = "drawn")]
    pub selection: SelectionSource,
}

fn drawn() -> SelectionSource {
    SelectionSource::Drawn
}

impl TwinsStyleSpec {
    /// A spec with seeded outcome coefficients and a strong hidden-proxy effect.
    pub fn standard(n: usize, d: usize, seed: u64) -> Self {
        Self {
            n,
            d,
            proxy_levels: 10,
            w_outcome: OutcomeCoefficients::random(d, 4.0, 1.0, seed),
            noise_sd: 0.5,
            seed,
            selection: SelectionSource::Drawn,
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n < 10 {
            return bad(format!("n = {} (need at least 10)", self.n));
        }
        if self.proxy_levels < 2 {
            return bad(format!("proxy_levels = {} (need at least 2)", self.proxy_levels));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd = {} (must be positive)", self.noise_sd));
        }
        if self.w_outcome.beta0.len() != self.d || self.w_outcome.beta_tau.len() != self.d {
            return bad(format!("outcome coefficients do not have length d = {}", self.d));
        }
        if let SelectionSource::Fixed(p) = &self.selection {
            if p.w_o.len() != self.d {
                return bad(format!("w_o has length {}, expected {}", p.w_o.len(), self.d));
            }
        }
        Ok(())
    }
}

/// Draws `T_i ~ Bern(sigmoid(w_o'x_i + w_h (z_i/10 - 0.1)))` independently.
pub fn assign_selection_bias(
    x: &DMatrix<f64>,
    z: &[u32],
    params: &SelectionBiasParams,
    levels: u32,
    seed: u64,
) -> Result<Vec<u8>> {
    if z.len() != x.nrows() {
        return Err(Error::LengthMismatch {
            what: "proxy",
            expected: x.nrows(),
            actual: z.len(),
        });
    }
    if params.w_o.len() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "w_o has length {}, covariates have {} columns",
            params.w_o.len(),
            x.ncols()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariates".into()));
    }
    if let Some(bad) = z.iter().find(|&&v| v < 1 || v > levels) {
        return Err(Error::InvalidDataset(format!("proxy level {bad} outside 1..={levels}")));
    }
    let mut rng = rng_from(derive_seed(seed, label_hash("treatment")));
    Ok((0..x.nrows())
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            u8::from(rng.random::<f64>() < params.probability(&row, z[i]))
        })
        .collect())
}

pub fn covariate_names(d: usize) -> Vec<VariableMeta> {
    (0..d)
        .map(|j| VariableMeta::covariate(format!("x{j}"), format!("Standardized maternal and birth record feature {j}")))
        .collect()
}

pub fn generate_twins_style(spec: &TwinsStyleSpec) -> Result<BenchmarkDataset> {
    spec.check()?;
    let (n, d) = (spec.n, spec.d);
    let mut rng = rng_from(derive_seed(spec.seed, label_hash("twins-covariates")));
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z: Vec<u32> = (0..n).map(|_| rng.random_range(1..=spec.proxy_levels)).collect();
    let params = match &spec.selection {
        SelectionSource::Drawn => SelectionBiasParams::draw(d, spec.seed),
        SelectionSource::Fixed(p) => p.clone(),
    };
    let t = assign_selection_bias(&x, &z, &params, spec.proxy_levels, spec.seed)?;

    let w = &spec.w_outcome;
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut nrng = rng_from(derive_seed(spec.seed, label_hash("twins-noise")));
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let base: f64 = row.iter().zip(&w.beta0).map(|(a, b)| a * b).sum::<f64>() + w.beta_z * f64::from(z[i]) / 10.0;
        let tau: f64 = w.tau0 + row.iter().zip(&w.beta_tau).map(|(a, b)| a * b).sum::<f64>();
        y0.push(base + noise.sample(&mut nrng));
        y1.push(base + tau + noise.sample(&mut nrng));
    }
    let y: Vec<f64> = (0..n).map(|i| if t[i] == 1 { y1[i] } else { y0[i] }).collect();

    let base = ObservationalDataset::new(DatasetParts {
        name: "twins-style".into(),
        intro: "Semi-synthetic births dataset built from twin pairs. Each unit is one twin; the treatment marks \
                the heavier twin of the pair and the outcome is a continuous health risk score recorded in \
                the first year of life."
            .into(),
        covariates: x,
        treatments: t,
        outcomes: y,
        covariate_meta: covariate_names(d),
        treatment_meta: VariableMeta::treatment("heavier_twin", "Whether the unit is the heavier twin of the pair"),
        outcome_meta: VariableMeta::outcome("risk_score", "Health risk score in the first year of life"),
    })?;
    let hidden = HiddenColumn {
        original_index: d,
        meta: VariableMeta::covariate(
            "gestat",
            format!("Gestational age of the pregnancy, binned into {} categories", spec.proxy_levels),
        ),
        values: z.iter().map(|&v| f64::from(v)).collect(),
    };
    let ds = BenchmarkDataset {
        base,
        column_ids: (0..d).collect(),
        true_y0: Some(y0),
        true_y1: Some(y1),
        randomized_mask: vec![true; n],
        hidden: vec![hidden],
        selection: Some(params),
    };
    ds.validate()?;
    Ok(ds)
}

/// Stacks a randomized experiment with observational controls.
pub fn build_jobs_style(
    experimental: &ObservationalDataset,
    observational_controls: Option<&ObservationalDataset>,
) -> Result<BenchmarkDataset> {
    let (c, t) = experimental.arm_counts();
    if c == 0 || t == 0 {
        return Err(Error::EmptyArm(if c == 0 { "control" } else { "treated" }));
    }
    let (base, n_obs) = match observational_controls {
        None => (experimental.clone(), 0),
        Some(obs) if obs.n() == 0 => (experimental.clone(), 0),
        Some(obs) => {
            if let Some(i) = obs.treatments().iter().position(|&t| t != 0) {
                return Err(Error::InvalidDataset(format!("observational row {i} is treated")));
            }
            (experimental.concat_rows(obs)?, obs.n())
        }
    };
    let mut randomized_mask = vec![true; experimental.n()];
    randomized_mask.extend(std::iter::repeat_n(false, n_obs));
    Ok(BenchmarkDataset {
        column_ids: (0..base.d()).collect(),
        base,
        true_y0: None,
        true_y1: None,
        randomized_mask,
        hidden: Vec::new(),
        selection: None,
    })
}

/// Synthetic analog of the Jobs construction. Observational controls differ
/// from the experimental population in a hidden `motivation` trait that also
/// drives the binary employment outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobsStyleSpec {
    pub n_treated: usize,
    pub n_randomized_control: usize,
    pub n_observational: usize,
    pub d: usize,
    /// Mean shift of the hidden trait in the observational part.
    pub hidden_shift: f64,
    /// Effect of the hidden trait on the outcome logit.
    pub hidden_effect: f64,
    pub seed: u64,
}

impl JobsStyleSpec {
    pub fn standard(seed: u64) -> Self {
        Self {
            n_treated: 297,
            n_randomized_control: 425,
            n_observational: 2490,
            d: 8,
            hidden_shift: -1.5,
            hidden_effect: 1.5,
            seed,
        }
    }
}

/// Generates Jobs-style data. Potential outcomes are kept because they are
/// known here, and the hidden trait is stored as a hidden column.
pub fn generate_jobs_style(spec: &JobsStyleSpec) -> Result<BenchmarkDataset> {
    if spec.n_treated == 0 || spec.n_randomized_control == 0 {
        return Err(Error::InvalidConfig("both randomized arms need units".into()));
    }
    let d = spec.d;
    let mut rng = rng_from(derive_seed(spec.seed, label_hash("jobs")));
    let beta = OutcomeCoefficients::random(d, 0.0, 0.0, derive_seed(spec.seed, 1));
    let n_exp = spec.n_treated + spec.n_randomized_control;
    let n = n_exp + spec.n_observational;

    let mut arms: Vec<u8> = (0..n_exp).map(|i| u8::from(i < spec.n_treated)).collect();
    arms.shuffle(&mut rng);
    let mut x = DMatrix::zeros(n, d);
    let mut u = vec![0.0; n];
    let (mut t, mut y, mut y0, mut y1) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let observational = i >= n_exp;
        let shift = if observational { 0.5 } else { 0.0 };
        for j in 0..d {
            x[(i, j)] = shift + rng.sample::<f64, _>(StandardNormal);
        }
        u[i] = rng.sample::<f64, _>(StandardNormal) + if observational { spec.hidden_shift } else { 0.0 };
        let lin: f64 = x.row(i).iter().zip(&beta.beta0).map(|(a, b)| a * b).sum::<f64>() + spec.hidden_effect * u[i];
        let tau: f64 = 0.8 + x.row(i).iter().zip(&beta.beta_tau).map(|(a, b)| a * b).sum::<f64>();
        let v: f64 = rng.random();
        let p0 = sigmoid(lin);
        let p1 = sigmoid(lin + tau);
        y0.push(f64::from(u8::from(v < p0)));
        y1.push(f64::from(u8::from(v < p1)));
        let ti = if observational { 0 } else { arms[i] };
        t.push(ti);
        y.push(if ti == 1 { y1[i] } else { y0[i] });
    }
    let mut covariate_meta = covariate_names(d);
    for (j, m) in covariate_meta.iter_mut().enumerate() {
        m.description = format!("Standardized demographic or earnings feature {j}");
    }
    covariate_meta.push(VariableMeta::covariate(
        "motivation",
        "Latent motivation to find employment",
    ));
    let mut full = DMatrix::zeros(n, d + 1);
    full.columns_mut(0, d).copy_from(&x);
    full.column_mut(d).copy_from_slice(&u);
    let base = ObservationalDataset::new(DatasetParts {
        name: "jobs-style".into(),
        intro: "Job training dataset combining a randomized experiment with survey-based controls. The treatment \
                is participation in a job training program and the outcome is employment status after the \
                program."
            .into(),
        covariates: full,
        treatments: t,
        outcomes: y,
        covariate_meta,
        treatment_meta: VariableMeta::treatment("training", "Participation in the job training program"),
        outcome_meta: VariableMeta::outcome("employed", "Employment status after the program (1 = employed)"),
    })?;
    let ds = BenchmarkDataset {
        column_ids: (0..=d).collect(),
        base,
        true_y0: Some(y0),
        true_y1: Some(y1),
        randomized_mask: (0..n).map(|i| i < n_exp).collect(),
        hidden: Vec::new(),
        selection: None,
    }
    .hide_column(d)?;
    ds.validate()?;
    Ok(ds)
}

/// Hides `k` base columns chosen uniformly without replacement. For a fixed
/// seed the removed sets are nested in `k`.
pub fn remove_confounders(ds: &BenchmarkDataset, k: usize, seed: u64) -> Result<BenchmarkDataset> {
    let d = ds.base.d();
    if k > d {
        return Err(Error::InvalidConfig(format!("cannot remove {k} of {d} columns")));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng_from(derive_seed(seed, label_hash("remove"))));
    let chosen: Vec<usize> = order[..k].to_vec();
    let mut out = ds.clone();
    for &col in &chosen {
        let id = ds.column_ids[col];
        let pos = out.column_ids.iter().position(|&c| c == id).expect("column id present");
        out = out.hide_column(pos)?;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct BenchMeta {
    name: String,
    dataset_intro: String,
    covariates: Vec<VariableMeta>,
    column_ids: Vec<usize>,
    treatment: VariableMeta,
    outcome: VariableMeta,
    hidden: Vec<HiddenMeta>,
    selection: Option<SelectionBiasParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct HiddenMeta {
    original_index: usize,
    meta: VariableMeta,
}

fn write_columns(path: &Path, header: &[String], cols: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    let n = cols.first().map_or(0, Vec::len);
    for i in 0..n {
        w.write_record(cols.iter().map(|c| c[i].as_str()))?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_all(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

/// Writes `covariates.csv`, `treatment_outcome.csv`, `ground_truth.csv`,
/// `hidden.csv` and `meta.json` into `dir`.
pub fn write_benchmark_dir(ds: &BenchmarkDataset, dir: &Path, spec: Option<serde_json::Value>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let b = &ds.base;
    let cov_cols: Vec<Vec<String>> = (0..b.d())
        .map(|j| b.covariates().column(j).iter().map(|v| v.to_string()).collect())
        .collect();
    let names: Vec<String> = b.covariate_meta().iter().map(|m| m.name.clone()).collect();
    write_columns(&dir.join("covariates.csv"), &names, &cov_cols)?;
    write_columns(
        &dir.join("treatment_outcome.csv"),
        &["t".into(), "y".into()],
        &[b.treatments().iter().map(|t| t.to_string()).collect(), fmt_all(b.outcomes())],
    )?;
    let opt = |v: &Option<Vec<f64>>| v.as_ref().map_or_else(|| vec![String::new(); b.n()], |v| fmt_all(v));
    write_columns(
        &dir.join("ground_truth.csv"),
        &["y0".into(), "y1".into(), "randomized".into()],
        &[
            opt(&ds.true_y0),
            opt(&ds.true_y1),
            ds.randomized_mask.iter().map(|&m| u8::from(m).to_string()).collect(),
        ],
    )?;
    write_columns(
        &dir.join("hidden.csv"),
        &ds.hidden.iter().map(|h| h.meta.name.clone()).collect::<Vec<_>>(),
        &ds.hidden.iter().map(|h| fmt_all(&h.values)).collect::<Vec<_>>(),
    )?;
    let meta = BenchMeta {
        name: b.name().to_owned(),
        dataset_intro: b.intro().to_owned(),
        covariates: b.covariate_meta().to_vec(),
        column_ids: ds.column_ids.clone(),
        treatment: b.treatment_meta().clone(),
        outcome: b.outcome_meta().clone(),
        hidden: ds
            .hidden
            .iter()
            .map(|h| HiddenMeta {
                original_index: h.original_index,
                meta: h.meta.clone(),
            })
            .collect(),
        selection: ds.selection.clone(),
        spec,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn read_columns(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let width = r.headers()?.len();
    let mut cols = vec![Vec::new(); width];
    for rec in r.records() {
        let rec = rec?;
        for (j, col) in cols.iter_mut().enumerate() {
            col.push(rec.get(j).unwrap_or("").to_owned());
        }
    }
    Ok(cols)
}

fn parse_col(col: &[String], what: &str) -> Result<Vec<f64>> {
    col.iter()
        .enumerate()
        .map(|(i, s)| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidDataset(format!("bad {what} value `{s}` at row {i}")))
        })
        .collect()
}

pub fn read_benchmark_dir(dir: &Path) -> Result<BenchmarkDataset> {
    let meta: BenchMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let to = read_columns(&dir.join("treatment_outcome.csv"))?;
    if to.len() != 2 {
        return Err(Error::InvalidDataset("treatment_outcome.csv needs columns t,y".into()));
    }
    let n = to[0].len();
    let cov = if meta.covariates.is_empty() {
        Vec::new()
    } else {
        read_columns(&dir.join("covariates.csv"))?
    };
    let mut x = DMatrix::zeros(n, cov.len());
    for (j, col) in cov.iter().enumerate() {
        for (i, v) in parse_col(col, "covariate")?.into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let treatments = parse_col(&to[0], "treatment")?
        .into_iter()
        .map(|t| if t == 1.0 { 1 } else if t == 0.0 { 0 } else { 2 })
        .collect();
    let base = ObservationalDataset::new(DatasetParts {
        name: meta.name,
        intro: meta.dataset_intro,
        covariates: x,
        treatments,
        outcomes: parse_col(&to[1], "outcome")?,
        covariate_meta: meta.covariates,
        treatment_meta: meta.treatment,
        outcome_meta: meta.outcome,
    })?;
    let gt = read_columns(&dir.join("ground_truth.csv"))?;
    let truth = |col: &[String]| -> Result<Option<Vec<f64>>> {
        if col.iter().all(|s| s.trim().is_empty()) {
            Ok(None)
        } else {
            parse_col(col, "ground truth").map(Some)
        }
    };
    let hidden_cols = if meta.hidden.is_empty() {
        Vec::new()
    } else {
        read_columns(&dir.join("hidden.csv"))?
    };
    let hidden = meta
        .hidden
        .into_iter()
        .zip(hidden_cols)
        .map(|(h, col)| {
            Ok(HiddenColumn {
                original_index: h.original_index,
                meta: h.meta,
                values: parse_col(&col, "hidden")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = BenchmarkDataset {
        base,
        column_ids: meta.column_ids,
        true_y0: truth(&gt[0])?,
        true_y1: truth(&gt[1])?,
        randomized_mask: gt[2].iter().map(|s| s.trim() == "1").collect(),
        hidden,
        selection: meta.selection,
    };
    ds.validate()?;
    Ok(ds)
}

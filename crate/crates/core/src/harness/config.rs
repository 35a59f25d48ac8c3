//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{
    generate_jobs_style, generate_twins_style, read_benchmark_dir, BenchmarkDataset, JobsStyleSpec,
    OutcomeCoefficients, SelectionSource, TwinsStyleSpec,
};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, EstimatorKind};
use crate::oracle::http::HttpOracle;
use crate::oracle::scripted::{RuleOracle, RuleSpec, ScriptSpec};
use crate::oracle::{OracleConfig, OracleSession};
use crate::pipeline::ProciConfig;

/// Twins-style generator settings; the per-run seed drives every draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinsConfig {
    pub n: usize,
    pub d: usize,
    #[serde(default = "default_levels")]
    pub proxy_levels: u32,
    /// Outcome coefficient of the hidden proxy.
    #[serde(default = "default_beta_z")]
    pub beta_z: f64,
    /// Constant part of the treatment effect.
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    #[serde(default = "default_selection")]
    pub selection: SelectionSource,
    /// Fixed outcome coefficients; when set, `beta_z` and `tau0` are ignored
    /// and nothing is drawn for the outcome surface.
    #[serde(default)]
    pub outcome: Option<OutcomeCoefficients>,
}

fn default_levels() -> u32 {
    10
}
fn default_beta_z() -> f64 {
    4.0
}
fn default_tau0() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.5
}
fn default_selection() -> SelectionSource {
    SelectionSource::Drawn
}

impl TwinsConfig {
    pub fn spec(&self, seed: u64) -> TwinsStyleSpec {
        TwinsStyleSpec {
            n: self.n,
            d: self.d,
            proxy_levels: self.proxy_levels,
            w_outcome: self
                .outcome
                .clone()
                .unwrap_or_else(|| OutcomeCoefficients::random(self.d, self.beta_z, self.tau0, seed)),
            noise_sd: self.noise_sd,
            seed,
            selection: self.selection.clone(),
        }
    }
}

/// Jobs-style generator settings; missing fields take the standard sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobsConfig {
    #[serde(default = "jobs_n_treated")]
    pub n_treated: usize,
    #[serde(default = "jobs_n_control")]
    pub n_randomized_control: usize,
    #[serde(default = "jobs_n_obs")]
    pub n_observational: usize,
    #[serde(default = "jobs_d")]
    pub d: usize,
    #[serde(default = "jobs_shift")]
    pub hidden_shift: f64,
    #[serde(default = "jobs_effect")]
    pub hidden_effect: f64,
}

fn jobs_n_treated() -> usize {
    JobsStyleSpec::standard(0).n_treated
}
fn jobs_n_control() -> usize {
    JobsStyleSpec::standard(0).n_randomized_control
}
fn jobs_n_obs() -> usize {
    JobsStyleSpec::standard(0).n_observational
}
fn jobs_d() -> usize {
    JobsStyleSpec::standard(0).d
}
fn jobs_shift() -> f64 {
    JobsStyleSpec::standard(0).hidden_shift
}
fn jobs_effect() -> f64 {
    JobsStyleSpec::standard(0).hidden_effect
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    TwinsStyle(TwinsConfig),
    JobsStyle(JobsConfig),
    /// A benchmark directory as written by `gen`; identical for every seed.
    Directory { path: PathBuf },
}

impl DatasetConfig {
    pub fn build(&self, seed: u64) -> Result<BenchmarkDataset> {
        match self {
            Self::TwinsStyle(c) => generate_twins_style(&c.spec(seed)),
            Self::JobsStyle(c) => generate_jobs_style(&JobsStyleSpec {
                n_treated: c.n_treated,
                n_randomized_control: c.n_randomized_control,
                n_observational: c.n_observational,
                d: c.d,
                hidden_shift: c.hidden_shift,
                hidden_effect: c.hidden_effect,
                seed,
            }),
            Self::Directory { path } => read_benchmark_dir(path),
        }
    }
}

/// Where oracle replies come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum OracleSpec {
    /// A script file holding a replay list or a rule specification.
    Scripted { path: PathBuf },
    /// Inline rule specification.
    Rules(RuleSpec),
    /// A live chat-completion endpoint.
    Http(OracleConfig),
}

impl OracleSpec {
    /// Parses `scripted:<path>` or `http:<url>`. An `http:` spec keeps the
    /// other endpoint settings of `current` when it is also an endpoint.
    pub fn parse_flag(flag: &str, current: Option<&OracleSpec>) -> Result<Self> {
        if let Some(path) = flag.strip_prefix("scripted:") {
            return Ok(Self::Scripted { path: path.into() });
        }
        if let Some(url) = flag.strip_prefix("http:") {
            let base = match current {
                Some(Self::Http(c)) => c.clone(),
                _ => OracleConfig::new("", "gpt-4o"),
            };
            return Ok(Self::Http(OracleConfig {
                endpoint_url: url.to_owned(),
                ..base
            }));
        }
        Err(Error::InvalidConfig(format!(
            "oracle `{flag}` must be `scripted:<path>` or `http:<url>`"
        )))
    }

    pub fn is_live(&self) -> bool {
        matches!(self, Self::Http(_))
    }

    /// A fresh session; rule oracles are bound to `bench`.
    pub fn session(&self, bench: &BenchmarkDataset, batch_size: usize) -> Result<OracleSession> {
        let oracle: Box<dyn crate::oracle::Oracle> = match self {
            Self::Scripted { path } => ScriptSpec::read(path)?.build(Some(bench))?,
            Self::Rules(spec) => Box::new(RuleOracle::new(bench.clone(), spec.clone())?),
            Self::Http(cfg) => Box::new(HttpOracle::new(cfg.clone())?),
        };
        OracleSession::new(oracle, batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProciSettings {
    #[serde(default)]
    pub pipeline: ProciConfig,
    pub oracle: OracleSpec,
    #[serde(default = "default_oracle_batch")]
    pub batch_size: usize,
}

fn default_oracle_batch() -> usize {
    50
}

/// Hyperparameter grid. Cells are visited in lexicographic order over
/// (learning rate, batch size, balance weight, encoder width, head width).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    #[serde(default = "grid_lr")]
    pub learning_rate: Vec<f64>,
    #[serde(default = "grid_bs")]
    pub batch_size: Vec<usize>,
    #[serde(default = "grid_lambda")]
    pub balance_weight: Vec<f64>,
    #[serde(default = "grid_width")]
    pub d_phi: Vec<usize>,
    #[serde(default = "grid_width")]
    pub d_h: Vec<usize>,
}

fn grid_lr() -> Vec<f64> {
    vec![1e-3]
}
fn grid_bs() -> Vec<usize> {
    vec![64]
}
fn grid_lambda() -> Vec<f64> {
    vec![1e-2]
}
fn grid_width() -> Vec<usize> {
    vec![32]
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            learning_rate: grid_lr(),
            batch_size: grid_bs(),
            balance_weight: grid_lambda(),
            d_phi: grid_width(),
            d_h: grid_width(),
        }
    }
}

/// One point of a [`Grid`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub balance_weight: f64,
    pub d_phi: usize,
    pub d_h: usize,
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("grid: {m}")));
        if self.learning_rate.is_empty()
            || self.batch_size.is_empty()
            || self.balance_weight.is_empty()
            || self.d_phi.is_empty()
            || self.d_h.is_empty()
        {
            return bad("every axis needs at least one value");
        }
        if self.learning_rate.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("learning rates must be positive");
        }
        if self.batch_size.iter().any(|&v| v < 2) {
            return bad("batch sizes must be at least 2");
        }
        if self.balance_weight.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return bad("balance weights must be nonnegative");
        }
        if self.d_phi.iter().chain(&self.d_h).any(|&v| v == 0) {
            return bad("widths must be positive");
        }
        Ok(())
    }

    /// Cells relevant to `kind`: axes the estimator ignores are pinned to
    /// their first value, so non-neural estimators get a single cell.
    pub fn cells(&self, kind: EstimatorKind) -> Vec<GridCell> {
        let first = |v: &[f64]| vec![v[0]];
        let (lr, bs, phi, h) = if kind.is_neural() {
            (self.learning_rate.clone(), self.batch_size.clone(), self.d_phi.clone(), self.d_h.clone())
        } else {
            (first(&self.learning_rate), vec![self.batch_size[0]], vec![self.d_phi[0]], vec![self.d_h[0]])
        };
        let lambda = if kind == EstimatorKind::CfrWass {
            self.balance_weight.clone()
        } else {
            first(&self.balance_weight)
        };
        let mut out = Vec::new();
        for &learning_rate in &lr {
            for &batch_size in &bs {
                for &balance_weight in &lambda {
                    for &d_phi in &phi {
                        for &d_h in &h {
                            out.push(GridCell {
                                learning_rate,
                                batch_size,
                                balance_weight,
                                d_phi,
                                d_h,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorEntry {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub grid: Grid,
    /// Settings not searched over (epochs, patience, ridge, Sinkhorn).
    #[serde(default)]
    pub config: EstimatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rq2Settings {
    /// Neighbour count of the CMI estimator.
    #[serde(default = "default_cmi_k")]
    pub k: usize,
}

fn default_cmi_k() -> usize {
    5
}

impl Default for Rq2Settings {
    fn default() -> Self {
        Self { k: default_cmi_k() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rq3Settings {
    /// Numbers of observed covariates to hide.
    #[serde(default = "default_removals")]
    pub removals: Vec<usize>,
}

fn default_removals() -> Vec<usize> {
    (0..=4).collect()
}

impl Default for Rq3Settings {
    fn default() -> Self {
        Self {
            removals: default_removals(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rq4Settings {
    /// Confounder count of the all-at-once variant; defaults to the number
    /// the full pipeline generated.
    #[serde(default)]
    pub all_at_once: Option<usize>,
    /// Iteration count of the ungated variant; defaults to the number the
    /// full pipeline ran.
    #[serde(default)]
    pub fixed_iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetConfig,
    /// Train, validation and test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Required by every experiment except the CMI comparison.
    #[serde(default)]
    pub estimators: Vec<EstimatorEntry>,
    #[serde(default)]
    pub proci: Option<ProciSettings>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Also report the square root of PEHE in the summary tables.
    #[serde(default)]
    pub sqrt_pehe: bool,
    #[serde(default)]
    pub rq2: Rq2Settings,
    #[serde(default)]
    pub rq3: Rq3Settings,
    #[serde(default)]
    pub rq4: Rq4Settings,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_split() -> [f64; 3] {
    [0.63, 0.27, 0.10]
}
fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(format!("seed {} is listed twice", w[0])));
        }
        for e in &self.estimators {
            e.grid.validate()?;
            e.config.validate()?;
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        crate::data::SplitSpec::new(self.split[0], self.split[1], self.split[2], 0)?;
        if let Some(p) = &self.proci {
            p.pipeline.validate()?;
            if p.batch_size == 0 {
                return Err(Error::InvalidConfig("oracle batch size must be positive".into()));
            }
        }
        Ok(())
    }
}

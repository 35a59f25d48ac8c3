//! Configuration-driven experiments: grid search, the four experiment
//! runners and their reports.

pub mod config;
pub mod grid;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub use config::{
    DatasetConfig, EstimatorEntry, ExperimentConfig, Grid, GridCell, JobsConfig, OracleSpec, ProciSettings,
    Rq2Settings, Rq3Settings, Rq4Settings, TwinsConfig,
};
pub use grid::{grid_search, CellOutcome, GridResult};
pub use report::{
    aggregate, spearman, trends, AggregateRow, CellReport, CellStatus, CellTiming, CmiRow, ProciRunLog, RunReport,
    Timings, TrendRow,
};

use crate::bench::{remove_confounders, BenchmarkDataset};
use crate::data::{split_indices, SplitIndices, SplitSpec};
use crate::error::{Error, Result};
use crate::estimators::predict_cate;
use crate::kernel::conditional_mutual_information;
use crate::metrics::{evaluate, EffectEstimates, MetricSet};
use crate::pipeline::{run_proci, GateMode, GenerationMode, ProciConfig, ValueMode};
use crate::rng::{derive_seed, label_hash, rng_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Rq1,
    Rq2,
    Rq3,
    Rq4,
}

impl Experiment {
    pub fn label(self) -> &'static str {
        match self {
            Self::Rq1 => "rq1",
            Self::Rq2 => "rq2",
            Self::Rq3 => "rq3",
            Self::Rq4 => "rq4",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rq1" => Ok(Self::Rq1),
            "rq2" => Ok(Self::Rq2),
            "rq3" => Ok(Self::Rq3),
            "rq4" => Ok(Self::Rq4),
            other => Err(Error::InvalidConfig(format!("unknown experiment `{other}`"))),
        }
    }
}

/// A dataset variant ready for estimation.
struct Prepared {
    variant: String,
    removed: Option<usize>,
    bench: BenchmarkDataset,
    log: Option<ProciRunLog>,
}

struct Outcome {
    cells: Vec<CellReport>,
    timings: Vec<CellTiming>,
    logs: Vec<ProciRunLog>,
    cmi: Vec<CmiRow>,
}

impl Outcome {
    fn empty() -> Self {
        Self {
            cells: Vec::new(),
            timings: Vec::new(),
            logs: Vec::new(),
            cmi: Vec::new(),
        }
    }

    fn extend(&mut self, other: Outcome) {
        self.cells.extend(other.cells);
        self.timings.extend(other.timings);
        self.logs.extend(other.logs);
        self.cmi.extend(other.cmi);
    }
}

/// Directory name of one ProCI run; `/` in variant names is dropped.
pub fn run_label(seed: u64, removed: Option<usize>, variant: &str) -> String {
    let variant = variant.replace('/', "");
    match removed {
        Some(k) => format!("seed-{seed}-removed-{k}-{variant}"),
        None => format!("seed-{seed}-{variant}"),
    }
}

/// Seeds of the ProCI loop and its KCIT gate for one run.
fn seeded_pipeline(cfg: &ProciConfig, seed: u64) -> ProciConfig {
    let mut c = cfg.clone();
    c.seed = derive_seed(seed, label_hash("proci"));
    c.kcit.seed = derive_seed(seed, label_hash("kcit"));
    c
}

/// Runs ProCI on `bench` and returns the benchmark with the augmented
/// covariates. Row order, truth and randomized mask are unchanged.
fn augment(
    bench: &BenchmarkDataset,
    settings: &ProciSettings,
    pipeline: &ProciConfig,
    seed: u64,
    variant: &str,
    removed: Option<usize>,
    out: Option<&Path>,
) -> Result<(BenchmarkDataset, ProciRunLog, crate::pipeline::ProciResult)> {
    let mut session = settings.oracle.session(bench, settings.batch_size)?;
    let result = run_proci(&bench.base, &seeded_pipeline(pipeline, seed), &mut session)?;
    if let Some(dir) = out {
        result.write_run_dir(&dir.join("proci").join(run_label(seed, removed, variant)), Some(&session))?;
    }
    let log = ProciRunLog::new(seed, variant, removed, &result, bench.base.outcomes());
    let next_id = bench
        .column_ids
        .iter()
        .chain(bench.hidden.iter().map(|h| &h.original_index))
        .max()
        .map_or(0, |m| m + 1);
    let added = result.augmented.d() - bench.base.d();
    let mut augmented = bench.clone();
    augmented.base = result.augmented.clone();
    augmented.column_ids.extend(next_id..next_id + added);
    Ok((augmented, log, result))
}

/// Grid-searches one estimator on the training and validation rows of
/// `bench` and evaluates the chosen model in and out of sample.
pub fn fit_entry(
    entry: &EstimatorEntry,
    bench: &BenchmarkDataset,
    split: &SplitIndices,
    seed: u64,
) -> Result<(GridResult, MetricSet, MetricSet)> {
    let train = bench.base.select_rows(&split.train);
    let val = bench.base.select_rows(&split.val);
    let net_seed = derive_seed(seed, label_hash(entry.kind.label()));
    let g = grid_search(entry.kind, &entry.grid, &entry.config, &train, &val, net_seed)?;
    let metrics = |rows: &[usize]| -> Result<MetricSet> {
        let part = bench.select_rows(rows);
        let tau = predict_cate(&g.model, part.base.covariates())?;
        evaluate(&part, &EffectEstimates::from_effects(tau))
    };
    let (inside, outside) = (metrics(&split.in_sample())?, metrics(&split.test)?);
    Ok((g, inside, outside))
}

fn fit_and_evaluate(
    entry: &EstimatorEntry,
    prepared: &Prepared,
    split: &SplitIndices,
    seed: u64,
) -> (CellReport, CellTiming) {
    let start = Instant::now();
    let label = entry.kind.label();
    let cell = match fit_entry(entry, &prepared.bench, split, seed) {
        Ok((g, inside, outside)) => CellReport {
            estimator: label.into(),
            variant: prepared.variant.clone(),
            seed,
            removed: prepared.removed,
            status: CellStatus::Ok,
            chosen: Some(g.best),
            validation_loss: g.model.validation_loss(),
            grid: if g.cells.len() > 1 { g.cells } else { Vec::new() },
            in_sample: Some(inside),
            out_sample: Some(outside),
        },
        Err(e) => CellReport::failed(label, &prepared.variant, seed, prepared.removed, e.to_string()),
    };
    let timing = CellTiming {
        estimator: label.into(),
        variant: prepared.variant.clone(),
        seed,
        removed: prepared.removed,
        seconds: start.elapsed().as_secs_f64(),
    };
    (cell, timing)
}

/// Fits every estimator on every prepared variant.
fn estimate(cfg: &ExperimentConfig, prepared: Vec<Prepared>, split: &SplitIndices, seed: u64) -> Outcome {
    let jobs: Vec<(&Prepared, &EstimatorEntry)> =
        prepared.iter().flat_map(|p| cfg.estimators.iter().map(move |e| (p, e))).collect();
    let (cells, timings): (Vec<_>, Vec<_>) = jobs
        .par_iter()
        .map(|(p, e)| fit_and_evaluate(e, p, split, seed))
        .unzip();
    Outcome {
        cells,
        timings,
        logs: prepared.into_iter().filter_map(|p| p.log).collect(),
        cmi: Vec::new(),
    }
}

/// The run's train/validation/test split, drawn on the unaugmented dataset.
pub fn split_for(cfg: &ExperimentConfig, bench: &BenchmarkDataset, seed: u64) -> Result<SplitIndices> {
    let [a, b, c] = cfg.split;
    split_indices(&bench.base, &SplitSpec::new(a, b, c, derive_seed(seed, label_hash("split")))?)
}

fn base_variant(bench: BenchmarkDataset, removed: Option<usize>) -> Prepared {
    Prepared {
        variant: "base".into(),
        removed,
        bench,
        log: None,
    }
}

fn proci_variant(
    bench: &BenchmarkDataset,
    settings: &ProciSettings,
    pipeline: &ProciConfig,
    seed: u64,
    variant: &str,
    removed: Option<usize>,
    out: Option<&Path>,
) -> Result<(Prepared, crate::pipeline::ProciResult)> {
    let (augmented, log, result) = augment(bench, settings, pipeline, seed, variant, removed, out)?;
    Ok((
        Prepared {
            variant: variant.into(),
            removed,
            bench: augmented,
            log: Some(log),
        },
        result,
    ))
}

fn rq1_seed(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<Outcome> {
    let bench = cfg.dataset.build(seed)?;
    let split = split_for(cfg, &bench, seed)?;
    let mut prepared = Vec::new();
    if let Some(p) = &cfg.proci {
        prepared.push(proci_variant(&bench, p, &p.pipeline, seed, "proci", None, out)?.0);
    }
    prepared.insert(0, base_variant(bench, None));
    Ok(estimate(cfg, prepared, &split, seed))
}

fn rq2_seed(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<Outcome> {
    let settings = cfg
        .proci
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("rq2 needs a [proci] section".into()))?;
    let bench = cfg.dataset.build(seed)?;
    // The CMI comparison only needs the first generated confounder.
    let pipeline = ProciConfig {
        gate: GateMode::Fixed(1),
        generation: GenerationMode::Progressive,
        precheck: false,
        ..settings.pipeline.clone()
    };
    let (_, log, result) = augment(&bench, settings, &pipeline, seed, "proci", None, out)?;
    let generated = result
        .confounders
        .first()
        .ok_or_else(|| Error::InvalidConfig(format!("seed {seed}: ProCI generated no confounder")))?;
    let x = bench.base.covariates();
    let t = bench.base.treatments_f64();
    let y = bench.base.outcomes();
    let mut rng = rng_from(derive_seed(seed, label_hash("rq2-random")));
    let random: Vec<f64> = (0..bench.n()).map(|_| rng.sample(StandardNormal)).collect();
    let k = cfg.rq2.k;
    let cmi = |u: &[f64], a: &[f64]| conditional_mutual_information(u, a, x, k);
    let row = CmiRow {
        seed,
        confounder: generated.name.clone(),
        generated_t: cmi(&generated.raw_values, &t)?,
        generated_y: cmi(&generated.raw_values, y)?,
        random_t: cmi(&random, &t)?,
        random_y: cmi(&random, y)?,
    };
    let mut o = Outcome::empty();
    o.logs.push(log);
    o.cmi.push(row);
    Ok(o)
}

fn rq3_seed(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<Outcome> {
    let full = cfg.dataset.build(seed)?;
    let split = split_for(cfg, &full, seed)?;
    let d = full.base.d();
    if let Some(&k) = cfg.rq3.removals.iter().find(|&&k| k > d) {
        return Err(Error::InvalidConfig(format!("cannot remove {k} of {d} covariates")));
    }
    let per_k: Vec<Result<Outcome>> = cfg
        .rq3
        .removals
        .par_iter()
        .map(|&k| {
            let bench = remove_confounders(&full, k, derive_seed(seed, label_hash("rq3")))?;
            let mut prepared = Vec::new();
            if let Some(p) = &cfg.proci {
                prepared.push(proci_variant(&bench, p, &p.pipeline, seed, "proci", Some(k), out)?.0);
            }
            prepared.insert(0, base_variant(bench, Some(k)));
            Ok(estimate(cfg, prepared, &split, seed))
        })
        .collect();
    let mut o = Outcome::empty();
    for r in per_k {
        o.extend(r?);
    }
    Ok(o)
}

fn rq4_seed(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<Outcome> {
    let settings = cfg
        .proci
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("rq4 needs a [proci] section".into()))?;
    let bench = cfg.dataset.build(seed)?;
    let split = split_for(cfg, &bench, seed)?;
    let full_cfg = settings.pipeline.clone();
    let (full, full_result) = proci_variant(&bench, settings, &full_cfg, seed, "full", None, out)?;
    let iterations = full_result.iteration_log.iter().filter(|r| r.iteration > 0).count().max(1);
    let generated = full_result.confounders.len().max(1);
    let variants = [
        (
            "w/o-dr",
            ProciConfig {
                values: ValueMode::Direct,
                ..full_cfg.clone()
            },
        ),
        (
            "w/o-pi",
            ProciConfig {
                generation: GenerationMode::AllAtOnce(cfg.rq4.all_at_once.unwrap_or(generated)),
                ..full_cfg.clone()
            },
        ),
        (
            "w/o-ut",
            ProciConfig {
                gate: GateMode::Fixed(cfg.rq4.fixed_iterations.unwrap_or(iterations)),
                precheck: false,
                ..full_cfg.clone()
            },
        ),
    ];
    let mut prepared = vec![full];
    for (name, pipeline) in variants {
        prepared.push(proci_variant(&bench, settings, &pipeline, seed, name, None, out)?.0);
    }
    Ok(estimate(cfg, prepared, &split, seed))
}

/// Runs one experiment on a pool of `cfg.workers` threads. When `out` is
/// given, ProCI run directories are written below it.
pub fn run_experiment(which: Experiment, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(RunReport, Timings)> {
    cfg.validate()?;
    if let (Experiment::Rq2 | Experiment::Rq4, None) = (which, &cfg.proci) {
        return Err(Error::InvalidConfig(format!("{} needs a [proci] section", which.label())));
    }
    if which != Experiment::Rq2 && cfg.estimators.is_empty() {
        return Err(Error::InvalidConfig(format!("{} needs at least one estimator", which.label())));
    }
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let per_seed: Vec<Result<Outcome>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| match which {
                Experiment::Rq1 => rq1_seed(cfg, seed, out),
                Experiment::Rq2 => rq2_seed(cfg, seed, out),
                Experiment::Rq3 => rq3_seed(cfg, seed, out),
                Experiment::Rq4 => rq4_seed(cfg, seed, out),
            })
            .collect()
    });
    let mut all = Outcome::empty();
    for r in per_seed {
        all.extend(r?);
    }
    let aggregates = aggregate(&all.cells, cfg.sqrt_pehe);
    let trends = if which == Experiment::Rq3 { trends(&aggregates) } else { Vec::new() };
    let report = RunReport {
        experiment: which.label().into(),
        name: cfg.name.clone(),
        seeds: cfg.seeds.clone(),
        sqrt_pehe: cfg.sqrt_pehe,
        cells: all.cells,
        aggregates,
        proci_runs: all.logs,
        cmi: all.cmi,
        trends,
    };
    let timings = Timings {
        total_seconds: start.elapsed().as_secs_f64(),
        cells: all.timings,
    };
    Ok((report, timings))
}

pub fn run_rq1(cfg: &ExperimentConfig) -> Result<RunReport> {
    Ok(run_experiment(Experiment::Rq1, cfg, None)?.0)
}

pub fn run_rq2(cfg: &ExperimentConfig) -> Result<RunReport> {
    Ok(run_experiment(Experiment::Rq2, cfg, None)?.0)
}

pub fn run_rq3(cfg: &ExperimentConfig) -> Result<RunReport> {
    Ok(run_experiment(Experiment::Rq3, cfg, None)?.0)
}

pub fn run_rq4(cfg: &ExperimentConfig) -> Result<RunReport> {
    Ok(run_experiment(Experiment::Rq4, cfg, None)?.0)
}

/// Output directory from the config, overridden by `flag`.
pub fn output_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| cfg.output_dir.clone())
}

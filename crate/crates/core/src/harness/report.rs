//! Run reports: per-cell metrics, aggregates over seeds and ProCI logs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::GridCell;
use super::grid::CellOutcome;
use crate::error::Result;
use crate::metrics::{MetricSet, METRIC_NAMES};
use crate::pipeline::{ProciResult, Termination};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CellStatus {
    Ok,
    Failed { reason: String },
}

/// One (estimator, variant, seed[, removal count]) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub estimator: String,
    pub variant: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed: Option<usize>,
    #[serde(flatten)]
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<GridCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<CellOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_sample: Option<MetricSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_sample: Option<MetricSet>,
}

impl CellReport {
    pub fn failed(estimator: &str, variant: &str, seed: u64, removed: Option<usize>, reason: String) -> Self {
        Self {
            estimator: estimator.into(),
            variant: variant.into(),
            seed,
            removed,
            status: CellStatus::Failed { reason },
            chosen: None,
            validation_loss: None,
            grid: Vec::new(),
            in_sample: None,
            out_sample: None,
        }
    }

    pub fn split(&self, split: &str) -> Option<&MetricSet> {
        match split {
            "in-sample" => self.in_sample.as_ref(),
            "out-sample" => self.out_sample.as_ref(),
            _ => None,
        }
    }
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub estimator: String,
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed: Option<usize>,
    pub split: String,
    pub metric: String,
    pub mean: f64,
    /// Absent with fewer than two values.
    pub sd: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub added: Vec<String>,
    pub covariates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderSummary {
    pub name: String,
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_digest: Option<String>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProciRunLog {
    pub seed: u64,
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed: Option<usize>,
    pub termination: Termination,
    pub iterations: Vec<IterationSummary>,
    pub confounders: Vec<ConfounderSummary>,
    /// Whether every factual entry of the final potential-outcome table is
    /// bitwise equal to the observed outcome; absent without a table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factual_preserved: Option<bool>,
}

impl ProciRunLog {
    pub fn new(seed: u64, variant: &str, removed: Option<usize>, r: &ProciResult, observed: &[f64]) -> Self {
        Self {
            seed,
            variant: variant.into(),
            removed,
            termination: r.termination.clone(),
            iterations: r
                .iteration_log
                .iter()
                .map(|it| IterationSummary {
                    iteration: it.iteration,
                    added: it.added.clone(),
                    covariates: it.covariates,
                    statistic: it.kcit.as_ref().map(|k| k.statistic),
                    p_value: it.kcit.as_ref().map(|k| k.p_value),
                    pass: it.kcit.as_ref().map(|k| k.pass),
                })
                .collect(),
            confounders: r
                .confounders
                .iter()
                .map(|c| ConfounderSummary {
                    name: c.name.clone(),
                    iteration: c.iteration,
                    family: c.family.as_ref().map(ToString::to_string),
                    params_digest: c.params_digest.clone(),
                    mean: c.mean,
                    sd: c.sd,
                })
                .collect(),
            factual_preserved: r.potential_outcomes.as_ref().map(|po| {
                (0..observed.len()).all(|i| po.factual(i).to_bits() == observed[i].to_bits())
            }),
        }
    }
}

/// Conditional mutual information of a generated and a random confounder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmiRow {
    pub seed: u64,
    pub confounder: String,
    pub generated_t: f64,
    pub generated_y: f64,
    pub random_t: f64,
    pub random_y: f64,
}

/// Rank correlation of removal count with a mean metric, and the change
/// between the smallest and largest removal count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub estimator: String,
    pub variant: String,
    pub split: String,
    pub metric: String,
    pub removed: Vec<usize>,
    pub means: Vec<f64>,
    pub spearman: f64,
    pub degradation: f64,
}

/// Deterministic experiment output: no timings, no paths, no host details.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub name: String,
    pub seeds: Vec<u64>,
    /// Canonical PEHE is the mean of squares; when set, aggregates also
    /// carry its square root under `sqrt_pehe`.
    pub sqrt_pehe: bool,
    pub cells: Vec<CellReport>,
    pub aggregates: Vec<AggregateRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub proci_runs: Vec<ProciRunLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cmi: Vec<CmiRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trends: Vec<TrendRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub estimator: String,
    pub variant: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed: Option<usize>,
    pub seconds: f64,
}

/// Wall-clock times, kept apart from the report so that the report stays
/// byte-reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub cells: Vec<CellTiming>,
}

pub const SPLITS: [&str; 2] = ["in-sample", "out-sample"];

fn mean_sd(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

/// Aggregates successful cells per (estimator, variant, removal, split,
/// metric), in order of first appearance.
pub fn aggregate(cells: &[CellReport], sqrt_pehe: bool) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String, Option<usize>)> = Vec::new();
    for c in cells {
        let key = (c.estimator.clone(), c.variant.clone(), c.removed);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut metrics: Vec<&str> = METRIC_NAMES.to_vec();
    if sqrt_pehe {
        metrics.insert(1, "sqrt_pehe");
    }
    let mut rows = Vec::new();
    for (estimator, variant, removed) in keys {
        for split in SPLITS {
            for metric in &metrics {
                let values: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.estimator == estimator && c.variant == variant && c.removed == removed)
                    .filter_map(|c| c.split(split))
                    .filter_map(|m| match *metric {
                        "sqrt_pehe" => m.pehe_for_report(true),
                        name => m.get(name),
                    })
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let (mean, sd) = mean_sd(&values);
                rows.push(AggregateRow {
                    estimator: estimator.clone(),
                    variant: variant.clone(),
                    removed,
                    split: split.into(),
                    metric: (*metric).into(),
                    mean,
                    sd,
                    count: values.len(),
                });
            }
        }
    }
    rows
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Trend of every aggregated metric over the removal counts.
pub fn trends(aggregates: &[AggregateRow]) -> Vec<TrendRow> {
    let mut keys: Vec<(String, String, String, String)> = Vec::new();
    for r in aggregates.iter().filter(|r| r.removed.is_some()) {
        let key = (r.estimator.clone(), r.variant.clone(), r.split.clone(), r.metric.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .filter_map(|(estimator, variant, split, metric)| {
            let mut points: Vec<(usize, f64)> = aggregates
                .iter()
                .filter(|r| r.estimator == estimator && r.variant == variant && r.split == split && r.metric == metric)
                .filter_map(|r| r.removed.map(|k| (k, r.mean)))
                .collect();
            points.sort_by_key(|p| p.0);
            if points.len() < 2 {
                return None;
            }
            let ks: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
            let means: Vec<f64> = points.iter().map(|p| p.1).collect();
            Some(TrendRow {
                spearman: spearman(&ks, &means),
                degradation: means[means.len() - 1] - means[0],
                removed: points.iter().map(|p| p.0).collect(),
                means,
                estimator,
                variant,
                split,
                metric,
            })
        })
        .collect()
}

impl RunReport {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn aggregate(&self, estimator: &str, variant: &str, removed: Option<usize>, split: &str, metric: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|r| {
            r.estimator == estimator && r.variant == variant && r.removed == removed && r.split == split && r.metric == metric
        })
    }

    /// Writes `report.json`, `cells.csv`, `aggregates.csv` and, when given,
    /// `timings.json` into `dir`.
    pub fn write(&self, dir: &Path, timings: Option<&Timings>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        let mut w = csv::Writer::from_path(dir.join("aggregates.csv"))?;
        w.write_record(["estimator", "variant", "removed", "split", "metric", "mean", "sd", "count"])?;
        for r in &self.aggregates {
            w.write_record([
                r.estimator.clone(),
                r.variant.clone(),
                r.removed.map_or(String::new(), |k| k.to_string()),
                r.split.clone(),
                r.metric.clone(),
                r.mean.to_string(),
                r.sd.map_or(String::new(), |s| s.to_string()),
                r.count.to_string(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("cells.csv"))?;
        let mut header = vec!["estimator".to_owned(), "variant".into(), "seed".into(), "removed".into(), "status".into()];
        for split in SPLITS {
            for m in METRIC_NAMES {
                header.push(format!("{split}:{m}"));
            }
        }
        w.write_record(&header)?;
        for c in &self.cells {
            let mut rec = vec![
                c.estimator.clone(),
                c.variant.clone(),
                c.seed.to_string(),
                c.removed.map_or(String::new(), |k| k.to_string()),
                match &c.status {
                    CellStatus::Ok => "ok".into(),
                    CellStatus::Failed { reason } => format!("failed: {reason}"),
                },
            ];
            for split in SPLITS {
                for m in METRIC_NAMES {
                    rec.push(c.split(split).and_then(|s| s.get(m)).map_or(String::new(), |v| v.to_string()));
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        if let Some(t) = timings {
            std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(t)?)?;
        }
        Ok(())
    }
}

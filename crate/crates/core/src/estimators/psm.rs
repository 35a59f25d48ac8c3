//! Propensity score matching: one-to-one nearest-neighbour matching with
//! replacement on the logit propensity.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::linear::{fit_logistic, LogisticModel};
use crate::data::ObservationalDataset;
use crate::error::{Error, Result};

/// L2 penalty of the propensity model.
pub const PROPENSITY_L2: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsmModel {
    pub propensity: LogisticModel,
    /// Logit propensity of each treated training unit.
    #[serde(with = "super::hex_f64")]
    pub treated_logits: Vec<f64>,
    /// Own outcome minus matched control outcome, per treated unit.
    #[serde(with = "super::hex_f64")]
    pub pair_effects: Vec<f64>,
    /// Training index of the control matched to each treated unit.
    pub matches: Vec<usize>,
    pub att: f64,
    /// True when the treated and control propensity ranges do not overlap.
    pub overlap_violation: bool,
}

/// Index of the candidate nearest to `target`; ties go to the earliest candidate.
pub fn nearest(target: f64, candidates: &[f64]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, &c) in candidates.iter().enumerate() {
        let dist = (c - target).abs();
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    best
}

/// Matches each treated unit to the control nearest in logit propensity.
/// Ties go to the control nearest in covariate space, then to the earliest one.
pub fn fit_psm(ds: &ObservationalDataset) -> Result<PsmModel> {
    let propensity = fit_logistic(ds.covariates(), ds.treatments(), PROPENSITY_L2)?;
    let logits = propensity.logit(ds.covariates())?;
    let t = ds.treatments();
    let y = ds.outcomes();
    let treated: Vec<usize> = (0..ds.n()).filter(|&i| t[i] == 1).collect();
    let controls: Vec<usize> = (0..ds.n()).filter(|&i| t[i] == 0).collect();
    let control_logits: Vec<f64> = controls.iter().map(|&i| logits[i]).collect();
    let x = ds.covariates();
    let sq_dist = |i: usize, j: usize| (0..x.ncols()).map(|k| (x[(i, k)] - x[(j, k)]).powi(2)).sum::<f64>();
    let mut matches = Vec::with_capacity(treated.len());
    let mut pair_effects = Vec::with_capacity(treated.len());
    for &i in &treated {
        let mut j = controls[0];
        let mut key = ((logits[j] - logits[i]).abs(), sq_dist(i, j));
        for &c in &controls[1..] {
            let k = ((logits[c] - logits[i]).abs(), sq_dist(i, c));
            if k < key {
                j = c;
                key = k;
            }
        }
        matches.push(j);
        pair_effects.push(y[i] - y[j]);
    }
    let att = pair_effects.iter().sum::<f64>() / pair_effects.len() as f64;
    let range = |v: &mut dyn Iterator<Item = f64>| v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let (t_lo, t_hi) = range(&mut treated.iter().map(|&i| logits[i]));
    let (c_lo, c_hi) = range(&mut control_logits.iter().copied());
    Ok(PsmModel {
        treated_logits: treated.iter().map(|&i| logits[i]).collect(),
        propensity,
        pair_effects,
        matches,
        att,
        overlap_violation: t_lo > c_hi || c_lo > t_hi,
    })
}

impl PsmModel {
    /// Effect of the matched pair whose treated unit is nearest in logit propensity.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if self.treated_logits.is_empty() {
            return Err(Error::EmptyArm("treated"));
        }
        Ok(self
            .propensity
            .logit(x)?
            .into_iter()
            .map(|l| self.pair_effects[nearest(l, &self.treated_logits)])
            .collect())
    }
}

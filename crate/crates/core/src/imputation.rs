//! Sampling generated confounders from per-unit distributions and building
//! the potential-outcome table from factual and imputed outcomes.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum DistributionFamily {
    Gaussian,
    Bernoulli,
    Categorical { levels: usize },
}

impl fmt::Display for DistributionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian => write!(f, "gaussian"),
            Self::Bernoulli => write!(f, "bernoulli"),
            Self::Categorical { levels } => write!(f, "categorical({levels})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UnitParams {
    Gaussian { mean: f64, std: f64 },
    Bernoulli { p: f64 },
    Categorical { probs: Vec<f64> },
}

impl UnitParams {
    /// Checks the tuple against `family`, describing the first problem found.
    pub fn check(&self, family: &DistributionFamily) -> std::result::Result<(), String> {
        match (family, self) {
            (DistributionFamily::Gaussian, Self::Gaussian { mean, std }) => {
                if !mean.is_finite() {
                    Err(format!("mean {mean} is not finite"))
                } else if !(*std > 0.0 && std.is_finite()) {
                    Err(format!("standard deviation {std} must be positive"))
                } else {
                    Ok(())
                }
            }
            (DistributionFamily::Bernoulli, Self::Bernoulli { p }) => {
                if (0.0..=1.0).contains(p) {
                    Ok(())
                } else {
                    Err(format!("probability {p} outside [0, 1]"))
                }
            }
            (DistributionFamily::Categorical { levels }, Self::Categorical { probs }) => {
                if probs.len() != *levels {
                    return Err(format!("{} probabilities for {levels} levels", probs.len()));
                }
                if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err("category probability outside [0, 1]".into());
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(format!("category probabilities sum to {total}"));
                }
                Ok(())
            }
            _ => Err(format!("parameters do not belong to the {family} family")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerUnitParams {
    pub family: DistributionFamily,
    pub params: Vec<UnitParams>,
}

impl PerUnitParams {
    pub fn validate(&self) -> Result<()> {
        if let DistributionFamily::Categorical { levels } = self.family {
            if levels < 2 {
                return Err(Error::InvalidConfig(format!("categorical family needs 2+ levels, got {levels}")));
            }
        }
        for (i, p) in self.params.iter().enumerate() {
            p.check(&self.family)
                .map_err(|e| Error::OracleRejected(format!("unit {i}: {e}")))?;
        }
        Ok(())
    }
}

/// One independent draw per unit from unit `i`'s own random stream, so the
/// value of a unit does not depend on which other units are present.
pub fn sample_confounder_values(pp: &PerUnitParams, seed: u64) -> Result<Vec<f64>> {
    pp.validate()?;
    pp.params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream_rng(seed, i as u64);
            Ok(match p {
                UnitParams::Gaussian { mean, std } => Normal::new(*mean, *std)
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?
                    .sample(&mut rng),
                UnitParams::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < *p)),
                UnitParams::Categorical { probs } => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut code = probs.len() - 1;
                    for (k, q) in probs.iter().enumerate() {
                        acc += q;
                        if u < acc {
                            code = k;
                            break;
                        }
                    }
                    code as f64
                }
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomeTable {
    pub y0_hat: Vec<f64>,
    pub y1_hat: Vec<f64>,
    /// The observed arm of each unit; the other arm is imputed.
    pub factual_arm: Vec<u8>,
}

impl PotentialOutcomeTable {
    pub fn n(&self) -> usize {
        self.factual_arm.len()
    }

    pub fn implied_effects(&self) -> Vec<f64> {
        self.y1_hat.iter().zip(&self.y0_hat).map(|(a, b)| a - b).collect()
    }

    pub fn factual(&self, i: usize) -> f64 {
        if self.factual_arm[i] == 1 {
            self.y1_hat[i]
        } else {
            self.y0_hat[i]
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["y0_hat", "y1_hat", "factual_arm"])?;
        for i in 0..self.n() {
            w.write_record([
                self.y0_hat[i].to_string(),
                self.y1_hat[i].to_string(),
                self.factual_arm[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Places the observed outcome in the factual arm and the imputed one in the other.
pub fn construct_potential_outcomes(t: &[u8], y: &[f64], y_cf: &[f64]) -> Result<PotentialOutcomeTable> {
    for (what, len) in [("outcomes", y.len()), ("counterfactuals", y_cf.len())] {
        if len != t.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: t.len(),
                actual: len,
            });
        }
    }
    if let Some(i) = y.iter().chain(y_cf).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("outcome entry {}", i % t.len().max(1))));
    }
    if let Some(i) = t.iter().position(|&v| v > 1) {
        return Err(Error::InvalidDataset(format!("treatment at row {i} is not binary")));
    }
    let mut y0_hat = Vec::with_capacity(t.len());
    let mut y1_hat = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        if t[i] == 1 {
            y0_hat.push(y_cf[i]);
            y1_hat.push(y[i]);
        } else {
            y0_hat.push(y[i]);
            y1_hat.push(y_cf[i]);
        }
    }
    Ok(PotentialOutcomeTable {
        y0_hat,
        y1_hat,
        factual_arm: t.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardized {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the input.
    pub sd: f64,
    pub degenerate: bool,
}

/// Zero-mean, unit population variance rescaling. Constant input, including
/// input whose spread is at rounding level relative to its mean, maps to zeros.
pub fn standardize_column(values: &[f64]) -> Standardized {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 1e-12 * (1.0 + mean.abs()) && sd.is_finite() {
        Standardized {
            values: values.iter().map(|v| (v - mean) / sd).collect(),
            mean,
            sd,
            degenerate: false,
        }
    } else {
        Standardized {
            values: vec![0.0; values.len()],
            mean,
            sd: 0.0,
            degenerate: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussians(params: &[(f64, f64)]) -> PerUnitParams {
        PerUnitParams {
            family: DistributionFamily::Gaussian,
            params: params.iter().map(|&(mean, std)| UnitParams::Gaussian { mean, std }).collect(),
        }
    }

    #[test]
    fn near_degenerate_gaussian_concentrates() {
        let v = sample_confounder_values(&gaussians(&[(2.0, 1e-9)]), 1).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-6);
        assert!(sample_confounder_values(&gaussians(&[(2.0, 0.0)]), 1).is_err());
    }

    #[test]
    fn degenerate_bernoulli_is_exact() {
        let pp = PerUnitParams {
            family: DistributionFamily::Bernoulli,
            params: vec![UnitParams::Bernoulli { p: 0.0 }, UnitParams::Bernoulli { p: 1.0 }],
        };
        assert_eq!(sample_confounder_values(&pp, 3).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn gaussian_moments() {
        let pp = gaussians(&vec![(0.0, 1.0); 10_000]);
        let v = sample_confounder_values(&pp, 5).unwrap();
        let mean = v.iter().sum::<f64>() / 1e4;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1e4;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.1);
    }

    #[test]
    fn sampling_is_deterministic_and_subset_stable() {
        let pp = gaussians(&[(0.0, 1.0), (1.0, 2.0), (3.0, 0.5)]);
        let a = sample_confounder_values(&pp, 8).unwrap();
        assert_eq!(a, sample_confounder_values(&pp, 8).unwrap());
        let prefix = gaussians(&[(0.0, 1.0), (1.0, 2.0)]);
        assert_eq!(&a[..2], &sample_confounder_values(&prefix, 8).unwrap()[..]);
    }

    #[test]
    fn categorical_codes_and_validation() {
        let pp = PerUnitParams {
            family: DistributionFamily::Categorical { levels: 3 },
            params: vec![
                UnitParams::Categorical {
                    probs: vec![0.0, 0.0, 1.0],
                },
                UnitParams::Categorical {
                    probs: vec![0.0, 1.0, 0.0],
                },
            ],
        };
        assert_eq!(sample_confounder_values(&pp, 1).unwrap(), vec![2.0, 1.0]);
        let bad = PerUnitParams {
            family: DistributionFamily::Categorical { levels: 2 },
            params: vec![UnitParams::Categorical { probs: vec![0.5, 0.6] }],
        };
        assert!(bad.validate().is_err());
        let wrong = PerUnitParams {
            family: DistributionFamily::Bernoulli,
            params: vec![UnitParams::Gaussian { mean: 0.0, std: 1.0 }],
        };
        assert!(wrong.validate().is_err());
    }

    #[test]
    fn potential_outcome_examples() {
        let tab = construct_potential_outcomes(&[1, 0], &[5.0, 5.0], &[3.0, 3.0]).unwrap();
        assert_eq!((tab.y0_hat[0], tab.y1_hat[0]), (3.0, 5.0));
        assert_eq!((tab.y0_hat[1], tab.y1_hat[1]), (5.0, 3.0));
        let same = construct_potential_outcomes(&[1, 0, 1], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(same.implied_effects().iter().all(|&e| e == 0.0));
        assert!(construct_potential_outcomes(&[1], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn standardize_examples() {
        let s = standardize_column(&[1.0, 2.0, 3.0]);
        let r = 1.5f64.sqrt();
        for (a, b) in s.values.iter().zip([-r, 0.0, r]) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = standardize_column(&[4.0, 4.0]);
        assert_eq!(c.values, vec![0.0, 0.0]);
        assert!(c.degenerate);
        let again = standardize_column(&s.values);
        for (a, b) in again.values.iter().zip(&s.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

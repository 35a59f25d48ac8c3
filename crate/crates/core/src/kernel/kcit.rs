//! Kernel conditional independence test of `Y ⫫ T | Z` for binary `T`.
//!
//! The statistic is `Tr(K_y (I - P) K_t) / n^2`, where all kernels are centred
//! and `P = K_z (K_z K_z / n + gamma I)^-1 K_z / n`. Diagonalizing `K_z = V L V'`
//! gives `P = V diag(l^2 / (l^2 + n gamma)) V'`, so one eigendecomposition
//! serves the statistic, every permutation and the propensity fit.
//!
//! P-values come from a conditional permutation test. Treatment vectors are
//! resampled from `prod_i q(t_i | z_i)` restricted to the observed arm sizes,
//! with `q` a kernel-ridge propensity, using a pair-swap Metropolis sampler.
//! Exchangeability holds through a star-shaped scheme: a hub chain starts at
//! the observed assignment and every null draw runs an independent chain from
//! the hub.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{center_matrix, median_heuristic_bandwidth, rbf_kernel_matrix};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "value")]
pub enum BandwidthRule {
    MedianHeuristic,
    /// One bandwidth shared by every block.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KcitConfig {
    pub bandwidth_rule: BandwidthRule,
    pub gamma: f64,
    pub alpha: f64,
    pub n_permutations: usize,
    pub seed: u64,
    /// Metropolis swap proposals per unit for each chain.
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
}

fn default_sweeps() -> usize {
    10
}

impl Default for KcitConfig {
    fn default() -> Self {
        Self {
            bandwidth_rule: BandwidthRule::MedianHeuristic,
            gamma: 1e-3,
            alpha: 0.05,
            n_permutations: 199,
            seed: 0,
            sweeps: default_sweeps(),
        }
    }
}

impl KcitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma {} must be positive", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if self.n_permutations < 99 {
            return Err(Error::InvalidConfig(format!(
                "{} permutations (need at least 99)",
                self.n_permutations
            )));
        }
        if let BandwidthRule::Fixed(b) = self.bandwidth_rule {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidConfig(format!("bandwidth {b} must be positive")));
            }
        }
        if self.sweeps == 0 {
            return Err(Error::InvalidConfig("sweeps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KcitResult {
    /// Raw trace statistic; tiny negative values are possible in finite samples.
    pub statistic: f64,
    pub p_value: f64,
    pub pass: bool,
    pub null_statistics: Vec<f64>,
}

/// Centred kernel of one block. An empty or constant block yields the zero
/// matrix, which is what centring any RBF kernel of identical rows gives.
fn centred_block(rows: &DMatrix<f64>, rule: BandwidthRule) -> Result<DMatrix<f64>> {
    let n = rows.nrows();
    if rows.ncols() == 0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let bw = match rule {
        BandwidthRule::Fixed(b) => b,
        BandwidthRule::MedianHeuristic => match median_heuristic_bandwidth(rows) {
            Ok(b) => b,
            Err(Error::DegenerateBandwidth) => {
                if rows.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("kernel input".into()));
                }
                return Ok(DMatrix::zeros(n, n));
            }
            Err(e) => return Err(e),
        },
    };
    Ok(center_matrix(&rbf_kernel_matrix(rows, bw)?.values))
}

struct Conditioning {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl Conditioning {
    fn new(kz: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(kz);
        Self {
            eigenvalues: eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect(),
            eigenvectors: eig.eigenvectors,
        }
    }

    /// `P = V diag(l^2 / (l^2 + n gamma)) V'`.
    fn projection(&self, gamma: f64) -> DMatrix<f64> {
        let n = self.eigenvectors.nrows() as f64;
        let mut scaled = self.eigenvectors.clone();
        for (k, &l) in self.eigenvalues.iter().enumerate() {
            let w = l * l / (l * l + n * gamma);
            scaled.column_mut(k).scale_mut(w);
        }
        scaled * self.eigenvectors.transpose()
    }

    /// Kernel-ridge fit of `t` on the conditioning kernel with the ridge penalty
    /// picked by closed-form leave-one-out error, clipped to `[0.01, 0.99]`.
    fn propensity(&self, t: &[f64]) -> Vec<f64> {
        let n = t.len();
        let mean = t.iter().sum::<f64>() / n as f64;
        let r: Vec<f64> = t.iter().map(|v| v - mean).collect();
        let v = &self.eigenvectors;
        let proj: Vec<f64> = (0..n).map(|k| (0..n).map(|i| v[(i, k)] * r[i]).sum()).collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for step in 0..25 {
            let penalty = 10f64.powf(-3.0 + 0.25 * f64::from(step));
            let h: Vec<f64> = self.eigenvalues.iter().map(|&l| l / (l + penalty)).collect();
            let mut loo = 0.0;
            let mut fit = vec![mean; n];
            for i in 0..n {
                let mut f = 0.0;
                let mut s = 1.0 / n as f64;
                for k in 0..n {
                    f += v[(i, k)] * h[k] * proj[k];
                    s += v[(i, k)] * v[(i, k)] * h[k];
                }
                fit[i] += f;
                loo += ((r[i] - f) / (1.0 - s).max(1e-12)).powi(2);
            }
            if best.as_ref().is_none_or(|(b, _)| loo < *b) {
                best = Some((loo, fit));
            }
        }
        best.map(|(_, f)| f).unwrap_or_else(|| vec![mean; n]).into_iter().map(|e| e.clamp(0.01, 0.99)).collect()
    }
}

fn check_inputs(y: &DMatrix<f64>, t_len: usize, z: &DMatrix<f64>) -> Result<usize> {
    let n = y.nrows();
    if n < 5 {
        return Err(Error::InvalidDataset(format!("KCIT needs at least 5 units, got {n}")));
    }
    if t_len != n {
        return Err(Error::LengthMismatch {
            what: "treatment",
            expected: n,
            actual: t_len,
        });
    }
    if z.nrows() != n {
        return Err(Error::LengthMismatch {
            what: "conditioning rows",
            expected: n,
            actual: z.nrows(),
        });
    }
    Ok(n)
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

/// KCIT statistic `Tr(K_y (I - P) K_t) / n^2` for an arbitrary real `t`.
pub fn kcit_statistic(y: &DMatrix<f64>, t: &[f64], z: &DMatrix<f64>, cfg: &KcitConfig) -> Result<f64> {
    cfg.validate()?;
    let n = check_inputs(y, t.len(), z)?;
    let ky = centred_block(y, cfg.bandwidth_rule)?;
    let kt = centred_block(&DMatrix::from_column_slice(n, 1, t), cfg.bandwidth_rule)?;
    let p = Conditioning::new(centred_block(z, cfg.bandwidth_rule)?).projection(cfg.gamma);
    let b = &ky - &ky * p;
    Ok(trace_product(&b, &kt) / (n * n) as f64)
}

/// Sum of `b` over the treated block, visiting treated indices in ascending
/// order so equal assignments always give bit-identical sums.
fn treated_block_sum(b: &DMatrix<f64>, treated: &mut [usize]) -> f64 {
    treated.sort_unstable();
    let mut s = 0.0;
    for &j in treated.iter() {
        for &i in treated.iter() {
            s += b[(i, j)];
        }
    }
    s
}

/// Pair-swap Metropolis chain targeting `prod_i e_i^t_i (1 - e_i)^(1 - t_i)`
/// under fixed arm sizes.
fn swap_chain(start: &[u8], log_odds: &[f64], steps: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut treated: Vec<usize> = (0..start.len()).filter(|&i| start[i] == 1).collect();
    let mut control: Vec<usize> = (0..start.len()).filter(|&i| start[i] == 0).collect();
    for _ in 0..steps {
        let a = rng.random_range(0..treated.len());
        let b = rng.random_range(0..control.len());
        let (i, j) = (treated[a], control[b]);
        let log_ratio = log_odds[j] - log_odds[i];
        if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
            treated[a] = j;
            control[b] = i;
        }
    }
    let mut out = vec![0u8; start.len()];
    for &i in &treated {
        out[i] = 1;
    }
    out
}

/// Conditional permutation p-value for `Y ⫫ T | Z`.
pub fn kcit_pvalue(y: &DMatrix<f64>, t: &[u8], z: &DMatrix<f64>, cfg: &KcitConfig) -> Result<KcitResult> {
    cfg.validate()?;
    let n = check_inputs(y, t.len(), z)?;
    if let Some(i) = t.iter().position(|&v| v > 1) {
        return Err(Error::InvalidDataset(format!("treatment at row {i} is not binary")));
    }
    let n1 = t.iter().filter(|&&v| v == 1).count();
    if n1 == 0 {
        return Err(Error::EmptyArm("treated"));
    }
    if n1 == n {
        return Err(Error::EmptyArm("control"));
    }

    // With both arms present the nonzero treatment distances are all 1, so the
    // median heuristic gives bandwidth 1. Centring the binary kernel leaves
    // 2 (1 - e) t_c t_c' with e = exp(-1 / (2 sigma^2)).
    let sigma_t = match cfg.bandwidth_rule {
        BandwidthRule::MedianHeuristic => 1.0,
        BandwidthRule::Fixed(b) => b,
    };
    let scale = 2.0 * (1.0 - (-0.5 / (sigma_t * sigma_t)).exp()) / (n * n) as f64;

    let ky = centred_block(y, cfg.bandwidth_rule)?;
    let cond = Conditioning::new(centred_block(z, cfg.bandwidth_rule)?);
    let b = center_matrix(&(&ky - &ky * cond.projection(cfg.gamma)));
    let stat_of = |assign: &[u8]| {
        let mut treated: Vec<usize> = (0..n).filter(|&i| assign[i] == 1).collect();
        scale * treated_block_sum(&b, &mut treated)
    };
    let statistic = stat_of(t);

    let tf: Vec<f64> = t.iter().map(|&v| f64::from(v)).collect();
    let log_odds: Vec<f64> = cond.propensity(&tf).iter().map(|e| (e / (1.0 - e)).ln()).collect();
    let steps = cfg.sweeps * n;
    let chain_seed = derive_seed(cfg.seed, 0x6b63_6974);
    let hub = swap_chain(t, &log_odds, steps, &mut stream_rng(chain_seed, 0));
    let null_statistics: Vec<f64> = (0..cfg.n_permutations)
        .into_par_iter()
        .map(|k| {
            let draw = swap_chain(&hub, &log_odds, steps, &mut stream_rng(chain_seed, k as u64 + 1));
            stat_of(&draw)
        })
        .collect();
    let exceed = null_statistics.iter().filter(|&&s| s >= statistic).count();
    let p_value = (1 + exceed) as f64 / (1 + cfg.n_permutations) as f64;
    Ok(KcitResult {
        statistic,
        p_value,
        pass: p_value > cfg.alpha,
        null_statistics,
    })
}

/// Clean inputs for the imputation-noise convergence check.
#[derive(Clone, Debug)]
pub struct Theorem1Input {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub t: Vec<u8>,
    pub x: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Row {
    pub eta: f64,
    pub median_abs_delta: f64,
    pub clean_statistic: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

fn statistic_of(y0: &[f64], y1: &[f64], t: &[f64], x: &DMatrix<f64>, u: &DMatrix<f64>, cfg: &KcitConfig) -> Result<f64> {
    let n = y0.len();
    let mut y = DMatrix::zeros(n, 2);
    y.column_mut(0).copy_from_slice(y0);
    y.column_mut(1).copy_from_slice(y1);
    let mut z = DMatrix::zeros(n, x.ncols() + u.ncols());
    z.columns_mut(0, x.ncols()).copy_from(x);
    z.columns_mut(x.ncols(), u.ncols()).copy_from(u);
    kcit_statistic(&y, t, &z, cfg)
}

/// Perturbs `(Y0, Y1, U)` with `N(0, eta^2)` noise and reports the median
/// absolute change of the statistic over `repetitions` draws per level.
pub fn theorem1_convergence_check(
    clean: &Theorem1Input,
    noise_levels: &[f64],
    repetitions: usize,
    cfg: &KcitConfig,
) -> Result<Vec<Theorem1Row>> {
    let n = clean.t.len();
    if clean.y0.len() != n || clean.y1.len() != n || clean.x.nrows() != n || clean.u.nrows() != n {
        return Err(Error::DimensionMismatch("noise check inputs disagree on n".into()));
    }
    if repetitions == 0 {
        return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
    }
    let t: Vec<f64> = clean.t.iter().map(|&v| f64::from(v)).collect();
    let base = statistic_of(&clean.y0, &clean.y1, &t, &clean.x, &clean.u, cfg)?;
    noise_levels
        .iter()
        .enumerate()
        .map(|(li, &eta)| {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::InvalidConfig(format!("noise level {eta} must be nonnegative")));
            }
            let mut deltas = (0..repetitions)
                .into_par_iter()
                .map(|r| {
                    if eta == 0.0 {
                        return Ok(0.0);
                    }
                    let mut rng = stream_rng(derive_seed(cfg.seed, li as u64), r as u64);
                    let mut jitter = |v: &[f64]| -> Vec<f64> {
                        v.iter().map(|a| a + eta * rng.sample::<f64, _>(StandardNormal)).collect()
                    };
                    let y0 = jitter(&clean.y0);
                    let y1 = jitter(&clean.y1);
                    let u = DMatrix::from_column_slice(n, clean.u.ncols(), &jitter(clean.u.as_slice()));
                    let s = statistic_of(&y0, &y1, &t, &clean.x, &u, cfg)?;
                    Ok((s - base).abs())
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(Theorem1Row {
                eta,
                median_abs_delta: median(&mut deltas),
                clean_statistic: base,
            })
        })
        .collect()
}

//! Gaussian RBF kernels, centring, cross-covariance traces and the regularized
//! conditional cross-covariance operator.

pub mod cmi;
pub mod kcit;

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};

pub use cmi::conditional_mutual_information;
pub use kcit::{
    kcit_pvalue, kcit_statistic, theorem1_convergence_check, BandwidthRule, KcitConfig, KcitResult, Theorem1Input,
    Theorem1Row,
};

#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
    pub centered: bool,
    pub bandwidth: f64,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }
}

fn sq_dist(rows: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..rows.ncols()).map(|c| (rows[(i, c)] - rows[(j, c)]).powi(2)).sum()
}

/// `K_ij = exp(-|x_i - x_j|^2 / (2 sigma^2))`.
pub fn rbf_kernel_matrix(rows: &DMatrix<f64>, bandwidth: f64) -> Result<KernelMatrix> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidConfig(format!("bandwidth {bandwidth} must be positive")));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel input".into()));
    }
    let n = rows.nrows();
    let scale = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut k = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in 0..i {
            let v = (-sq_dist(rows, i, j) * scale).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(KernelMatrix {
        values: k,
        centered: false,
        bandwidth,
    })
}

/// Median of the nonzero pairwise Euclidean distances over `i < j`.
pub fn median_heuristic_bandwidth(rows: &DMatrix<f64>) -> Result<f64> {
    let n = rows.nrows();
    let mut d: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..i {
            let v = sq_dist(rows, i, j).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bandwidth input".into()));
    }
    if d.is_empty() {
        return Err(Error::DegenerateBandwidth);
    }
    d.sort_unstable_by(f64::total_cmp);
    let m = d.len();
    Ok(if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    })
}

/// Computes `HKH` with `H = I - 11'/n` by subtracting row, column and grand means.
pub fn center_kernel(k: &KernelMatrix) -> KernelMatrix {
    KernelMatrix {
        values: center_matrix(&k.values),
        centered: true,
        bandwidth: k.bandwidth,
    }
}

pub(crate) fn center_matrix(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|j| k.column(j).sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    DMatrix::from_fn(n, n, |i, j| k[(i, j)] - row_means[i] - col_means[j] + grand)
}

fn require_centered(ks: &[&KernelMatrix]) -> Result<usize> {
    let n = ks[0].n();
    for k in ks {
        if !k.centered {
            return Err(Error::NotCentered);
        }
        if k.n() != n || k.values.ncols() != n {
            return Err(Error::DimensionMismatch(format!("kernel of size {} vs {n}", k.n())));
        }
    }
    Ok(n)
}

/// `(1/n) Tr(K_a K_b)` for centred kernels.
pub fn cross_covariance_trace(ka: &KernelMatrix, kb: &KernelMatrix) -> Result<f64> {
    let n = require_centered(&[ka, kb])?;
    // Tr(AB) = sum_ij A_ij B_ji
    let tr = ka.values.component_mul(&kb.values.transpose()).sum();
    Ok(tr / n as f64)
}

/// Matrix realization of the conditional cross-covariance operator:
///
/// `M = (1/n) [K_y K_t - K_y K_z (K_z K_z / n + gamma I)^-1 K_z K_t / n]`
///
/// with all kernels centred. The KCIT statistic is `Tr(M) / n`.
pub fn conditional_operator(
    ky: &KernelMatrix,
    kt: &KernelMatrix,
    kz: &KernelMatrix,
    gamma: f64,
) -> Result<DMatrix<f64>> {
    let n = require_centered(&[ky, kt, kz])?;
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!("gamma {gamma} must be positive")));
    }
    let nf = n as f64;
    let kz2 = &kz.values * &kz.values;
    let mut a = &kz2 / nf;
    for i in 0..n {
        a[(i, i)] += gamma;
    }
    let chol = Cholesky::new(a).ok_or_else(|| Error::Singular("regularized conditioning kernel".into()))?;
    let rhs = &kz.values * &kt.values;
    let solved = chol.solve(&rhs);
    let ykt = &ky.values * &kt.values;
    let correction = &ky.values * &kz.values * solved / nf;
    Ok((ykt - correction) / nf)
}

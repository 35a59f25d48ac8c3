//! Debiased entropic optimal transport between two point clouds with
//! uniform weights and squared Euclidean cost.
//!
//! The transport term is the dual value after a fixed number of log-domain
//! Sinkhorn iterations. The first half of the iterations anneal the
//! temperature geometrically from a power of two bounding the cost down to the
//! target epsilon; the rest run at the target. The starting temperature is
//! piecewise constant in the inputs, so gradients taken through every
//! iteration are exact for the value actually computed, converged or not.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|k| (a[(i, k)] - b[(j, k)]).powi(2)).sum()
}

fn cost_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| sq_dist(a, i, b, j))
}

/// Overwrites `z` (holding `(v_k - c_k) / eps`) with the softmax weights of
/// its entries and returns `-eps * (log_w + log sum_k exp(z_k))`.
fn soft_min(z: &mut [f64], log_w: f64, eps: f64) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    -eps * (log_w + m + sum.ln())
}

/// Forward iterates of one transport problem. When kept, `wf[t]` row `i`
/// holds the weights of the `f_i` update and `wg[t]` column `j` those of the
/// `g_j` update at iteration `t`.
struct Transport {
    wf: Vec<DMatrix<f64>>,
    wg: Vec<DMatrix<f64>>,
    value: f64,
}

/// Per-iteration temperatures.
fn schedule(cost: &DMatrix<f64>, eps: f64, iters: usize) -> Vec<f64> {
    let max_cost = cost.iter().copied().fold(0.0, f64::max);
    let start = if max_cost > eps { 2f64.powi(max_cost.log2().ceil() as i32).max(eps) } else { eps };
    let anneal = iters / 2;
    (0..iters)
        .map(|t| {
            if t < anneal {
                (start * (eps / start).powf(t as f64 / anneal as f64)).max(eps)
            } else {
                eps
            }
        })
        .collect()
}

fn transport(cost: &DMatrix<f64>, eps: f64, iters: usize, keep: bool) -> Transport {
    let (n, m) = cost.shape();
    let temps = schedule(cost, eps, iters);
    let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
    let mut out = Transport {
        wf: Vec::new(),
        wg: Vec::new(),
        value: 0.0,
    };
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut row = vec![0.0; m];
    let mut col = vec![0.0; n];
    for &eps in &temps {
        let mut wf = if keep { DMatrix::zeros(n, m) } else { DMatrix::zeros(0, 0) };
        for i in 0..n {
            for j in 0..m {
                row[j] = (g[j] - cost[(i, j)]) / eps;
            }
            f[i] = soft_min(&mut row, lb, eps);
            if keep {
                for j in 0..m {
                    wf[(i, j)] = row[j];
                }
            }
        }
        let mut wg = if keep { DMatrix::zeros(n, m) } else { DMatrix::zeros(0, 0) };
        for j in 0..m {
            for i in 0..n {
                col[i] = (f[i] - cost[(i, j)]) / eps;
            }
            g[j] = soft_min(&mut col, la, eps);
            if keep {
                wg.column_mut(j).copy_from_slice(&col);
            }
        }
        if keep {
            out.wf.push(wf);
            out.wg.push(wg);
        }
    }
    if !temps.is_empty() {
        out.value = f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64;
    }
    out
}

/// Gradient of the dual value with respect to the cost matrix, by reverse
/// accumulation through the kept iterations.
fn cost_gradient(tr: &Transport, n: usize, m: usize) -> DMatrix<f64> {
    let mut cbar = DMatrix::zeros(n, m);
    let mut fbar = vec![1.0 / n as f64; n];
    let mut gbar = vec![1.0 / m as f64; m];
    for t in (0..tr.wf.len()).rev() {
        // g_j = softmin_i(f_i - C_ij): d g_j / d f_i = -w_i, d g_j / d C_ij = w_i.
        let wg = &tr.wg[t];
        for j in 0..m {
            for i in 0..n {
                let c = gbar[j] * wg[(i, j)];
                fbar[i] -= c;
                cbar[(i, j)] += c;
            }
        }
        // f_i = softmin_j(g_j - C_ij) with g from the previous iteration, or zero.
        let wf = &tr.wf[t];
        let mut next_gbar = vec![0.0; m];
        for j in 0..m {
            for i in 0..n {
                let c = fbar[i] * wf[(i, j)];
                next_gbar[j] -= c;
                cbar[(i, j)] += c;
            }
        }
        gbar = next_gbar;
        fbar.iter_mut().for_each(|v| *v = 0.0);
    }
    cbar
}

fn check(a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidDataset("Sinkhorn divergence needs nonempty point clouds".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "point clouds have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("Sinkhorn epsilon {eps} must be positive")));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Sinkhorn cost matrix".into()));
    }
    Ok(())
}

/// `OT(A, B) - OT(A, A) / 2 - OT(B, B) / 2` and its gradients with respect
/// to the rows of `A` and `B`. The value may be slightly negative before
/// convergence.
pub fn sinkhorn_with_grad(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eps: f64,
    iters: usize,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    check(a, b, eps)?;
    let (n, m) = (a.nrows(), b.nrows());
    let ab = transport(&cost_matrix(a, b), eps, iters, true);
    let aa = transport(&cost_matrix(a, a), eps, iters, true);
    let bb = transport(&cost_matrix(b, b), eps, iters, true);
    let value = ab.value - 0.5 * aa.value - 0.5 * bb.value;

    let mut ga = DMatrix::zeros(a.nrows(), a.ncols());
    let mut gb = DMatrix::zeros(b.nrows(), b.ncols());
    // d C_ij / d x_i = 2 (x_i - y_j) and d C_ij / d y_j = -2 (x_i - y_j).
    let push = |cbar: &DMatrix<f64>, scale: f64, x: &DMatrix<f64>, y: &DMatrix<f64>, gx: &mut DMatrix<f64>, gy: &mut DMatrix<f64>| {
        for i in 0..x.nrows() {
            for j in 0..y.nrows() {
                let c = 2.0 * scale * cbar[(i, j)];
                if c == 0.0 {
                    continue;
                }
                for k in 0..x.ncols() {
                    let diff = x[(i, k)] - y[(j, k)];
                    gx[(i, k)] += c * diff;
                    gy[(j, k)] -= c * diff;
                }
            }
        }
    };
    push(&cost_gradient(&ab, n, m), 1.0, a, b, &mut ga, &mut gb);
    let mut ga2 = DMatrix::zeros(a.nrows(), a.ncols());
    let mut ga3 = DMatrix::zeros(a.nrows(), a.ncols());
    push(&cost_gradient(&aa, n, n), -0.5, a, a, &mut ga2, &mut ga3);
    let mut gb2 = DMatrix::zeros(b.nrows(), b.ncols());
    let mut gb3 = DMatrix::zeros(b.nrows(), b.ncols());
    push(&cost_gradient(&bb, m, m), -0.5, b, b, &mut gb2, &mut gb3);
    Ok((value, ga + ga2 + ga3, gb + gb2 + gb3))
}

/// Debiased Sinkhorn divergence, clipped at zero.
pub fn sinkhorn_divergence(a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64, iters: usize) -> Result<f64> {
    check(a, b, eps)?;
    let ab = transport(&cost_matrix(a, b), eps, iters, false).value;
    let aa = transport(&cost_matrix(a, a), eps, iters, false).value;
    let bb = transport(&cost_matrix(b, b), eps, iters, false).value;
    Ok((ab - 0.5 * aa - 0.5 * bb).max(0.0))
}

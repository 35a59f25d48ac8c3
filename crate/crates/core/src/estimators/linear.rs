//! Ridge regression and L2-regularized logistic regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    #[serde(with = "super::hex_f64")]
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_dim(self.weights.len(), x.ncols())?;
        Ok((0..x.nrows())
            .map(|i| self.intercept + (0..x.ncols()).map(|j| self.weights[j] * x[(i, j)]).sum::<f64>())
            .collect())
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!("model expects {expected} columns, got {actual}")))
    }
}

fn design(x: &DMatrix<f64>, intercept: bool) -> DMatrix<f64> {
    if intercept {
        x.clone().insert_column(0, 1.0)
    } else {
        x.clone()
    }
}

/// Minimizes `|Xw + b - y|^2 + penalty |w|^2` through the normal equations.
/// The intercept `b`, when fitted, is not penalized.
pub fn fit_ridge(x: &DMatrix<f64>, y: &[f64], penalty: f64, intercept: bool) -> Result<LinearModel> {
    if x.nrows() == 0 {
        return Err(Error::InvalidDataset("ridge regression needs at least one row".into()));
    }
    if y.len() != x.nrows() {
        return Err(Error::LengthMismatch {
            what: "ridge targets",
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::InvalidConfig(format!("ridge penalty {penalty} must be nonnegative")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge inputs".into()));
    }
    let a = design(x, intercept);
    let mut gram = a.transpose() * &a;
    for j in usize::from(intercept)..gram.ncols() {
        gram[(j, j)] += penalty;
    }
    let rhs = a.transpose() * DVector::from_column_slice(y);
    let sol = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular(format!("ridge normal equations with penalty {penalty}")))?,
    };
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("ridge normal equations with penalty {penalty}")));
    }
    let (b, w) = if intercept {
        (sol[0], sol.rows(1, x.ncols()).iter().copied().collect())
    } else {
        (0.0, sol.iter().copied().collect())
    };
    Ok(LinearModel { weights: w, intercept: b })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub linear: LinearModel,
    pub l2: f64,
    pub iterations: usize,
}

impl LogisticModel {
    pub fn logit(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.linear.predict(x)
    }

    pub fn propensity(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.logit(x)?.into_iter().map(crate::bench::sigmoid).collect())
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean log-loss plus `l2 / 2 |w|^2` (intercept unpenalized), with its
/// gradient, at parameters `[b, w]`.
pub fn logistic_objective(x: &DMatrix<f64>, t: &[u8], l2: f64, theta: &[f64]) -> (f64, Vec<f64>) {
    let n = x.nrows() as f64;
    let d = x.ncols();
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    for i in 0..x.nrows() {
        let z = theta[0] + (0..d).map(|j| theta[j + 1] * x[(i, j)]).sum::<f64>();
        let ti = f64::from(t[i]);
        loss += softplus(z) - ti * z;
        let r = crate::bench::sigmoid(z) - ti;
        grad[0] += r;
        for j in 0..d {
            grad[j + 1] += r * x[(i, j)];
        }
    }
    loss /= n;
    for g in &mut grad {
        *g /= n;
    }
    for j in 0..d {
        loss += 0.5 * l2 * theta[j + 1] * theta[j + 1];
        grad[j + 1] += l2 * theta[j + 1];
    }
    (loss, grad)
}

/// Newton's method with backtracking on the penalized mean log-loss.
pub fn fit_logistic(x: &DMatrix<f64>, t: &[u8], l2: f64) -> Result<LogisticModel> {
    if t.len() != x.nrows() {
        return Err(Error::LengthMismatch {
            what: "treatments",
            expected: x.nrows(),
            actual: t.len(),
        });
    }
    let n1 = t.iter().filter(|&&v| v == 1).count();
    if n1 == 0 {
        return Err(Error::EmptyArm("treated"));
    }
    if n1 == t.len() {
        return Err(Error::EmptyArm("control"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic covariates".into()));
    }
    let (n, d) = (x.nrows(), x.ncols());
    let a = design(x, true);
    let mut theta = vec![0.0; d + 1];
    let p = n1 as f64 / n as f64;
    theta[0] = (p / (1.0 - p)).ln();
    let (mut loss, mut grad) = logistic_objective(x, t, l2, &theta);
    let done = |theta: &[f64], iterations| LogisticModel {
        linear: LinearModel {
            intercept: theta[0],
            weights: theta[1..].to_vec(),
        },
        l2,
        iterations,
    };
    for iter in 0..200 {
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < 1e-10 {
            return Ok(done(&theta, iter));
        }
        let mut h = DMatrix::zeros(d + 1, d + 1);
        for i in 0..n {
            let z: f64 = (0..=d).map(|j| theta[j] * a[(i, j)]).sum();
            let s = crate::bench::sigmoid(z);
            let w = s * (1.0 - s) / n as f64;
            for j in 0..=d {
                for k in 0..=j {
                    h[(j, k)] += w * a[(i, j)] * a[(i, k)];
                }
            }
        }
        for j in 0..=d {
            for k in 0..j {
                h[(k, j)] = h[(j, k)];
            }
            h[(j, j)] += if j == 0 { 1e-12 } else { l2 };
        }
        let g = DVector::from_vec(grad.clone());
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone(),
        };
        // A Newton decrement at rounding level means no further progress is possible.
        if step.dot(&g) < 1e-24 {
            return Ok(done(&theta, iter));
        }
        let mut scale = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a - scale * s).collect();
            let (l, gr) = logistic_objective(x, t, l2, &cand);
            // Near the optimum the predicted decrease is below the rounding
            // level of the loss, so the full step is taken unchecked.
            let decrease = step.dot(&g);
            if decrease < 1e-10 || l <= loss + 1e-4 * scale * -decrease || scale < 1e-10 {
                theta = cand;
                loss = l;
                grad = gr;
                break;
            }
            scale *= 0.5;
        }
    }
    Err(Error::NoConvergence(format!(
        "logistic regression gradient norm {} after 200 Newton steps",
        grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    )))
}

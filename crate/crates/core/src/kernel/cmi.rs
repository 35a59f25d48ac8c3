//! k-nearest-neighbour estimate of conditional mutual information `I(U; A | X)`
//! in nats, using max-norm balls in the joint space.
//!
//! For each unit, `eps` is the distance to its k-th neighbour in `(U, A, X)`;
//! `n_ux`, `n_ax`, `n_x` count units strictly inside `eps` in the marginal
//! spaces, and the estimate is `psi(k) - mean(psi(n_ux + 1) + psi(n_ax + 1) - psi(n_x + 1))`.
//! When ties make `eps` zero, `k` is replaced by the number of units at zero
//! distance and the counts include the boundary.

use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};

fn standardized(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        v.iter().map(|x| (x - mean) / sd).collect()
    } else {
        vec![0.0; v.len()]
    }
}

pub fn conditional_mutual_information(u: &[f64], a: &[f64], x: &DMatrix<f64>, k: usize) -> Result<f64> {
    let n = u.len();
    if n < 20 {
        return Err(Error::InvalidDataset(format!("CMI needs at least 20 units, got {n}")));
    }
    if a.len() != n || x.nrows() != n {
        return Err(Error::LengthMismatch {
            what: "CMI inputs",
            expected: n,
            actual: if a.len() != n { a.len() } else { x.nrows() },
        });
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidConfig(format!("k = {k} must lie in 1..{n}")));
    }
    let all_finite = u.iter().chain(a).chain(x.iter()).all(|v| v.is_finite());
    if !all_finite {
        return Err(Error::NonFinite("CMI input".into()));
    }
    let u = standardized(u);
    let a = standardized(a);
    let xs: Vec<Vec<f64>> = (0..x.ncols())
        .map(|j| standardized(&x.column(j).iter().copied().collect::<Vec<_>>()))
        .collect();
    let dx = |i: usize, j: usize| xs.iter().fold(0.0f64, |m, c| m.max((c[i] - c[j]).abs()));

    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(n - 1);
            for j in (0..n).filter(|&j| j != i) {
                let x_d = dx(i, j);
                let u_d = (u[i] - u[j]).abs();
                let a_d = (a[i] - a[j]).abs();
                d.push((u_d.max(a_d).max(x_d), u_d.max(x_d), a_d.max(x_d), x_d));
            }
            let mut joint: Vec<f64> = d.iter().map(|t| t.0).collect();
            let (_, &mut eps, _) = joint.select_nth_unstable_by(k - 1, f64::total_cmp);
            let (k_i, inside): (usize, Box<dyn Fn(f64) -> bool>) = if eps > 0.0 {
                (k, Box::new(move |v: f64| v < eps))
            } else {
                (d.iter().filter(|t| t.0 == 0.0).count(), Box::new(|v: f64| v <= 0.0))
            };
            let n_ux = d.iter().filter(|t| inside(t.1)).count();
            let n_ax = d.iter().filter(|t| inside(t.2)).count();
            let n_x = d.iter().filter(|t| inside(t.3)).count();
            digamma(k_i as f64) - digamma(n_ux as f64 + 1.0) - digamma(n_ax as f64 + 1.0)
                + digamma(n_x as f64 + 1.0)
        })
        .collect();
    Ok((terms.iter().sum::<f64>() / n as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn independent_variables_give_near_zero() {
        let n = 2000;
        let x = DMatrix::from_column_slice(n, 1, &normals(n, 3));
        let v = conditional_mutual_information(&normals(n, 1), &normals(n, 2), &x, 5).unwrap();
        assert!(v < 0.02, "{v}");
    }

    #[test]
    fn copied_variable_gives_large_value() {
        let n = 2000;
        let u = normals(n, 1);
        let x = DMatrix::from_column_slice(n, 1, &normals(n, 3));
        let v = conditional_mutual_information(&u, &u, &x, 5).unwrap();
        assert!(v > 1.0, "{v}");
    }

    #[test]
    fn conditioning_removes_shared_information() {
        let n = 2000;
        let x0 = normals(n, 1);
        let x = DMatrix::from_column_slice(n, 1, &x0);
        let noise = normals(n, 2);
        let a: Vec<f64> = x0.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let v = conditional_mutual_information(&x0, &a, &x, 5).unwrap();
        assert!(v < 0.02, "{v}");
    }

    #[test]
    fn empty_conditioning_set_and_errors() {
        let n = 500;
        let u = normals(n, 1);
        let a: Vec<f64> = u.iter().zip(normals(n, 2)).map(|(x, e)| x + 0.5 * e).collect();
        let x = DMatrix::zeros(n, 0);
        let v = conditional_mutual_information(&u, &a, &x, 5).unwrap();
        // I = -0.5 ln(1 - rho^2) with rho^2 = 1 / 1.25
        let truth = -0.5 * (1.0f64 - 0.8).ln();
        assert!((v - truth).abs() < 0.1, "{v} vs {truth}");
        assert!(conditional_mutual_information(&u, &a, &x, n).is_err());
        assert!(conditional_mutual_information(&u[..10], &a[..10], &DMatrix::zeros(10, 0), 3).is_err());
    }

    #[test]
    fn binary_second_argument_is_supported() {
        let n = 1000;
        let u = normals(n, 1);
        let t: Vec<f64> = u.iter().map(|&v| f64::from(u8::from(v > 0.0))).collect();
        let x = DMatrix::from_column_slice(n, 1, &normals(n, 4));
        let informative = conditional_mutual_information(&u, &t, &x, 5).unwrap();
        let noise = conditional_mutual_information(&normals(n, 7), &t, &x, 5).unwrap();
        assert!(informative > noise + 0.2, "{informative} vs {noise}");
    }
}

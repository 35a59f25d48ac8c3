//! Independent reference implementations shared by the integration tests and
//! the acceptance suite.
#![allow(dead_code)]

use nalgebra::DMatrix;
use proci::data::{DatasetParts, ObservationalDataset, VariableMeta};
use proci::estimators::{Activation, Balance, NetSpec, OutcomeKind, TwoHeadNet};
use proci::rng::rng_from;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn dataset(x: DMatrix<f64>, t: Vec<u8>, y: Vec<f64>) -> ObservationalDataset {
    let d = x.ncols();
    ObservationalDataset::new(DatasetParts {
        name: "test".into(),
        intro: "Test data.".into(),
        covariates: x,
        treatments: t,
        outcomes: y,
        covariate_meta: (0..d).map(|j| VariableMeta::covariate(format!("x{j}"), "feature")).collect(),
        treatment_meta: VariableMeta::treatment("t", "treatment"),
        outcome_meta: VariableMeta::outcome("y", "outcome"),
    })
    .unwrap()
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Normwise relative error `|g - fd| / max(|g|, |fd|)` of an analytic gradient
/// against central differences with step `h`.
pub fn gradient_error(f: impl Fn(&[f64]) -> f64, params: &[f64], grad: &[f64], h: f64) -> f64 {
    let mut p = params.to_vec();
    let mut diff = 0.0;
    let mut gn = 0.0;
    let mut fn2 = 0.0;
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + h;
        let up = f(&p);
        p[k] = orig - h;
        let down = f(&p);
        p[k] = orig;
        let fd = (up - down) / (2.0 * h);
        diff += (fd - grad[k]).powi(2);
        gn += grad[k] * grad[k];
        fn2 += fd * fd;
    }
    diff.sqrt() / gn.sqrt().max(fn2.sqrt()).max(1e-300)
}

/// A random two-headed network, batch and optional balance penalty.
pub struct NetCase {
    pub net: TwoHeadNet,
    pub params: Vec<f64>,
    pub x: DMatrix<f64>,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
}

pub fn random_net_case(seed: u64) -> NetCase {
    let mut rng = rng_from(seed);
    let d = rng.random_range(1..=5);
    let width = |rng: &mut ChaCha8Rng| rng.random_range(2..=8);
    let enc_layers = rng.random_range(1..=2);
    let head_layers = rng.random_range(1..=2);
    let spec = NetSpec {
        encoder: (0..enc_layers).map(|_| width(&mut rng)).collect(),
        head: (0..head_layers).map(|_| width(&mut rng)).collect(),
        activation: if rng.random::<bool>() { Activation::Elu } else { Activation::Relu },
        seed,
    };
    let outcome = if rng.random::<bool>() { OutcomeKind::Binary } else { OutcomeKind::Continuous };
    let net = TwoHeadNet::new(d, &spec, outcome).unwrap();
    let mut params = net.init(seed);
    for p in params.iter_mut() {
        *p += 0.1 * normal(&mut rng);
    }
    let m = rng.random_range(4..=12);
    let x = DMatrix::from_fn(m, d, |_, _| normal(&mut rng));
    let mut t: Vec<u8> = (0..m).map(|_| u8::from(rng.random::<bool>())).collect();
    t[0] = 0;
    t[1] = 1;
    let y = (0..m)
        .map(|_| match outcome {
            OutcomeKind::Binary => f64::from(u8::from(rng.random::<bool>())),
            OutcomeKind::Continuous => normal(&mut rng),
        })
        .collect();
    NetCase { net, params, x, t, y }
}

pub fn net_gradient_error(case: &NetCase, balance: Option<Balance>) -> f64 {
    let loss = case.net.batch_loss(&case.params, &case.x, &case.t, &case.y, balance).unwrap();
    gradient_error(
        |p| case.net.batch_loss(p, &case.x, &case.t, &case.y, balance).unwrap().total,
        &case.params,
        &loss.grad,
        1e-5,
    )
}

/// Naive-loop metric implementations written directly from their definitions.
pub mod naive_metrics {
    use std::collections::BTreeSet;

    pub fn pehe(y0: &[f64], y1: &[f64], tau: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..tau.len() {
            let r = (y1[i] - y0[i]) - tau[i];
            acc += r * r;
        }
        acc / tau.len() as f64
    }

    pub fn ate_error(y0: &[f64], y1: &[f64], tau: &[f64]) -> f64 {
        let mut truth = 0.0;
        let mut est = 0.0;
        for i in 0..tau.len() {
            truth += y1[i] - y0[i];
            est += tau[i];
        }
        (truth / tau.len() as f64 - est / tau.len() as f64).abs()
    }

    fn set_mean(set: &BTreeSet<usize>, y: &[f64]) -> f64 {
        let mut s = 0.0;
        for &i in set {
            s += y[i];
        }
        s / set.len() as f64
    }

    /// `None` when an intersected cell is empty but carries weight.
    pub fn policy_risk(t: &[u8], y: &[f64], mask: &[bool], tau: &[f64]) -> Option<f64> {
        let e: BTreeSet<usize> = (0..t.len()).filter(|&i| mask[i]).collect();
        let a1: BTreeSet<usize> = (0..t.len()).filter(|&i| tau[i] > 0.0).collect();
        let a0: BTreeSet<usize> = (0..t.len()).filter(|&i| !(tau[i] > 0.0)).collect();
        let t1: BTreeSet<usize> = (0..t.len()).filter(|&i| t[i] == 1).collect();
        let t0: BTreeSet<usize> = (0..t.len()).filter(|&i| t[i] == 0).collect();
        let a1e: BTreeSet<usize> = a1.intersection(&e).copied().collect();
        let a0e: BTreeSet<usize> = a0.intersection(&e).copied().collect();
        let c1: BTreeSet<usize> = a1e.intersection(&t1).copied().collect();
        let c0: BTreeSet<usize> = a0e.intersection(&t0).copied().collect();
        let mut value = 0.0;
        if !a1e.is_empty() {
            if c1.is_empty() {
                return None;
            }
            value += set_mean(&c1, y) * a1e.len() as f64 / e.len() as f64;
        }
        if !a0e.is_empty() {
            if c0.is_empty() {
                return None;
            }
            value += set_mean(&c0, y) * a0e.len() as f64 / e.len() as f64;
        }
        Some(1.0 - value)
    }

    /// Reference ATT from the truth when given, else from randomized arm means.
    pub fn att_error(t: &[u8], y: &[f64], mask: &[bool], truth: Option<(&[f64], &[f64])>, tau: &[f64]) -> f64 {
        let treated: Vec<usize> = (0..t.len()).filter(|&i| mask[i] && t[i] == 1).collect();
        let control: Vec<usize> = (0..t.len()).filter(|&i| mask[i] && t[i] == 0).collect();
        let avg = |idx: &[usize], v: &dyn Fn(usize) -> f64| idx.iter().map(|&i| v(i)).sum::<f64>() / idx.len() as f64;
        let reference = match truth {
            Some((y0, y1)) => avg(&treated, &|i| y1[i] - y0[i]),
            None => avg(&treated, &|i| y[i]) - avg(&control, &|i| y[i]),
        };
        (reference - avg(&treated, &|i| tau[i])).abs()
    }
}

/// A random benchmark of `n` units with truth, randomized mask and binary or
/// continuous outcomes, plus random effect estimates.
pub fn random_metric_instance(
    seed: u64,
    with_truth: bool,
) -> (proci::bench::BenchmarkDataset, proci::metrics::EffectEstimates) {
    let mut rng = rng_from(seed);
    let n = rng.random_range(4..=50);
    let binary = rng.random::<bool>();
    let mut t: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
    t[0] = 1;
    t[1] = 0;
    let draw = |rng: &mut ChaCha8Rng| {
        if binary {
            f64::from(u8::from(rng.random::<bool>()))
        } else {
            normal(rng)
        }
    };
    let y0: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
    let y1: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
    let y: Vec<f64> = (0..n).map(|i| if t[i] == 1 { y1[i] } else { y0[i] }).collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
    mask[0] = true;
    mask[1] = true;
    let tau: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < 0.1 { 0.0 } else { normal(&mut rng) })
        .collect();
    let x = DMatrix::from_fn(n, 1, |_, _| normal(&mut rng));
    let ds = proci::bench::BenchmarkDataset {
        base: dataset(x, t, y),
        column_ids: vec![0],
        true_y0: with_truth.then_some(y0),
        true_y1: with_truth.then_some(y1),
        randomized_mask: mask,
        hidden: Vec::new(),
        selection: None,
    };
    (ds, proci::metrics::EffectEstimates::from_effects(tau))
}

/// Loop-only KCIT statistic: explicit centring matrix, Gauss-Jordan inverse
/// and triple-loop products.
pub mod naive_kcit {
    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
    }

    /// Median of the nonzero pairwise distances; `None` when all rows coincide.
    pub fn bandwidth(rows: &[Vec<f64>]) -> Option<f64> {
        let mut d = Vec::new();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let v = dist(&rows[i], &rows[j]);
                if v != 0.0 {
                    d.push(v);
                }
            }
        }
        if d.is_empty() {
            return None;
        }
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = d.len();
        Some(if m % 2 == 1 { d[m / 2] } else { (d[m / 2 - 1] + d[m / 2]) / 2.0 })
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut c = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    }

    /// `H K H` of the RBF kernel of `rows`; zero when the block is empty or constant.
    pub fn centred_kernel(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = rows.len();
        let Some(s) = rows.first().filter(|r| !r.is_empty()).and(bandwidth(rows)) else {
            return vec![vec![0.0; n]; n];
        };
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = (-dist(&rows[i], &rows[j]).powi(2) / (2.0 * s * s)).exp();
            }
        }
        let mut h = vec![vec![-1.0 / n as f64; n]; n];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        matmul(&matmul(&h, &k), &h)
    }

    fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = r.clone();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n).max_by(|&p, &q| m[p][col].abs().partial_cmp(&m[q][col].abs()).unwrap()).unwrap();
            m.swap(col, pivot);
            let d = m[col][col];
            for v in m[col].iter_mut() {
                *v /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = m[r][col];
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    /// `(1/n^2) [Tr(Ky Kt) - Tr(Ky Kz (Kz Kz / n + gamma I)^-1 Kz Kt) / n]`.
    pub fn statistic(y: &[Vec<f64>], t: &[f64], z: &[Vec<f64>], gamma: f64) -> f64 {
        let n = t.len();
        let nf = n as f64;
        let ky = centred_kernel(y);
        let kt = centred_kernel(&t.iter().map(|&v| vec![v]).collect::<Vec<_>>());
        let kz = centred_kernel(z);
        let mut reg = matmul(&kz, &kz);
        for (i, row) in reg.iter_mut().enumerate() {
            for v in row.iter_mut() {
                *v /= nf;
            }
            row[i] += gamma;
        }
        let first = matmul(&ky, &kt);
        let second = matmul(&matmul(&matmul(&matmul(&ky, &kz), &inverse(&reg)), &kz), &kt);
        let mut tr = 0.0;
        for i in 0..n {
            tr += first[i][i] - second[i][i] / nf;
        }
        tr / (nf * nf)
    }
}

/// A random KCIT instance with `n` in `[6, 20]`: two outcome columns, a
/// binary treatment with both arms and up to three conditioning columns.
pub fn random_kcit_instance(seed: u64) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let mut rng = rng_from(seed);
    let n = rng.random_range(6..=20);
    let q = rng.random_range(0..=3);
    let z = DMatrix::from_fn(n, q, |_, _| normal(&mut rng));
    let mut t: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
    t[0] = 0.0;
    t[1] = 1.0;
    let y = DMatrix::from_fn(n, 2, |i, j| {
        let zs: f64 = (0..q).map(|c| z[(i, c)]).sum();
        zs + j as f64 * t[i] + normal(&mut rng)
    });
    (y, t, z)
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

//! Two-headed outcome networks: TARNet, and CFR with a Sinkhorn balance
//! penalty on the representation.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::nn::{Activation, Adam, Mlp};
use super::sinkhorn::sinkhorn_with_grad;
use super::EstimatorConfig;
use crate::bench::sigmoid;
use crate::data::ObservationalDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, label_hash, rng_from};

/// Architecture of the shared encoder and the two outcome heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Hidden widths of the encoder; the last is the representation width.
    pub encoder: Vec<usize>,
    /// Hidden widths of each head, before the scalar output.
    pub head: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl NetSpec {
    /// Two encoder layers of width `d_phi` and two head layers of width `d_h`.
    pub fn standard(d_phi: usize, d_h: usize, seed: u64) -> Self {
        Self {
            encoder: vec![d_phi, d_phi],
            head: vec![d_h, d_h],
            activation: Activation::Elu,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeKind {
    /// Squared error on the standardized outcome.
    Continuous,
    /// Cross-entropy on logits.
    Binary,
}

/// Network layout plus the input and outcome scaling learned on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoHeadNet {
    pub encoder: Mlp,
    pub head: Mlp,
    pub outcome: OutcomeKind,
    #[serde(with = "super::hex_f64")]
    pub x_mean: Vec<f64>,
    #[serde(with = "super::hex_f64")]
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

/// Loss pieces and gradient of one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub factual: f64,
    pub penalty: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub weight: f64,
    pub epsilon: f64,
    pub iters: usize,
}

impl TwoHeadNet {
    pub fn new(input: usize, spec: &NetSpec, outcome: OutcomeKind) -> Result<Self> {
        if spec.encoder.is_empty() {
            return Err(Error::InvalidConfig("the encoder needs at least one hidden layer".into()));
        }
        let mut enc = vec![input];
        enc.extend(&spec.encoder);
        let rep = *spec.encoder.last().expect("nonempty");
        let mut head = vec![rep];
        head.extend(&spec.head);
        head.push(1);
        Ok(Self {
            encoder: Mlp::new(enc, spec.activation, true)?,
            head: Mlp::new(head, spec.activation, false)?,
            outcome,
            x_mean: vec![0.0; input],
            x_scale: vec![1.0; input],
            y_mean: 0.0,
            y_scale: 1.0,
        })
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + 2 * self.head.n_params()
    }

    fn split<'a>(&self, p: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (e, h) = (self.encoder.n_params(), self.head.n_params());
        (&p[..e], &p[e..e + h], &p[e + h..e + 2 * h])
    }

    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(derive_seed(seed, label_hash("init")));
        let mut p = self.encoder.init(&mut rng);
        p.extend(self.head.init(&mut rng));
        p.extend(self.head.init(&mut rng));
        p
    }

    /// Applies the stored input scaling.
    pub fn scale_inputs(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.x_mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.x_mean.len()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_scale[j]))
    }

    pub fn scale_outcome(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_scale
    }

    /// Mean factual loss plus the weighted balance penalty, and the gradient,
    /// on already scaled inputs and outcomes.
    pub fn batch_loss(&self, p: &[f64], x: &DMatrix<f64>, t: &[u8], y: &[f64], balance: Option<Balance>) -> Result<BatchLoss> {
        self.encoder.check(&p[..self.encoder.n_params()], x)?;
        if p.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!("{} parameters, expected {}", p.len(), self.n_params())));
        }
        let m = x.nrows();
        let (pe, p0, p1) = self.split(p);
        let enc = self.encoder.forward(pe, x);
        let rep = &enc.output;
        let arms: [Vec<usize>; 2] = [
            (0..m).filter(|&i| t[i] == 0).collect(),
            (0..m).filter(|&i| t[i] == 1).collect(),
        ];
        let mut grad = vec![0.0; p.len()];
        let (ne, nh) = (self.encoder.n_params(), self.head.n_params());
        let mut rep_grad = DMatrix::zeros(m, rep.ncols());
        let mut factual = 0.0;
        let mut arm_reps = Vec::with_capacity(2);
        for (arm, rows) in arms.iter().enumerate() {
            let r = rep.select_rows(rows);
            if rows.is_empty() {
                arm_reps.push(r);
                continue;
            }
            let ph = if arm == 0 { p0 } else { p1 };
            let tr = self.head.forward(ph, &r);
            let mut g_out = DMatrix::zeros(rows.len(), 1);
            for (k, &i) in rows.iter().enumerate() {
                let f = tr.output[(k, 0)];
                let (l, d) = match self.outcome {
                    OutcomeKind::Continuous => (0.5 * (f - y[i]).powi(2), f - y[i]),
                    OutcomeKind::Binary => {
                        let sp = if f > 0.0 { f + (-f).exp().ln_1p() } else { f.exp().ln_1p() };
                        (sp - y[i] * f, sigmoid(f) - y[i])
                    }
                };
                factual += l;
                g_out[(k, 0)] = d / m as f64;
            }
            let off = ne + arm * nh;
            let g_in = self.head.backward(ph, &tr, &g_out, &mut grad[off..off + nh]);
            for (k, &i) in rows.iter().enumerate() {
                rep_grad.row_mut(i).copy_from(&g_in.row(k));
            }
            arm_reps.push(r);
        }
        factual /= m as f64;
        let mut penalty = 0.0;
        if let Some(b) = balance.filter(|b| b.weight > 0.0) {
            if arms[0].is_empty() || arms[1].is_empty() {
                return Err(Error::EmptyArm(if arms[0].is_empty() { "control" } else { "treated" }));
            }
            let (s, g1, g0) = sinkhorn_with_grad(&arm_reps[1], &arm_reps[0], b.epsilon, b.iters)?;
            penalty = s;
            for (k, &i) in arms[1].iter().enumerate() {
                for c in 0..rep.ncols() {
                    rep_grad[(i, c)] += b.weight * g1[(k, c)];
                }
            }
            for (k, &i) in arms[0].iter().enumerate() {
                for c in 0..rep.ncols() {
                    rep_grad[(i, c)] += b.weight * g0[(k, c)];
                }
            }
        }
        self.encoder.backward(pe, &enc, &rep_grad, &mut grad[..ne]);
        let weight = balance.map_or(0.0, |b| b.weight);
        Ok(BatchLoss {
            factual,
            penalty,
            total: factual + weight * penalty,
            grad,
        })
    }

    /// Head outputs on the outcome scale: `(mu0, mu1)` per row.
    pub fn potential_outcomes(&self, p: &[f64], x: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let xs = self.scale_inputs(x)?;
        let (pe, p0, p1) = self.split(p);
        let rep = self.encoder.forward(pe, &xs).output;
        let out = |ph: &[f64]| -> Vec<f64> {
            self.head
                .forward(ph, &rep)
                .output
                .iter()
                .map(|&f| match self.outcome {
                    OutcomeKind::Continuous => self.y_mean + self.y_scale * f,
                    OutcomeKind::Binary => sigmoid(f),
                })
                .collect()
        };
        Ok((out(p0), out(p1)))
    }

    /// Representation of raw inputs.
    pub fn represent(&self, p: &[f64], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let xs = self.scale_inputs(x)?;
        Ok(self.encoder.forward(&p[..self.encoder.n_params()], &xs).output)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetModel {
    pub net: TwoHeadNet,
    pub spec: NetSpec,
    pub balance: Option<Balance>,
    #[serde(with = "super::hex_f64")]
    pub params: Vec<f64>,
    pub history: TrainingHistory,
}

impl NetModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (mu0, mu1) = self.net.potential_outcomes(&self.params, x)?;
        Ok(mu1.iter().zip(&mu0).map(|(a, b)| a - b).collect())
    }
}

fn column_stats(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    (0..x.ncols())
        .map(|j| {
            let mean = x.column(j).sum() / n;
            let sd = (x.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        })
        .unzip()
}

fn outcome_kind(ds: &ObservationalDataset) -> OutcomeKind {
    if ds.has_binary_outcome() {
        OutcomeKind::Binary
    } else {
        OutcomeKind::Continuous
    }
}

/// Mini-batches of one epoch: a seeded shuffle cut into consecutive chunks.
/// A chunk missing an arm is replaced by a fresh random draw of the same
/// size until both arms are present.
fn epoch_batches(t: &[u8], batch_size: usize, rng: &mut impl rand::Rng) -> Result<Vec<Vec<usize>>> {
    let n = t.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut batch = chunk.to_vec();
        let mut tries = 0;
        while !(batch.iter().any(|&i| t[i] == 1) && batch.iter().any(|&i| t[i] == 0)) {
            tries += 1;
            if tries > 1000 || batch.len() < 2 {
                return Err(Error::EmptyArm("mini-batch"));
            }
            batch = sample(rng, n, batch.len()).into_vec();
        }
        out.push(batch);
    }
    Ok(out)
}

/// Trains on `train` with early stopping on the factual loss of `val`.
/// Returns the parameters of the best validation epoch.
pub fn fit_two_head(
    train: &ObservationalDataset,
    val: &ObservationalDataset,
    cfg: &EstimatorConfig,
    spec: &NetSpec,
    balance: Option<Balance>,
) -> Result<NetModel> {
    cfg.validate()?;
    let (n0, n1) = train.arm_counts();
    if n1 == 0 {
        return Err(Error::EmptyArm("treated"));
    }
    if n0 == 0 {
        return Err(Error::EmptyArm("control"));
    }
    if val.n() == 0 {
        return Err(Error::InvalidDataset("validation split is empty".into()));
    }
    if val.d() != train.d() {
        return Err(Error::DimensionMismatch(format!("validation has {} columns, training {}", val.d(), train.d())));
    }
    let mut net = TwoHeadNet::new(train.d(), spec, outcome_kind(train))?;
    if cfg.standardize_inputs {
        let (m, s) = column_stats(train.covariates());
        net.x_mean = m;
        net.x_scale = s;
    }
    if net.outcome == OutcomeKind::Continuous {
        let y = train.outcomes();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        net.y_mean = mean;
        net.y_scale = if sd > 0.0 { sd } else { 1.0 };
    }
    let xt = net.scale_inputs(train.covariates())?;
    let yt: Vec<f64> = train.outcomes().iter().map(|&v| net.scale_outcome(v)).collect();
    let xv = net.scale_inputs(val.covariates())?;
    let yv: Vec<f64> = val.outcomes().iter().map(|&v| net.scale_outcome(v)).collect();
    let t = train.treatments();

    let mut params = net.init(spec.seed);
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut rng = rng_from(derive_seed(spec.seed, label_hash("batches")));
    let mut best = params.clone();
    let mut history = TrainingHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    for epoch in 1..=cfg.max_epochs {
        let mut train_loss = 0.0;
        let batches = epoch_batches(t, cfg.batch_size, &mut rng)?;
        for (k, rows) in batches.iter().enumerate() {
            let xb = xt.select_rows(rows);
            let tb: Vec<u8> = rows.iter().map(|&i| t[i]).collect();
            let yb: Vec<f64> = rows.iter().map(|&i| yt[i]).collect();
            let loss = net.batch_loss(&params, &xb, &tb, &yb, balance)?;
            if !loss.total.is_finite() || loss.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("non-finite loss or gradient in batch {k} (loss {})", loss.total),
                });
            }
            train_loss += loss.total * rows.len() as f64;
            adam.step(&mut params, &loss.grad);
        }
        train_loss /= t.len() as f64;
        let val_loss = net.batch_loss(&params, &xv, val.treatments(), &yv, None)?.factual;
        if !val_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best.copy_from_slice(&params);
        }
        if epoch - history.best_epoch >= cfg.patience {
            break;
        }
    }
    Ok(NetModel {
        net,
        spec: spec.clone(),
        balance,
        params: best,
        history,
    })
}

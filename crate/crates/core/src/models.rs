//! Classifiers, conditional generators and the shared loss arithmetic.

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::tensor::{Graph, Mat, Var};
use ndarray::Axis;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Probabilities are clamped below at this value before taking logs.
pub const KL_FLOOR: f64 = 1e-12;

/// Hidden widths cycled through by client-custom classifiers.
pub const CUSTOM_WIDTHS: [usize; 3] = [32, 48, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierArch {
    Shared,
    Custom(usize),
}

/// Two-layer MLP `rep_dim -> hidden -> 2` over representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub hidden: usize,
    pub l1: Linear,
    pub l2: Linear,
    pub params: ParamStore,
}

impl Classifier {
    pub fn new(arch: ClassifierArch, rep_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let l1 = Linear::new(&mut params, "fc1", rep_dim, hidden, rng);
        let l2 = Linear::new(&mut params, "fc2", hidden, NUM_CLASSES, rng);
        Self {
            arch,
            hidden,
            l1,
            l2,
            params,
        }
    }

    /// Client `k`'s custom classifier, width taken from [`CUSTOM_WIDTHS`].
    pub fn custom_for_client(k: usize, rep_dim: usize, rng: &mut impl Rng) -> Self {
        Self::new(
            ClassifierArch::Custom(k),
            rep_dim,
            CUSTOM_WIDTHS[k % CUSTOM_WIDTHS.len()],
            rng,
        )
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let h = self.l1.forward(g, p, x);
        let h = g.relu(h);
        self.l2.forward(g, p, h)
    }

    /// Logits for a batch of representations.
    pub fn logits(&self, x: &Mat) -> Mat {
        let h = self.l1.apply(&self.params, x).mapv(|v| v.max(0.0));
        self.l2.apply(&self.params, &h)
    }

    pub fn with_params(&self, params: ParamStore) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics collected by a training-mode generator pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<ndarray::Array1<f64>>,
    pub var: Vec<ndarray::Array1<f64>>,
}

/// Conditional generator `(z, onehot(y)) -> rep_dim`: three dense layers,
/// the first two followed by batch norm and ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub noise_dim: usize,
    pub rep_dim: usize,
    pub hidden: usize,
    pub layers: [Linear; 3],
    /// `(gain, bias)` slots of the two batch-norm layers.
    pub bn: [(usize, usize); 2],
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
    pub params: ParamStore,
}

impl Generator {
    pub fn new(noise_dim: usize, rep_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = ParamStore::new();
        let l1 = Linear::new(&mut p, "fc1", noise_dim + NUM_CLASSES, hidden, rng);
        let bn1 = (
            p.push("bn1.gain", Mat::ones((1, hidden))),
            p.push("bn1.bias", Mat::zeros((1, hidden))),
        );
        let l2 = Linear::new(&mut p, "fc2", hidden, hidden, rng);
        let bn2 = (
            p.push("bn2.gain", Mat::ones((1, hidden))),
            p.push("bn2.bias", Mat::zeros((1, hidden))),
        );
        let l3 = Linear::new(&mut p, "fc3", hidden, rep_dim, rng);
        Self {
            noise_dim,
            rep_dim,
            hidden,
            layers: [l1, l2, l3],
            bn: [bn1, bn2],
            running_mean: vec![vec![0.0; hidden]; 2],
            running_var: vec![vec![1.0; hidden]; 2],
            params: p,
        }
    }

    fn check_inputs(&self, z: &Mat, y: &Mat) -> Result<()> {
        if z.ncols() != self.noise_dim || y.ncols() != NUM_CLASSES || z.nrows() != y.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "generator expects z: n x {} and y: n x {}, got {:?} and {:?}",
                self.noise_dim,
                NUM_CLASSES,
                z.dim(),
                y.dim()
            )));
        }
        Ok(())
    }

    /// Training-mode pass on the tape (batch statistics). Batches of one
    /// have no defined variance and are rejected.
    pub fn forward_train(&self, g: &mut Graph, p: &[Var], z: &Mat, y: &Mat) -> Result<(Var, BatchStats)> {
        self.check_inputs(z, y)?;
        if z.nrows() < 2 {
            return Err(Error::InvalidInput(
                "batch norm in training mode needs at least 2 samples".into(),
            ));
        }
        let zv = g.constant(z.clone());
        let yv = g.constant(y.clone());
        let mut h = g.concat_cols(&[zv, yv]);
        let mut stats = BatchStats {
            mean: Vec::new(),
            var: Vec::new(),
        };
        for (i, (gain, bias)) in self.bn.iter().enumerate() {
            h = self.layers[i].forward(g, p, h);
            let hv = g.value(h);
            let n = hv.nrows() as f64;
            let mean = hv.sum_axis(Axis(0)) / n;
            let var = (hv - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / n;
            stats.mean.push(mean);
            stats.var.push(var);
            h = g.batch_norm(h, p[*gain], p[*bias], BN_EPS);
            h = g.relu(h);
        }
        Ok((self.layers[2].forward(g, p, h), stats))
    }

    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        for i in 0..2 {
            for j in 0..self.hidden {
                self.running_mean[i][j] =
                    (1.0 - BN_MOMENTUM) * self.running_mean[i][j] + BN_MOMENTUM * stats.mean[i][j];
                self.running_var[i][j] =
                    (1.0 - BN_MOMENTUM) * self.running_var[i][j] + BN_MOMENTUM * stats.var[i][j];
            }
        }
    }

    /// Evaluation-mode pass using running statistics.
    pub fn generate(&self, z: &Mat, y: &Mat) -> Result<Mat> {
        self.check_inputs(z, y)?;
        let mut h = ndarray::concatenate(Axis(1), &[z.view(), y.view()]).expect("rows agree");
        for (i, (gain, bias)) in self.bn.iter().enumerate() {
            h = self.layers[i].apply(&self.params, &h);
            let gv = &self.params.values[*gain];
            let bv = &self.params.values[*bias];
            for mut row in h.rows_mut() {
                for j in 0..self.hidden {
                    let xhat = (row[j] - self.running_mean[i][j]) / (self.running_var[i][j] + BN_EPS).sqrt();
                    row[j] = (gv[[0, j]] * xhat + bv[[0, j]]).max(0.0);
                }
            }
        }
        Ok(self.layers[2].apply(&self.params, &h))
    }

    pub fn sample_noise(&self, n: usize, rng: &mut impl Rng) -> Mat {
        Mat::from_shape_fn((n, self.noise_dim), |_| rng.sample(StandardNormal))
    }
}

pub fn one_hot(labels: &[usize]) -> Mat {
    let mut m = Mat::zeros((labels.len(), NUM_CLASSES));
    for (i, &y) in labels.iter().enumerate() {
        m[[i, y]] = 1.0;
    }
    m
}

/// `KL(p || q)` with both arguments clamped below at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pi = pi.max(KL_FLOOR);
            let qi = qi.max(KL_FLOOR);
            pi * (pi.ln() - qi.ln())
        })
        .sum()
}

/// Row-wise `KL(softmax(a) || softmax(b))`, `n x 1`.
pub fn kl_rows(g: &mut Graph, logits_p: Var, logits_q: Var) -> Var {
    let lp = g.log_softmax(logits_p);
    let lq = g.log_softmax(logits_q);
    let p = g.exp(lp);
    let d = g.sub(lp, lq);
    let m = g.mul(p, d);
    g.sum_rows(m)
}

/// Batch-mean `KL(softmax(a) || softmax(b))`.
pub fn mean_kl(g: &mut Graph, logits_p: Var, logits_q: Var) -> Var {
    let k = kl_rows(g, logits_p, logits_q);
    g.mean(k)
}

/// Per-sample negative log-likelihood, `n x 1`.
pub fn nll_rows(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let ls = g.log_softmax(logits);
    let idx: Rc<[(usize, usize)]> = labels.iter().enumerate().map(|(i, &y)| (i, y)).collect();
    let picked = g.pick(ls, idx);
    g.neg(picked)
}

/// Mean cross-entropy.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let n = nll_rows(g, logits, labels);
    g.mean(n)
}

/// Global class prior and per-client class shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub prior: [f64; NUM_CLASSES],
    /// `coef[k][y]`: client k's share of all class-y samples.
    pub coef: Vec<[f64; NUM_CLASSES]>,
    /// Classes absent everywhere; their shares fall back to uniform.
    pub missing_classes: Vec<usize>,
}

pub fn estimate_label_distribution(counts: &[[usize; NUM_CLASSES]]) -> Result<LabelDistribution> {
    if counts.is_empty() {
        return Err(Error::InvalidInput("no client label counts".into()));
    }
    let mut col = [0usize; NUM_CLASSES];
    for c in counts {
        for y in 0..NUM_CLASSES {
            col[y] += c[y];
        }
    }
    let total: usize = col.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("all label counts are zero".into()));
    }
    let k = counts.len();
    let mut missing = Vec::new();
    let mut coef = vec![[0.0; NUM_CLASSES]; k];
    for y in 0..NUM_CLASSES {
        if col[y] == 0 {
            log::warn!("class {y} has no samples on any client; using uniform client shares");
            missing.push(y);
            for c in coef.iter_mut() {
                c[y] = 1.0 / k as f64;
            }
        } else {
            for (c, cnt) in coef.iter_mut().zip(counts) {
                c[y] = cnt[y] as f64 / col[y] as f64;
            }
        }
    }
    let mut prior = [0.0; NUM_CLASSES];
    for y in 0..NUM_CLASSES {
        prior[y] = col[y] as f64 / total as f64;
    }
    Ok(LabelDistribution {
        prior,
        coef,
        missing_classes: missing,
    })
}

impl LabelDistribution {
    pub fn sample_labels(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for y in 0..NUM_CLASSES {
                    acc += self.prior[y];
                    if u < acc {
                        return y;
                    }
                }
                NUM_CLASSES - 1
            })
            .collect()
    }
}

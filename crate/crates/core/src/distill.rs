//! Data-free training of the global generator against client classifiers.

use crate::error::{Error, Result};
use crate::models::{kl_rows, nll_rows, one_hot, Classifier, Generator, LabelDistribution};
use crate::nn::{Adam, AdamConfig};
use crate::tensor::{Graph, Mat, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Also train the global classifier as a student of the client ensemble.
    pub updates_d: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            updates_d: true,
        }
    }
}

/// One sampled experience set: noise, conditioning labels.
#[derive(Debug, Clone)]
pub struct ExperienceSet {
    pub z: Mat,
    pub labels: Vec<usize>,
}

impl ExperienceSet {
    pub fn sample(gen: &Generator, dist: &LabelDistribution, n: usize, rng: &mut impl Rng) -> Self {
        let labels = dist.sample_labels(n, rng);
        let z = gen.sample_noise(n, rng);
        Self { z, labels }
    }
}

/// Loss of pseudo samples `pseudo` (conditioned on `labels`) under the
/// global classifier `d` and frozen client teachers.
///
/// `(1/K) sum_k sum_i coef[k][y_i] * (KL(teacher_k || d) + CE(teacher_k, y_i))`.
pub fn global_generator_loss(
    g: &mut Graph,
    pseudo: Var,
    labels: &[usize],
    (d, pd): (&Classifier, &[Var]),
    teachers: &[Classifier],
    dist: &LabelDistribution,
) -> Result<Var> {
    if teachers.len() != dist.coef.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} teachers but {} label-share rows",
            teachers.len(),
            dist.coef.len()
        )));
    }
    let student = d.forward(g, pd, pseudo);
    let mut total: Option<Var> = None;
    for (k, t) in teachers.iter().enumerate() {
        let pt = t.params.bind(g, false);
        let logits = t.forward(g, &pt, pseudo);
        let kl = kl_rows(g, logits, student);
        let ce = nll_rows(g, logits, labels);
        let per = g.add(kl, ce);
        let w = Mat::from_shape_fn((labels.len(), 1), |(i, _)| dist.coef[k][labels[i]]);
        let w = g.constant(w);
        let weighted = g.mul(per, w);
        let s = g.sum(weighted);
        total = Some(match total {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidInput("no client classifiers".into()))?;
    Ok(g.scale(total, 1.0 / teachers.len() as f64))
}

/// Runs `cfg.steps` optimisation steps on fresh experience sets. Returns
/// the per-step losses.
pub fn train_global_generator(
    gen: &mut Generator,
    d: &mut Classifier,
    teachers: &[Classifier],
    dist: &LabelDistribution,
    cfg: &DistillConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    for t in teachers {
        d.params.check_same_shape(&t.params)?;
    }
    let adam = AdamConfig::new(cfg.learning_rate, cfg.weight_decay);
    let mut opt_g = Adam::new(adam, &gen.params);
    let mut opt_d = Adam::new(adam, &d.params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let exp = ExperienceSet::sample(gen, dist, cfg.batch_size, rng);
        let mut g = Graph::new();
        let pg = gen.params.bind(&mut g, true);
        let pd = d.params.bind(&mut g, cfg.updates_d);
        let (pseudo, stats) = gen.forward_train(&mut g, &pg, &exp.z, &one_hot(&exp.labels))?;
        let loss = global_generator_loss(&mut g, pseudo, &exp.labels, (d, &pd), teachers, dist)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("global generator loss {v} at step {step}")));
        }
        let grads = g.backward(loss);
        let gg = gen.params.collect_grads(&grads, &pg);
        opt_g.step(&mut gen.params, &gg);
        gen.update_running_stats(&stats);
        if cfg.updates_d {
            let gd = d.params.collect_grads(&grads, &pd);
            opt_d.step(&mut d.params, &gd);
        }
        losses.push(v);
    }
    Ok(losses)
}

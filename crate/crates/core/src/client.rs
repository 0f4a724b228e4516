//! One client's local round: classifier, backbone and local-generator stages.

use crate::backbone::{Backbone, GateNoise};
use crate::data::{LocalGraph, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::models::{cross_entropy, kl_rows, one_hot, Classifier, Generator};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::{softmax_rows, Graph, Mat, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Nodes used for the pooled representation and other RL probe statistics.
pub const PROBE_NODES: usize = 64;

/// Label source for the local generator's conditioning in the third stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stage3Labels {
    #[default]
    Uniform,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientHyper {
    pub alpha_dis: f64,
    pub gamma_adv: f64,
    pub mu_con: f64,
    pub tau_con: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub stage3_labels: Stage3Labels,
}

impl Default for ClientHyper {
    fn default() -> Self {
        Self {
            alpha_dis: 1.0,
            gamma_adv: 0.1,
            mu_con: 0.5,
            tau_con: 0.5,
            local_epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            stage3_labels: Stage3Labels::Uniform,
        }
    }
}

impl ClientHyper {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha_dis, self.gamma_adv, self.mu_con, self.weight_decay];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Validation("loss weights must be finite and non-negative".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Validation("local_epochs must be at least 1".into()));
        }
        if !(self.tau_con > 0.0) {
            return Err(Error::Validation("tau_con must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Validation("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.weight_decay)
    }
}

/// Everything a client owns between rounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub backbone: Backbone,
    pub d1: Classifier,
    pub d2: Classifier,
    pub gen: Generator,
    /// Backbone parameters at the end of the previous round.
    pub prev_backbone: ParamStore,
}

/// Broadcast from the server at the start of a round.
#[derive(Debug, Clone)]
pub struct Globals {
    pub backbone: ParamStore,
    pub d: ParamStore,
    pub gen: Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpload {
    pub client: usize,
    pub backbone: ParamStore,
    /// Backbone parameters when local training began (after mixing).
    pub backbone_start: ParamStore,
    pub d1: ParamStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub pooled_rep: Vec<f64>,
    pub pred_dist: [f64; NUM_CLASSES],
    pub loss: f64,
    pub local_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub client: usize,
    pub stage1_loss: f64,
    pub stage2_loss: f64,
    pub stage3_loss: f64,
    pub probe: ProbeStats,
}

/// Mean `KL(softmax(D1(r)) || softmax(D1(x~)))`.
pub fn distill_loss(g: &mut Graph, d1: &Classifier, p1: &[Var], reps: Var, pseudo: Var) -> Var {
    let a = d1.forward(g, p1, reps);
    let b = d1.forward(g, p1, pseudo);
    let k = kl_rows(g, a, b);
    g.mean(k)
}

/// Mean `KL(softmax(D1(r)) || softmax(D2(r)))`.
pub fn adversarial_loss(
    g: &mut Graph,
    d1: &Classifier,
    p1: &[Var],
    d2: &Classifier,
    p2: &[Var],
    reps: Var,
) -> Var {
    let a = d1.forward(g, p1, reps);
    let b = d2.forward(g, p2, reps);
    let k = kl_rows(g, a, b);
    g.mean(k)
}

/// Per-row contrastive loss, `n x 1`, with cosine similarity.
pub fn contrastive_rows(g: &mut Graph, r: Var, r_glo: Var, r_pre: Var, tau: f64) -> Var {
    let zero_norm = |m: &Mat| m.rows().into_iter().any(|row| row.iter().all(|v| *v == 0.0));
    if zero_norm(g.value(r)) || zero_norm(g.value(r_glo)) || zero_norm(g.value(r_pre)) {
        log::warn!("zero-norm representation in contrastive loss; cosine taken as 0");
    }
    let pos = g.cosine_rows(r, r_glo);
    let neg = g.cosine_rows(r, r_pre);
    let logits = g.concat_cols(&[pos, neg]);
    let logits = g.scale(logits, 1.0 / tau);
    let ls = g.log_softmax(logits);
    let first = g.select_col(ls, 0);
    g.neg(first)
}

pub fn contrastive_loss(g: &mut Graph, r: Var, r_glo: Var, r_pre: Var, tau: f64) -> Var {
    let rows = contrastive_rows(g, r, r_glo, r_pre, tau);
    g.mean(rows)
}

/// `exp(-(1/N^2) sum_ij ||x_i - x_j|| * ||z_i - z_j||)`.
pub fn diversity_loss(g: &mut Graph, pseudo: Var, z: &Mat) -> Result<Var> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::InvalidInput("diversity loss needs at least 2 samples".into()));
    }
    if g.value(pseudo).nrows() != n {
        return Err(Error::ShapeMismatch("pseudo samples and noise differ in count".into()));
    }
    let nn = (n * n) as f64;
    let w = Mat::from_shape_fn((n, n), |(i, j)| {
        let d: f64 = z
            .row(i)
            .iter()
            .zip(z.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        d / nn
    });
    let s = g.pairwise_dist_weighted(pseudo, Rc::new(w));
    let s = g.neg(s);
    Ok(g.exp(s))
}

/// Tape handles of the classifier-stage loss and its parts.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Terms {
    pub cls: Var,
    pub dis: Var,
    pub dis2: Var,
    pub adv: Var,
    pub advg: Var,
    pub total: Var,
}

/// Inputs to one classifier-stage minibatch. `global_pseudo` is generated
/// by the global generator with `labels`; `local_pseudo` by the client's.
pub struct Stage1Batch<'a> {
    pub reps: &'a Mat,
    pub labels: &'a [usize],
    pub global_pseudo: &'a Mat,
    pub local_pseudo: &'a Mat,
}

pub fn stage1_loss(
    g: &mut Graph,
    (d1, p1): (&Classifier, &[Var]),
    (d2, p2): (&Classifier, &[Var]),
    batch: &Stage1Batch,
    hyper: &ClientHyper,
) -> Stage1Terms {
    let r = g.constant(batch.reps.clone());
    let xg = g.constant(batch.global_pseudo.clone());
    let xl = g.constant(batch.local_pseudo.clone());

    let l1 = d1.forward(g, p1, r);
    let l2 = d2.forward(g, p2, r);
    let lg1 = d1.forward(g, p1, xg);
    let lg2 = d2.forward(g, p2, xg);
    let c = [
        cross_entropy(g, l1, batch.labels),
        cross_entropy(g, l2, batch.labels),
        cross_entropy(g, lg1, batch.labels),
        cross_entropy(g, lg2, batch.labels),
    ];
    let c01 = g.add(c[0], c[1]);
    let c23 = g.add(c[2], c[3]);
    let cls = g.add(c01, c23);

    let k = kl_rows(g, l1, lg1);
    let dis = g.mean(k);
    let k = kl_rows(g, l2, lg2);
    let dis2 = g.mean(k);
    let k = kl_rows(g, l1, l2);
    let adv = g.mean(k);
    let ll1 = d1.forward(g, p1, xl);
    let ll2 = d2.forward(g, p2, xl);
    let k = kl_rows(g, ll1, ll2);
    let advg = g.mean(k);

    let d = g.add(dis, dis2);
    let d = g.scale(d, hyper.alpha_dis);
    let a = g.sub(advg, adv);
    let a = g.scale(a, hyper.gamma_adv);
    let total = g.add(cls, d);
    let total = g.add(total, a);
    Stage1Terms {
        cls,
        dis,
        dis2,
        adv,
        advg,
        total,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stage2Terms {
    pub cls: Var,
    pub adv: Var,
    pub con: Var,
    pub total: Var,
}

/// Backbone-stage loss on the rows `rows` of `reps`; `r_glo` and `r_pre`
/// hold the matching global and previous-round representations.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss(
    g: &mut Graph,
    reps: Var,
    rows: &[usize],
    labels: &[usize],
    r_glo: &Mat,
    r_pre: &Mat,
    (d1, p1): (&Classifier, &[Var]),
    (d2, p2): (&Classifier, &[Var]),
    hyper: &ClientHyper,
) -> Stage2Terms {
    let idx: Rc<[usize]> = Rc::from(rows.to_vec());
    let r = g.gather_rows(reps, idx.clone());
    let l1 = d1.forward(g, p1, r);
    let l2 = d2.forward(g, p2, r);
    let c1 = cross_entropy(g, l1, labels);
    let c2 = cross_entropy(g, l2, labels);
    let cls = g.add(c1, c2);
    let k = kl_rows(g, l1, l2);
    let adv = g.mean(k);
    let rg = g.constant(r_glo.select(ndarray::Axis(0), rows));
    let rp = g.constant(r_pre.select(ndarray::Axis(0), rows));
    let con = contrastive_loss(g, r, rg, rp, hyper.tau_con);
    let a = g.scale(adv, hyper.gamma_adv);
    let c = g.scale(con, hyper.mu_con);
    let total = g.add(cls, a);
    let total = g.add(total, c);
    Stage2Terms {
        cls,
        adv,
        con,
        total,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stage3Terms {
    pub cls: Var,
    pub advg: Var,
    pub var: Var,
    pub total: Var,
}

/// Generator-stage loss for `pseudo = G_k(z, labels)`.
pub fn stage3_loss(
    g: &mut Graph,
    pseudo: Var,
    z: &Mat,
    labels: &[usize],
    (d1, p1): (&Classifier, &[Var]),
    (d2, p2): (&Classifier, &[Var]),
) -> Result<Stage3Terms> {
    let l1 = d1.forward(g, p1, pseudo);
    let l2 = d2.forward(g, p2, pseudo);
    let cls = cross_entropy(g, l1, labels);
    let k = kl_rows(g, l1, l2);
    let advg = g.mean(k);
    let var = diversity_loss(g, pseudo, z)?;
    let t = g.sub(cls, advg);
    let total = g.add(t, var);
    Ok(Stage3Terms {
        cls,
        advg,
        var,
        total,
    })
}

fn check_finite(v: f64, what: &str, client: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("client {client}: {what} loss is {v}")))
    }
}

fn minibatches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn sample_stage3_labels(n: usize, graph: &LocalGraph, mode: Stage3Labels, rng: &mut impl Rng) -> Vec<usize> {
    match mode {
        Stage3Labels::Uniform => (0..n).map(|_| rng.gen_range(0..NUM_CLASSES)).collect(),
        Stage3Labels::Local => (0..n)
            .map(|_| graph.labels[rng.gen_range(0..graph.labels.len())])
            .collect(),
    }
}

impl ClientState {
    pub fn new(id: usize, backbone: Backbone, d1: Classifier, d2: Classifier, gen: Generator) -> Self {
        let prev_backbone = backbone.params.clone();
        Self {
            id,
            backbone,
            d1,
            d2,
            gen,
            prev_backbone,
        }
    }

    /// Probe statistics from noise-free inference on the local graph.
    pub fn probe(&self, graph: &LocalGraph) -> ProbeStats {
        let reps = self.backbone.infer_greedy(graph);
        probe_stats(&reps, &self.d1, &graph.labels)
    }

    fn stage1(&mut self, graph: &LocalGraph, globals: &Globals, hyper: &ClientHyper, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut opt1 = Adam::new(hyper.adam(), &self.d1.params);
        let mut opt2 = Adam::new(hyper.adam(), &self.d2.params);
        let mut total = 0.0;
        let mut steps = 0usize;
        for _ in 0..hyper.local_epochs {
            let noise = GateNoise::sample(graph.num_nodes(), rng);
            let reps = self.backbone.infer(graph, &noise);
            for rows in minibatches(graph.num_nodes(), hyper.batch_size, rng) {
                let labels: Vec<usize> = rows.iter().map(|&i| graph.labels[i]).collect();
                let y = one_hot(&labels);
                let zg = globals.gen.sample_noise(rows.len(), rng);
                let zl = self.gen.sample_noise(rows.len(), rng);
                let global_pseudo = globals.gen.generate(&zg, &y)?;
                let local_pseudo = self.gen.generate(&zl, &y)?;
                let batch_reps = reps.select(ndarray::Axis(0), &rows);
                let mut g = Graph::new();
                let p1 = self.d1.params.bind(&mut g, true);
                let p2 = self.d2.params.bind(&mut g, true);
                let batch = Stage1Batch {
                    reps: &batch_reps,
                    labels: &labels,
                    global_pseudo: &global_pseudo,
                    local_pseudo: &local_pseudo,
                };
                let t = stage1_loss(&mut g, (&self.d1, &p1), (&self.d2, &p2), &batch, hyper);
                let loss = g.scalar(t.total);
                check_finite(loss, "classifier", self.id)?;
                let grads = g.backward(t.total);
                let g1 = self.d1.params.collect_grads(&grads, &p1);
                let g2 = self.d2.params.collect_grads(&grads, &p2);
                opt1.step(&mut self.d1.params, &g1);
                opt2.step(&mut self.d2.params, &g2);
                total += loss;
                steps += 1;
            }
        }
        Ok(total / steps.max(1) as f64)
    }

    fn stage2(&mut self, graph: &LocalGraph, globals: &Globals, hyper: &ClientHyper, rng: &mut ChaCha8Rng) -> Result<f64> {
        let r_glo = self
            .backbone
            .with_params(globals.backbone.clone())
            .infer_greedy(graph);
        let r_pre = self
            .backbone
            .with_params(self.prev_backbone.clone())
            .infer_greedy(graph);
        let mut opt = Adam::new(hyper.adam(), &self.backbone.params);
        let mut total = 0.0;
        let mut steps = 0usize;
        for _ in 0..hyper.local_epochs {
            for rows in minibatches(graph.num_nodes(), hyper.batch_size, rng) {
                let labels: Vec<usize> = rows.iter().map(|&i| graph.labels[i]).collect();
                let noise = GateNoise::sample(graph.num_nodes(), rng);
                let mut g = Graph::new();
                let pb = self.backbone.params.bind(&mut g, true);
                let p1 = self.d1.params.bind(&mut g, false);
                let p2 = self.d2.params.bind(&mut g, false);
                let out = self.backbone.forward(&mut g, &pb, graph, &noise);
                let t = stage2_loss(
                    &mut g,
                    out.reps,
                    &rows,
                    &labels,
                    &r_glo,
                    &r_pre,
                    (&self.d1, &p1),
                    (&self.d2, &p2),
                    hyper,
                );
                let loss = g.scalar(t.total);
                check_finite(loss, "backbone", self.id)?;
                let grads = g.backward(t.total);
                let gb = self.backbone.params.collect_grads(&grads, &pb);
                opt.step(&mut self.backbone.params, &gb);
                total += loss;
                steps += 1;
            }
        }
        Ok(total / steps.max(1) as f64)
    }

    fn stage3(&mut self, graph: &LocalGraph, hyper: &ClientHyper, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut opt = Adam::new(hyper.adam(), &self.gen.params);
        let steps_per_epoch = graph.num_nodes().div_ceil(hyper.batch_size).max(1);
        let mut total = 0.0;
        let mut steps = 0usize;
        for _ in 0..hyper.local_epochs {
            for _ in 0..steps_per_epoch {
                let n = hyper.batch_size;
                let labels = sample_stage3_labels(n, graph, hyper.stage3_labels, rng);
                let z = self.gen.sample_noise(n, rng);
                let mut g = Graph::new();
                let pg = self.gen.params.bind(&mut g, true);
                let p1 = self.d1.params.bind(&mut g, false);
                let p2 = self.d2.params.bind(&mut g, false);
                let (pseudo, stats) = self.gen.forward_train(&mut g, &pg, &z, &one_hot(&labels))?;
                let t = stage3_loss(&mut g, pseudo, &z, &labels, (&self.d1, &p1), (&self.d2, &p2))?;
                let loss = g.scalar(t.total);
                check_finite(loss, "generator", self.id)?;
                let grads = g.backward(t.total);
                let gg = self.gen.params.collect_grads(&grads, &pg);
                opt.step(&mut self.gen.params, &gg);
                self.gen.update_running_stats(&stats);
                total += loss;
                steps += 1;
            }
        }
        Ok(total / steps.max(1) as f64)
    }

    /// Runs the three local stages in order. The caller has already mixed
    /// the downloaded globals into this state.
    pub fn run_local_round(
        &mut self,
        graph: &LocalGraph,
        globals: &Globals,
        hyper: &ClientHyper,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ClientUpload, ClientRoundMetrics)> {
        hyper.validate()?;
        if graph.num_nodes() == 0 {
            return Err(Error::InvalidInput(format!("client {} has an empty shard", self.id)));
        }
        let start = self.backbone.params.clone();
        let s1 = self.stage1(graph, globals, hyper, rng)?;
        let s2 = self.stage2(graph, globals, hyper, rng)?;
        let s3 = self.stage3(graph, hyper, rng)?;
        self.prev_backbone = self.backbone.params.clone();
        let metrics = ClientRoundMetrics {
            client: self.id,
            stage1_loss: s1,
            stage2_loss: s2,
            stage3_loss: s3,
            probe: self.probe(graph),
        };
        let upload = ClientUpload {
            client: self.id,
            backbone: self.backbone.params.clone(),
            backbone_start: start,
            d1: self.d1.params.clone(),
        };
        Ok((upload, metrics))
    }
}

/// Pooled representation, mean predicted distribution, loss and accuracy
/// over the first [`PROBE_NODES`] rows; accuracy uses every row.
pub fn probe_stats(reps: &Mat, clf: &Classifier, labels: &[usize]) -> ProbeStats {
    let n = reps.nrows();
    let logits = clf.logits(reps);
    let probs = softmax_rows(&logits);
    let correct = (0..n)
        .filter(|&i| crate::backbone::argmax(probs.row(i).as_slice().unwrap()) == labels[i])
        .count();
    let m = n.min(PROBE_NODES);
    let mut pooled = vec![0.0; reps.ncols()];
    let mut pred = [0.0; NUM_CLASSES];
    let mut loss = 0.0;
    for i in 0..m {
        for (acc, v) in pooled.iter_mut().zip(reps.row(i)) {
            *acc += v;
        }
        for (y, p) in pred.iter_mut().enumerate() {
            *p += probs[[i, y]];
        }
        loss -= probs[[i, labels[i]]].max(crate::models::KL_FLOOR).ln();
    }
    let denom = m.max(1) as f64;
    pooled.iter_mut().for_each(|v| *v /= denom);
    pred.iter_mut().for_each(|v| *v /= denom);
    ProbeStats {
        pooled_rep: pooled,
        pred_dist: pred,
        loss: loss / denom,
        local_acc: correct as f64 / n.max(1) as f64,
    }
}

//! End-to-end federated runs: FedRio, FedAvg and FedProx.

use crate::aggregate::{aggregate, aggregate_classifier, aggregate_round, mean_client_weight, MaskConfig, Masks};
use crate::backbone::{Aggregator, Backbone, BackboneConfig, GateConfig, GateNoise};
use crate::client::{ClientHyper, ClientRoundMetrics, ClientState, ClientUpload, Globals, ProbeStats};
use crate::data::{
    dirichlet_partition, generate_synthetic_bot_graph, label_histogram, load_dataset, stratified_split,
    ClientShard, DatasetSource, GraphDataset, LocalGraph, PartitionSpec, Split, SplitFractions,
    SyntheticGraphConfig, NUM_CLASSES,
};
use crate::distill::{train_global_generator, DistillConfig};
use crate::error::{Error, Result};
use crate::models::{cross_entropy, estimate_label_distribution, one_hot, Classifier, ClassifierArch, Generator, LabelDistribution};
use crate::nn::{derive_seed, stream, Adam, AdamConfig, ParamStore};
use crate::rl::{QNetwork, apply_client_update, build_state, compute_reward, momenta, state_len, Agent, AgentConfig, RewardConfig, Transition, ACTION_GRID};
use crate::tensor::{Graph, Mat, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

const TAG_DATA: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_PARTITION: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_CLIENT: u64 = 5;
const TAG_SERVER: u64 = 6;
const TAG_AGENT: u64 = 7;
const TAG_NOISE: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Fedrio,
    Fedavg,
    Fedprox,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Fedrio => "fedrio",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SyntheticGraphConfig),
    Csv { nodes: String, edges: String },
    Json { path: String },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticGraphConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub rep_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub aggregator: Aggregator,
    pub gate: GateConfig,
    pub classifier_hidden: usize,
    pub noise_dim: usize,
    pub generator_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rep_dim: 32,
            hidden_dim: 64,
            layers: 2,
            aggregator: Aggregator::Mean,
            gate: GateConfig::default(),
            classifier_hidden: 64,
            noise_dim: 16,
            generator_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// NA: uniform masks, no mask learning.
    pub disable_masks: bool,
    /// NR: every client takes the full global download.
    pub disable_rl: bool,
    /// NC: plain propagation over the raw adjacency.
    pub disable_adaptive_mp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RewardSource {
    #[default]
    Real,
    Synthetic,
}

/// Replaces one client's backbone update with Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyClient {
    pub client: usize,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub split: SplitFractions,
    pub alpha: f64,
    pub num_clients: usize,
    pub rounds: usize,
    pub model: ModelConfig,
    pub client: ClientHyper,
    pub distill: DistillConfig,
    pub masks: MaskConfig,
    pub rl: AgentConfig,
    pub reward: RewardConfig,
    pub reward_source: RewardSource,
    pub fedprox_mu: f64,
    pub ablation: Ablation,
    pub noisy_client: Option<NoisyClient>,
    /// Run client rounds on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Fedrio,
            seed: 0,
            dataset: DatasetConfig::default(),
            split: SplitFractions::default(),
            alpha: 0.1,
            num_clients: 10,
            rounds: 100,
            model: ModelConfig::default(),
            client: ClientHyper::default(),
            distill: DistillConfig::default(),
            masks: MaskConfig::default(),
            rl: AgentConfig::default(),
            reward: RewardConfig::default(),
            reward_source: RewardSource::Real,
            fedprox_mu: 0.01,
            ablation: Ablation::default(),
            noisy_client: None,
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::Validation("num_clients must be at least 2".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Validation("rounds must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Validation("alpha must be positive".into()));
        }
        if !(self.fedprox_mu >= 0.0) {
            return Err(Error::Validation("fedprox_mu must be non-negative".into()));
        }
        if self.model.rep_dim == 0 || self.model.hidden_dim == 0 || self.model.layers == 0 {
            return Err(Error::Validation("model dimensions must be positive".into()));
        }
        if self.model.noise_dim == 0 {
            return Err(Error::Validation("noise_dim must be positive".into()));
        }
        if !(self.model.gate.temperature > 0.0) {
            return Err(Error::Validation("gate temperature must be positive".into()));
        }
        if self.distill.batch_size < 2 || self.masks.batch_size == 0 {
            return Err(Error::Validation("distill batch_size must be >= 2 and mask batch_size >= 1".into()));
        }
        if let Some(n) = self.noisy_client {
            if n.client >= self.num_clients || !(n.std >= 0.0) {
                return Err(Error::Validation("noisy_client must name a valid client and std >= 0".into()));
            }
        }
        let s = self.split;
        if s.train <= 0.0 || s.val <= 0.0 || s.test < 0.0 || ((s.train + s.val + s.test) - 1.0).abs() > 1e-9 {
            return Err(Error::Validation("split fractions must be positive and sum to 1".into()));
        }
        self.client.validate()?;
        self.reward.validate()?;
        self.rl.validate()?;
        Ok(())
    }

    pub fn backbone_config(&self, input_dim: usize) -> BackboneConfig {
        let mut b = BackboneConfig::new(input_dim, self.model.rep_dim);
        b.hidden_dim = self.model.hidden_dim;
        b.layers = self.model.layers;
        b.aggregator = self.model.aggregator;
        b.gate = self.model.gate;
        b.adaptive = !self.ablation.disable_adaptive_mp;
        b
    }
}

/// Loads or generates the dataset and draws its split.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<GraphDataset> {
    let split_seed = derive_seed(cfg.seed, &[TAG_SPLIT]);
    match &cfg.dataset {
        DatasetConfig::Synthetic(syn) => {
            let mut syn = *syn;
            syn.seed = derive_seed(cfg.seed, &[TAG_DATA]);
            let ds = generate_synthetic_bot_graph(&syn)?;
            stratified_split(ds, cfg.split, split_seed)
        }
        DatasetConfig::Csv { nodes, edges } => load_dataset(
            &DatasetSource::Csv {
                nodes: nodes.clone(),
                edges: edges.clone(),
            },
            cfg.split,
            split_seed,
        ),
        DatasetConfig::Json { path } => load_dataset(&DatasetSource::Json { path: path.clone() }, cfg.split, split_seed),
    }
}

pub fn partition(cfg: &ExperimentConfig, ds: &GraphDataset) -> Result<Vec<ClientShard>> {
    dirichlet_partition(
        ds,
        &PartitionSpec {
            alpha: cfg.alpha,
            num_clients: cfg.num_clients,
            seed: derive_seed(cfg.seed, &[TAG_PARTITION]),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RoundLosses {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classifier: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub backbone: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generator: Vec<f64>,
    /// Plain local training loss of the baselines.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub local: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_generator: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub acc: f64,
    pub f1: f64,
    pub losses: RoundLosses,
    pub client_acc: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_consistency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_weight: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub rounds: usize,
    pub best_acc: f64,
    pub best_f1: f64,
    pub best_round: usize,
    pub target: f64,
    /// `None` when the target was never reached.
    pub rounds_to_target: Option<usize>,
    pub final_feature_consistency: Option<f64>,
}

/// First 1-based round whose accuracy reaches `target`.
pub fn rounds_to_target(accs: &[f64], target: f64) -> Option<usize> {
    accs.iter().position(|&a| a >= target).map(|i| i + 1)
}

pub fn summarize(method: Method, records: &[RoundRecord], target: f64) -> Result<RunSummary> {
    let best = records
        .iter()
        .fold(None::<&RoundRecord>, |b, r| match b {
            Some(b) if b.acc >= r.acc => Some(b),
            _ => Some(r),
        })
        .ok_or_else(|| Error::InvalidInput("no round records".into()))?;
    let accs: Vec<f64> = records.iter().map(|r| r.acc).collect();
    Ok(RunSummary {
        method,
        rounds: records.len(),
        best_acc: best.acc,
        best_f1: records.iter().map(|r| r.f1).fold(0.0, f64::max),
        best_round: best.t,
        target,
        rounds_to_target: rounds_to_target(&accs, target),
        final_feature_consistency: records.last().and_then(|r| r.feature_consistency),
    })
}

/// Accuracy and macro-F1 of `pred` against `truth`.
pub fn accuracy_f1(pred: &[usize], truth: &[usize]) -> (f64, f64) {
    let n = truth.len().max(1) as f64;
    let acc = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / n;
    let mut f1 = 0.0;
    for c in 0..NUM_CLASSES {
        let tp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t != c).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|(p, t)| **p != c && **t == c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        f1 += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    (acc, f1 / NUM_CLASSES as f64)
}

fn predict(clf: &Classifier, reps: &Mat) -> Vec<usize> {
    let l = clf.logits(reps);
    l.rows()
        .into_iter()
        .map(|r| crate::backbone::argmax(r.as_slice().unwrap()))
        .collect()
}

/// Accuracy and macro-F1 on `nodes` of the full graph, noise-free gates.
pub fn evaluate(backbone: &Backbone, clf: &Classifier, full: &LocalGraph, nodes: &[usize]) -> (f64, f64) {
    let reps = backbone.infer_greedy(full).select(ndarray::Axis(0), nodes);
    let truth: Vec<usize> = nodes.iter().map(|&i| full.labels[i]).collect();
    accuracy_f1(&predict(clf, &reps), &truth)
}

/// Spread of per-client class centroids relative to the class gap inside
/// each client. Zero when every client maps the probe set identically.
pub fn feature_consistency_score(reps: &[Mat], labels: &[usize]) -> Result<f64> {
    if reps.len() < 2 {
        return Err(Error::InvalidInput("consistency needs at least 2 clients".into()));
    }
    let centroids: Vec<Vec<Vec<f64>>> = reps
        .iter()
        .map(|r| {
            (0..NUM_CLASSES)
                .map(|c| {
                    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                    if rows.is_empty() {
                        return Err(Error::InvalidInput(format!("probe set has no class {c}")));
                    }
                    let m = r.select(ndarray::Axis(0), &rows).mean_axis(ndarray::Axis(0)).unwrap();
                    Ok(m.to_vec())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let k = reps.len();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            for c in 0..NUM_CLASSES {
                inter += dist(&centroids[i][c], &centroids[j][c]);
                pairs += 1;
            }
        }
    }
    inter /= pairs as f64;
    let intra = centroids.iter().map(|c| dist(&c[0], &c[1])).sum::<f64>() / k as f64;
    if inter == 0.0 {
        return Ok(0.0);
    }
    if intra == 0.0 {
        return Err(Error::NonFinite("clients collapse both classes to one point".into()));
    }
    Ok(inter / intra)
}

/// `(mu / 2) * sum ||theta - theta_global||^2` over bound parameters.
pub fn prox_term(g: &mut Graph, p: &[Var], global: &ParamStore, mu: f64) -> Var {
    let mut total: Option<Var> = None;
    for (v, gv) in p.iter().zip(&global.values) {
        let c = g.constant(gv.clone());
        let d = g.sub(*v, c);
        let sq = g.mul(d, d);
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    let t = total.unwrap_or_else(|| g.scalar_const(0.0));
    g.scale(t, mu / 2.0)
}

/// Cross-entropy local training for the baselines, optionally with a
/// proximal pull towards `prox = (mu, global backbone, global classifier)`.
pub fn baseline_local_train(
    backbone: &mut Backbone,
    clf: &mut Classifier,
    graph: &LocalGraph,
    hyper: &ClientHyper,
    prox: Option<(f64, &ParamStore, &ParamStore)>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let adam = AdamConfig::new(hyper.learning_rate, hyper.weight_decay);
    let mut opt_b = Adam::new(adam, &backbone.params);
    let mut opt_c = Adam::new(adam, &clf.params);
    let mut total = 0.0;
    let mut steps = 0usize;
    for _ in 0..hyper.local_epochs {
        let mut order: Vec<usize> = (0..graph.num_nodes()).collect();
        order.shuffle(rng);
        for rows in order.chunks(hyper.batch_size) {
            let labels: Vec<usize> = rows.iter().map(|&i| graph.labels[i]).collect();
            let noise = GateNoise::sample(graph.num_nodes(), rng);
            let mut g = Graph::new();
            let pb = backbone.params.bind(&mut g, true);
            let pc = clf.params.bind(&mut g, true);
            let out = backbone.forward(&mut g, &pb, graph, &noise);
            let r = g.gather_rows(out.reps, std::rc::Rc::from(rows.to_vec()));
            let logits = clf.forward(&mut g, &pc, r);
            let mut loss = cross_entropy(&mut g, logits, &labels);
            if let Some((mu, gb, gc)) = prox {
                if mu > 0.0 {
                    let a = prox_term(&mut g, &pb, gb, mu);
                    let b = prox_term(&mut g, &pc, gc, mu);
                    loss = g.add(loss, a);
                    loss = g.add(loss, b);
                }
            }
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("local loss {v}")));
            }
            let grads = g.backward(loss);
            let gb = backbone.params.collect_grads(&grads, &pb);
            let gc = clf.params.collect_grads(&grads, &pc);
            opt_b.step(&mut backbone.params, &gb);
            opt_c.step(&mut clf.params, &gc);
            total += v;
            steps += 1;
        }
    }
    Ok(total / steps.max(1) as f64)
}

/// Global models held by the server.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerState {
    pub backbone: Backbone,
    pub d: Classifier,
    pub gen: Generator,
    pub masks: Masks,
}

/// Model state at the end of a round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub round: usize,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_network: Option<QNetwork>,
}

/// A federated run advanced one round at a time.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub ds: GraphDataset,
    pub shards: Vec<ClientShard>,
    pub dist: LabelDistribution,
    pub val_nodes: Vec<usize>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub agent: Option<Agent>,
    pub state: Vec<f64>,
    pub round: usize,
    pub last_uploads: Vec<ClientUpload>,
    pub records: Vec<RoundRecord>,
    /// Wall-clock seconds per round, kept apart from the records.
    pub timings: Vec<f64>,
}

struct ClientOutcome {
    upload: ClientUpload,
    metrics: Option<ClientRoundMetrics>,
    local_loss: Option<f64>,
    probe: ProbeStats,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = prepare_dataset(&cfg)?;
        let shards = partition(&cfg, &ds)?;
        let dist = estimate_label_distribution(&label_histogram(&shards))?;
        let val_nodes = ds.nodes_in(Split::Val);
        let mut rng = stream(cfg.seed, &[TAG_INIT]);
        let m = cfg.model;
        let backbone = Backbone::new(cfg.backbone_config(ds.feature_dim()), &mut rng);
        let d = Classifier::new(ClassifierArch::Shared, m.rep_dim, m.classifier_hidden, &mut rng);
        let gen = Generator::new(m.noise_dim, m.rep_dim, m.generator_hidden, &mut rng);
        let masks = Masks::uniform(&backbone.params, cfg.num_clients);
        let clients: Vec<ClientState> = (0..cfg.num_clients)
            .map(|k| {
                let mut r = stream(cfg.seed, &[TAG_INIT, k as u64 + 1]);
                let d2 = Classifier::custom_for_client(k, m.rep_dim, &mut r);
                let g_k = Generator::new(m.noise_dim, m.rep_dim, m.generator_hidden, &mut r);
                ClientState::new(k, backbone.clone(), d.clone(), d2, g_k)
            })
            .collect();
        let agent = (cfg.method == Method::Fedrio && !cfg.ablation.disable_rl).then(|| {
            Agent::new(
                cfg.rl.clone(),
                state_len(cfg.num_clients, m.rep_dim),
                cfg.num_clients,
                cfg.reward.discount,
                &mut stream(cfg.seed, &[TAG_AGENT]),
            )
        });
        let mut exp = Self {
            cfg,
            ds,
            shards,
            dist,
            val_nodes,
            server: ServerState { backbone, d, gen, masks },
            clients,
            agent,
            state: Vec::new(),
            round: 0,
            last_uploads: Vec::new(),
            records: Vec::new(),
            timings: Vec::new(),
        };
        if exp.agent.is_some() {
            let probes: Vec<ProbeStats> = exp
                .clients
                .iter()
                .zip(&exp.shards)
                .map(|(c, s)| c.probe(&s.local_graph(&exp.ds)))
                .collect();
            let reports: Vec<(usize, &ProbeStats)> = probes.iter().enumerate().collect();
            exp.state = build_state(&reports, exp.cfg.num_clients, exp.cfg.model.rep_dim)?;
        }
        Ok(exp)
    }

    pub fn is_done(&self) -> bool {
        self.round >= self.cfg.rounds
    }

    fn globals(&self) -> Globals {
        Globals {
            backbone: self.server.backbone.params.clone(),
            d: self.server.d.params.clone(),
            gen: self.server.gen.clone(),
        }
    }

    fn run_clients(&mut self, alphas: &[f64]) -> Result<Vec<ClientOutcome>> {
        let t = self.round as u64;
        let seed = self.cfg.seed;
        let globals = self.globals();
        let cfg = &self.cfg;
        let ds = &self.ds;
        let work = |(client, shard): (&mut ClientState, &ClientShard)| -> Result<ClientOutcome> {
            let k = client.id;
            let graph = shard.local_graph(ds);
            let mut rng = stream(seed, &[TAG_CLIENT, k as u64, t]);
            match cfg.method {
                Method::Fedrio => {
                    let a = alphas[k];
                    client.backbone.params = apply_client_update(&client.backbone.params, &globals.backbone, a)?;
                    client.d1.params = apply_client_update(&client.d1.params, &globals.d, a)?;
                    let (upload, metrics) = client.run_local_round(&graph, &globals, &cfg.client, &mut rng)?;
                    let probe = metrics.probe.clone();
                    Ok(ClientOutcome {
                        upload,
                        metrics: Some(metrics),
                        local_loss: None,
                        probe,
                    })
                }
                Method::Fedavg | Method::Fedprox => {
                    client.backbone.params = globals.backbone.clone();
                    client.d1.params = globals.d.clone();
                    let start = client.backbone.params.clone();
                    let prox = (cfg.method == Method::Fedprox).then_some((cfg.fedprox_mu, &globals.backbone, &globals.d));
                    let loss = baseline_local_train(&mut client.backbone, &mut client.d1, &graph, &cfg.client, prox, &mut rng)?;
                    Ok(ClientOutcome {
                        upload: ClientUpload {
                            client: k,
                            backbone: client.backbone.params.clone(),
                            backbone_start: start,
                            d1: client.d1.params.clone(),
                        },
                        metrics: None,
                        local_loss: Some(loss),
                        probe: client.probe(&graph),
                    })
                }
            }
        };
        let pairs = self.clients.iter_mut().zip(&self.shards);
        if self.cfg.parallel {
            pairs.collect::<Vec<_>>().into_par_iter().map(work).collect()
        } else {
            pairs.map(work).collect()
        }
    }

    fn corrupt_upload(&self, outcomes: &mut [ClientOutcome]) {
        if let Some(n) = self.cfg.noisy_client {
            let mut rng = stream(self.cfg.seed, &[TAG_NOISE, self.round as u64]);
            let up = &mut outcomes[n.client].upload;
            let mut noisy = up.backbone_start.clone();
            for v in noisy.values.iter_mut() {
                v.mapv_inplace(|x| x + n.std * rng.sample::<f64, _>(StandardNormal));
            }
            up.backbone = noisy;
        }
    }

    fn feature_consistency(&self, full: &LocalGraph) -> Option<f64> {
        let reps: Vec<Mat> = self
            .clients
            .iter()
            .map(|c| c.backbone.infer_greedy(full).select(ndarray::Axis(0), &self.val_nodes))
            .collect();
        let labels: Vec<usize> = self.val_nodes.iter().map(|&i| self.ds.labels[i]).collect();
        feature_consistency_score(&reps, &labels).ok()
    }

    /// Accuracy of the global classifier on generator samples.
    fn synthetic_accuracy(&self, rng: &mut impl Rng) -> Result<f64> {
        let n = self.cfg.masks.batch_size;
        let labels = self.dist.sample_labels(n, rng);
        let x = self.server.gen.generate(&self.server.gen.sample_noise(n, rng), &one_hot(&labels))?;
        Ok(accuracy_f1(&predict(&self.server.d, &x), &labels).0)
    }

    /// Executes the next communication round.
    pub fn step(&mut self) -> Result<RoundRecord> {
        if self.is_done() {
            return Err(Error::InvalidInput("all rounds already ran".into()));
        }
        let started = Instant::now();
        self.round += 1;
        let t = self.round;
        let k = self.cfg.num_clients;
        let mut server_rng = stream(self.cfg.seed, &[TAG_SERVER, t as u64]);

        let (actions, alphas) = match (&self.agent, self.cfg.method) {
            (Some(agent), _) => {
                let mut rng = stream(self.cfg.seed, &[TAG_AGENT, t as u64]);
                let a = agent.act(t, &self.state, &mut rng);
                let m = momenta(&a);
                (Some(a), m)
            }
            _ => (None, vec![1.0; k]),
        };

        let mut outcomes = self.run_clients(&alphas)?;
        self.corrupt_upload(&mut outcomes);
        let uploads: Vec<&ClientUpload> = outcomes.iter().map(|o| &o.upload).collect();
        let d1s: Vec<&ParamStore> = uploads.iter().map(|u| &u.d1).collect();
        self.server.d.params = aggregate_classifier(&d1s)?;
        let mut losses = RoundLosses::default();
        let mut mask_weight = None;

        match self.cfg.method {
            Method::Fedrio => {
                let prev = self.server.backbone.params.clone();
                if self.cfg.ablation.disable_masks {
                    let w = Masks::uniform(&prev, k).normalized()?;
                    let clients: Vec<&ParamStore> = uploads.iter().map(|u| &u.backbone).collect();
                    let starts: Vec<&ParamStore> = uploads.iter().map(|u| &u.backbone_start).collect();
                    self.server.backbone.params = aggregate(&prev, &clients, &starts, &w)?;
                } else {
                    let out = aggregate_round(
                        &self.server.backbone,
                        &prev,
                        &uploads,
                        &mut self.server.masks,
                        &self.server.d,
                        &self.server.gen,
                        &self.dist,
                        &self.cfg.masks,
                        &mut server_rng,
                    )?;
                    self.server.backbone.params = out.backbone;
                    losses.mask = Some(out.mask_loss);
                    mask_weight = Some(mean_client_weight(&self.server.masks.normalized()?));
                }
                let teachers: Vec<Classifier> = uploads.iter().map(|u| self.server.d.with_params(u.d1.clone())).collect();
                let gl = train_global_generator(
                    &mut self.server.gen,
                    &mut self.server.d,
                    &teachers,
                    &self.dist,
                    &self.cfg.distill,
                    &mut server_rng,
                )?;
                losses.global_generator = (!gl.is_empty()).then(|| gl.iter().sum::<f64>() / gl.len() as f64);
                for o in &outcomes {
                    let m = o.metrics.as_ref().expect("fedrio metrics");
                    losses.classifier.push(m.stage1_loss);
                    losses.backbone.push(m.stage2_loss);
                    losses.generator.push(m.stage3_loss);
                }
            }
            Method::Fedavg | Method::Fedprox => {
                let clients: Vec<&ParamStore> = uploads.iter().map(|u| &u.backbone).collect();
                self.server.backbone.params = ParamStore::mean_of(&clients)?;
                losses.local = outcomes.iter().map(|o| o.local_loss.unwrap_or(f64::NAN)).collect();
            }
        }

        let full = self.ds.graph_view();
        let (acc, f1) = evaluate(&self.server.backbone, &self.server.d, &full, &self.val_nodes);
        let mut reward = None;
        let mut state_rec = None;
        if self.agent.is_some() {
            let omega = match self.cfg.reward_source {
                RewardSource::Real => acc,
                RewardSource::Synthetic => self.synthetic_accuracy(&mut server_rng)?,
            };
            let r = compute_reward(omega, &self.cfg.reward);
            let reports: Vec<(usize, &ProbeStats)> = outcomes.iter().map(|o| (o.upload.client, &o.probe)).collect();
            let next = build_state(&reports, k, self.cfg.model.rep_dim)?;
            let agent = self.agent.as_mut().expect("agent present");
            agent.buffer.push(Transition {
                state: self.state.clone(),
                action: actions.clone().expect("actions with agent"),
                reward: r,
                next_state: next.clone(),
                terminal: t == self.cfg.rounds,
            });
            let mut rl_rng = stream(self.cfg.seed, &[TAG_AGENT, t as u64, 1]);
            let mut q = Vec::new();
            if t >= agent.cfg.warmup_rounds {
                for _ in 0..agent.cfg.updates_per_round {
                    if let Some(l) = agent.q_update_step(&mut rl_rng) {
                        q.push(l);
                    }
                }
            }
            losses.q = (!q.is_empty()).then(|| q.iter().sum::<f64>() / q.len() as f64);
            state_rec = Some(std::mem::replace(&mut self.state, next));
            reward = Some(r);
        }

        let record = RoundRecord {
            t,
            acc,
            f1,
            losses,
            client_acc: outcomes.iter().map(|o| o.probe.local_acc).collect(),
            feature_consistency: self.feature_consistency(&full),
            state: state_rec,
            action: actions.map(|a| a.iter().map(|&i| ACTION_GRID[i]).collect()),
            reward,
            mask_weight,
        };
        self.last_uploads = outcomes.into_iter().map(|o| o.upload).collect();
        self.records.push(record.clone());
        self.timings.push(started.elapsed().as_secs_f64());
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            round: self.round,
            server: self.server.clone(),
            clients: self.clients.clone(),
            q_network: self.agent.as_ref().map(|a| a.online.clone()),
        }
    }

    pub fn summary(&self) -> Result<RunSummary> {
        summarize(self.cfg.method, &self.records, self.cfg.reward.target_accuracy)
    }

    /// Runs every remaining round.
    pub fn run(mut self) -> Result<(RunSummary, Vec<RoundRecord>)> {
        while !self.is_done() {
            self.step()?;
        }
        Ok((self.summary()?, self.records))
    }
}

pub fn run_fedrio(cfg: &ExperimentConfig) -> Result<(RunSummary, Vec<RoundRecord>)> {
    Experiment::new(ExperimentConfig {
        method: Method::Fedrio,
        ..cfg.clone()
    })?
    .run()
}

pub fn run_fedavg(cfg: &ExperimentConfig) -> Result<(RunSummary, Vec<RoundRecord>)> {
    Experiment::new(ExperimentConfig {
        method: Method::Fedavg,
        ..cfg.clone()
    })?
    .run()
}

pub fn run_fedprox(cfg: &ExperimentConfig, mu_prox: f64) -> Result<(RunSummary, Vec<RoundRecord>)> {
    Experiment::new(ExperimentConfig {
        method: Method::Fedprox,
        fedprox_mu: mu_prox,
        ..cfg.clone()
    })?
    .run()
}

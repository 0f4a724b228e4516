//! Bot-detection graphs: loading, synthesis, stratified splits and
//! Dirichlet label-skew partitioning into client shards.

use crate::error::{Error, Result};
use crate::nn::stream;
use crate::tensor::Mat;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::rc::Rc;

pub const NUM_CLASSES: usize = 2;
pub const HUMAN: usize = 0;
pub const BOT: usize = 1;

/// Fraction tolerance on realised split proportions.
pub const SPLIT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    /// `N x d` pre-extracted user features.
    pub features: Mat,
    /// Undirected edges, stored once each.
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    /// Empty until a split has been assigned.
    pub split: Vec<Split>,
}

impl GraphDataset {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn nodes_in(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks structural invariants. Split proportions are checked only
    /// when a split is present and `fractions` is given.
    pub fn validate(&self, fractions: Option<SplitFractions>) -> Result<()> {
        let n = self.num_nodes();
        if self.features.nrows() != n {
            return Err(Error::Validation(format!(
                "{} feature rows for {} labels",
                self.features.nrows(),
                n
            )));
        }
        if let Some(y) = self.labels.iter().find(|&&y| y >= NUM_CLASSES) {
            return Err(Error::Validation(format!("label {y} is not 0 or 1")));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        let mut seen = HashSet::with_capacity(self.edges.len());
        for &(a, b) in &self.edges {
            if a >= n || b >= n {
                return Err(Error::Validation(format!(
                    "edge ({a},{b}) has an endpoint outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("self-loop on node {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Validation(format!("duplicate edge ({a},{b})")));
            }
        }
        let counts = self.class_counts();
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Validation(format!(
                "both classes must be present, got counts {counts:?}"
            )));
        }
        if !self.split.is_empty() {
            if self.split.len() != n {
                return Err(Error::Validation("split length differs from node count".into()));
            }
            if let Some(fr) = fractions {
                let nf = n as f64;
                for (s, want) in [(Split::Train, fr.train), (Split::Val, fr.val), (Split::Test, fr.test)] {
                    let got = self.nodes_in(s).len() as f64 / nf;
                    if (got - want).abs() > SPLIT_TOLERANCE {
                        return Err(Error::Validation(format!(
                            "{s:?} fraction {got:.3} is outside {want}±{SPLIT_TOLERANCE}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Directed message-passing view of the whole graph.
    pub fn graph_view(&self) -> LocalGraph {
        LocalGraph::new(self.features.clone(), self.labels.clone(), self.edges.clone())
    }
}

/// On-disk dataset layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Node CSV (`id,label,f0..f{d-1}` and optionally `split`) plus edge CSV (`src,dst`).
    Csv { nodes: String, edges: String },
    /// `{"features": [[..]], "edges": [[s,d],..], "labels": [..], "split"?: [..]}`
    Json { path: String },
}

#[derive(Deserialize)]
struct JsonDataset {
    features: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    labels: Vec<usize>,
    #[serde(default)]
    split: Option<Vec<String>>,
}

/// Loads and validates a dataset. When the file carries no split, a
/// stratified one is drawn with `seed`.
pub fn load_dataset(
    source: &DatasetSource,
    fractions: SplitFractions,
    seed: u64,
) -> Result<GraphDataset> {
    let ds = match source {
        DatasetSource::Json { path } => load_json(Path::new(path))?,
        DatasetSource::Csv { nodes, edges } => load_csv(Path::new(nodes), Path::new(edges))?,
    };
    ds.validate(None)?;
    if ds.split.is_empty() {
        stratified_split(ds, fractions, seed)
    } else {
        Ok(ds)
    }
}

fn load_json(path: &Path) -> Result<GraphDataset> {
    let text = std::fs::read_to_string(path)?;
    let raw: JsonDataset = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let n = raw.labels.len();
    if raw.features.len() != n {
        return Err(Error::Validation(format!(
            "{} feature rows for {n} labels",
            raw.features.len()
        )));
    }
    let d = raw.features.first().map(|r| r.len()).unwrap_or(0);
    let mut features = Mat::zeros((n, d));
    for (i, row) in raw.features.iter().enumerate() {
        if row.len() != d {
            return Err(Error::Validation(format!(
                "feature row {i} has {} columns, expected {d}",
                row.len()
            )));
        }
        for (j, v) in row.iter().enumerate() {
            features[[i, j]] = *v;
        }
    }
    let split = match raw.split {
        None => Vec::new(),
        Some(s) => s
            .iter()
            .map(|t| {
                Split::parse(t).ok_or_else(|| Error::Validation(format!("unknown split tag {t:?}")))
            })
            .collect::<Result<_>>()?,
    };
    Ok(GraphDataset {
        features,
        edges: raw.edges.iter().map(|e| (e[0], e[1])).collect(),
        labels: raw.labels,
        split,
    })
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

fn load_csv(nodes: &Path, edges: &Path) -> Result<GraphDataset> {
    let mut rdr = csv::Reader::from_path(nodes).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col("id").ok_or(Error::Parse {
        line: 1,
        msg: "node file lacks an `id` column".into(),
    })?;
    let label_col = col("label").ok_or(Error::Parse {
        line: 1,
        msg: "node file lacks a `label` column".into(),
    })?;
    let split_col = col("split");
    let mut feat_cols = Vec::new();
    for d in 0.. {
        match col(&format!("f{d}")) {
            Some(c) => feat_cols.push(c),
            None => break,
        }
    }
    if feat_cols.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "node file has no f0.. feature columns".into(),
        });
    }
    let mut ids = HashMap::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut split = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let id = field(id_col).to_string();
        if ids.insert(id.clone(), i).is_some() {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate node id {id:?}"),
            });
        }
        let label: usize = field(label_col).parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad label {:?}", field(label_col)),
        })?;
        labels.push(label);
        for &c in &feat_cols {
            let v: f64 = field(c).parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad feature value {:?}", field(c)),
            })?;
            rows.push(v);
        }
        if let Some(sc) = split_col {
            let s = Split::parse(field(sc)).ok_or_else(|| Error::Parse {
                line,
                msg: format!("bad split tag {:?}", field(sc)),
            })?;
            split.push(s);
        }
    }
    let n = labels.len();
    let features = Mat::from_shape_vec((n, feat_cols.len()), rows)
        .map_err(|e| Error::Validation(e.to_string()))?;

    let mut erdr = csv::Reader::from_path(edges).map_err(csv_err)?;
    let eh = erdr.headers().map_err(csv_err)?.clone();
    let src_col = eh.iter().position(|h| h.trim() == "src").ok_or(Error::Parse {
        line: 1,
        msg: "edge file lacks a `src` column".into(),
    })?;
    let dst_col = eh.iter().position(|h| h.trim() == "dst").ok_or(Error::Parse {
        line: 1,
        msg: "edge file lacks a `dst` column".into(),
    })?;
    let mut edge_list = Vec::new();
    for (i, rec) in erdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let endpoint = |c: usize| -> Result<usize> {
            let raw = rec.get(c).unwrap_or("").trim();
            match ids.get(raw) {
                Some(&ix) => Ok(ix),
                // Unknown ids that look numeric are kept so validation can
                // report the out-of-range endpoint.
                None => raw.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("edge endpoint {raw:?} is not a known node id"),
                }),
            }
        };
        edge_list.push((endpoint(src_col)?, endpoint(dst_col)?));
    }
    Ok(GraphDataset {
        features,
        edges: edge_list,
        labels,
        split,
    })
}

/// Number of nodes of a class of size `n` that go to train and val.
/// The remainder goes to test.
pub fn split_sizes(n: usize, fr: SplitFractions) -> (usize, usize) {
    let train = (fr.train * n as f64).round() as usize;
    let val = ((fr.val * n as f64).round() as usize).min(n - train);
    (train, val)
}

/// Per-class shuffled split into train/val/test.
pub fn stratified_split(
    mut ds: GraphDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<GraphDataset> {
    let mut rng = stream(seed, &[0x5911_7]);
    let mut split = vec![Split::Test; ds.num_nodes()];
    for class in 0..NUM_CLASSES {
        let mut members: Vec<usize> = (0..ds.num_nodes()).filter(|&i| ds.labels[i] == class).collect();
        if members.len() < 10 {
            return Err(Error::Validation(format!(
                "class {class} has {} nodes; at least 10 are needed for a stratified split",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let (n_train, n_val) = split_sizes(members.len(), fractions);
        for (rank, &node) in members.iter().enumerate() {
            split[node] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    ds.split = split;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "Dirichlet alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.num_clients < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 clients, got {}",
                self.num_clients
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    /// Global node indices (train split), ascending.
    pub node_indices: Vec<usize>,
    /// Induced edges, re-indexed into `node_indices` positions.
    pub edges: Vec<(usize, usize)>,
    pub label_counts: [usize; NUM_CLASSES],
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.node_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_indices.is_empty()
    }

    pub fn local_graph(&self, ds: &GraphDataset) -> LocalGraph {
        let features = ds.features.select(ndarray::Axis(0), &self.node_indices);
        let labels = self.node_indices.iter().map(|&i| ds.labels[i]).collect();
        LocalGraph::new(features, labels, self.edges.clone())
    }
}

/// Draws one point from `Dir(alpha * 1_k)`.
///
/// Gamma variates are drawn in log space, `ln G(a) = ln G(a+1) + ln(U)/a`,
/// so very small concentrations do not underflow to an all-zero vector.
pub fn sample_dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Label-skew partition of the train split.
pub fn dirichlet_partition(ds: &GraphDataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let train = ds.nodes_in(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidInput("train split is empty".into()));
    }
    let k = spec.num_clients;
    if train.len() < k {
        return Err(Error::InvalidInput(format!(
            "{} train nodes cannot fill {k} shards",
            train.len()
        )));
    }
    let mut rng = stream(spec.seed, &[0xD1_81C4]);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..NUM_CLASSES {
        let mut nodes: Vec<usize> = train.iter().copied().filter(|&i| ds.labels[i] == class).collect();
        nodes.shuffle(&mut rng);
        let props = sample_dirichlet(spec.alpha, k, &mut rng);
        let n = nodes.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (client, p) in props.iter().enumerate() {
            cum += p;
            let end = if client + 1 == k {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            members[client].extend_from_slice(&nodes[start..end]);
            start = end;
        }
    }
    // Keep all K clients alive by single-node donations from the largest shard.
    while let Some(empty) = members.iter().position(|m| m.is_empty()) {
        let largest = (0..k)
            .max_by_key(|&c| (members[c].len(), std::cmp::Reverse(c)))
            .expect("k >= 2");
        let node = members[largest].pop().expect("largest shard is non-empty");
        members[empty].push(node);
    }
    let mut owner = vec![usize::MAX; ds.num_nodes()];
    let mut local_pos = vec![0usize; ds.num_nodes()];
    let mut shards = Vec::with_capacity(k);
    for (c, m) in members.iter_mut().enumerate() {
        m.sort_unstable();
        for (pos, &node) in m.iter().enumerate() {
            owner[node] = c;
            local_pos[node] = pos;
        }
    }
    let mut shard_edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); k];
    for &(a, b) in &ds.edges {
        let (oa, ob) = (owner[a], owner[b]);
        if oa != usize::MAX && oa == ob {
            shard_edges[oa].push((local_pos[a], local_pos[b]));
        }
    }
    for (m, edges) in members.into_iter().zip(shard_edges) {
        let mut label_counts = [0; NUM_CLASSES];
        for &i in &m {
            label_counts[ds.labels[i]] += 1;
        }
        shards.push(ClientShard {
            node_indices: m,
            edges,
            label_counts,
        });
    }
    Ok(shards)
}

/// `K x 2` matrix of per-client label counts.
pub fn label_histogram(shards: &[ClientShard]) -> Vec<[usize; NUM_CLASSES]> {
    shards.iter().map(|s| s.label_counts).collect()
}

/// Mean over clients of the largest class share within the client.
pub fn mean_max_class_proportion(shards: &[ClientShard]) -> f64 {
    let props: Vec<f64> = shards
        .iter()
        .map(|s| {
            let total: usize = s.label_counts.iter().sum();
            *s.label_counts.iter().max().unwrap() as f64 / total.max(1) as f64
        })
        .collect();
    props.iter().sum::<f64>() / props.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticGraphConfig {
    pub nodes_per_class: usize,
    pub feature_dim: usize,
    pub class_mean_separation: f64,
    pub intra_class_edge_prob: f64,
    pub inter_class_edge_prob: f64,
    /// Set by the experiment from its master seed, never read from config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticGraphConfig {
    fn default() -> Self {
        Self {
            nodes_per_class: 1000,
            feature_dim: 16,
            class_mean_separation: 4.0,
            intra_class_edge_prob: 0.01,
            inter_class_edge_prob: 0.002,
            seed: 0,
        }
    }
}

impl SyntheticGraphConfig {
    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.intra_class_edge_prob) || !p_ok(self.inter_class_edge_prob) {
            return Err(Error::InvalidInput("edge probabilities must lie in [0,1]".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidInput("feature_dim must be at least 2".into()));
        }
        if self.nodes_per_class == 0 {
            return Err(Error::InvalidInput("nodes_per_class must be positive".into()));
        }
        if !(self.class_mean_separation >= 0.0) {
            return Err(Error::InvalidInput("separation must be non-negative".into()));
        }
        Ok(())
    }
}

/// Two unit-variance Gaussian clusters whose means sit
/// `class_mean_separation` apart, joined by a two-block stochastic block model.
///
/// The mean offset direction has zero coordinate sum, so row-wise layer
/// normalisation does not cancel it.
pub fn generate_synthetic_bot_graph(cfg: &SyntheticGraphConfig) -> Result<GraphDataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[0x5E_7E71C]);
    let d = cfg.feature_dim;
    let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mean = dir.iter().sum::<f64>() / d as f64;
    dir.iter_mut().for_each(|v| *v -= mean);
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);

    let n = 2 * cfg.nodes_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let half = cfg.class_mean_separation / 2.0;
    let mut features = Mat::zeros((n, d));
    for i in 0..n {
        let sign = if labels[i] == BOT { 1.0 } else { -1.0 };
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            features[[i, j]] = sign * half * dir[j] + noise;
        }
    }
    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            let p = if labels[a] == labels[b] {
                cfg.intra_class_edge_prob
            } else {
                cfg.inter_class_edge_prob
            };
            if p > 0.0 && rng.gen::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    Ok(GraphDataset {
        features,
        edges,
        labels,
        split: Vec::new(),
    })
}

/// A node-feature matrix with labels and a directed message-passing
/// edge list (both directions of every undirected edge).
#[derive(Debug, Clone)]
pub struct LocalGraph {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub undirected: Vec<(usize, usize)>,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
}

impl LocalGraph {
    pub fn new(features: Mat, labels: Vec<usize>, undirected: Vec<(usize, usize)>) -> Self {
        let mut src = Vec::with_capacity(undirected.len() * 2);
        let mut dst = Vec::with_capacity(undirected.len() * 2);
        for &(a, b) in &undirected {
            src.push(a);
            dst.push(b);
            src.push(b);
            dst.push(a);
        }
        Self {
            features,
            labels,
            undirected,
            src: Rc::from(src),
            dst: Rc::from(dst),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_directed_edges(&self) -> usize {
        self.src.len()
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for &d in self.dst.iter() {
            deg[d] += 1;
        }
        deg
    }
}

// `LocalGraph` holds `Rc` buffers; it is rebuilt per thread from shards.
pub fn local_graphs(ds: &GraphDataset, shards: &[ClientShard]) -> Vec<LocalGraph> {
    shards.iter().map(|s| s.local_graph(ds)).collect()
}

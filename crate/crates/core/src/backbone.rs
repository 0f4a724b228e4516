//! The adaptive message-passing backbone.
//!
//! Pipeline: row-wise layer norm, two GraphSAGE action networks that give
//! each node a distribution over {transmit, withhold} for receiving and
//! emitting messages, Gumbel-Softmax gates turned into per-edge weights,
//! pruning of edges whose weight is zero, a GIN environment network over
//! the pruned graph, and a two-stage linear projection to representations.

use crate::data::LocalGraph;
use crate::nn::{glorot, Linear, ParamStore};
use crate::tensor::{EdgeList, Graph, Mat, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Action index of "transmit" in every gate distribution.
pub const TRANSMIT: usize = 0;
pub const WITHHOLD: usize = 1;
pub const NUM_ACTIONS: usize = 2;

/// Smallest probability admitted before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub temperature: f64,
    /// Straight-through one-hot samples; soft relaxation when false.
    pub hard: bool,
    /// Pins every gate to "transmit", bypassing the action networks.
    pub force_transmit: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            hard: true,
            force_transmit: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub rep_dim: usize,
    pub layers: usize,
    pub aggregator: Aggregator,
    pub layer_norm_eps: f64,
    /// When false the action networks are bypassed and the environment
    /// network propagates over the raw adjacency.
    pub adaptive: bool,
    pub gate: GateConfig,
}

impl BackboneConfig {
    pub fn new(input_dim: usize, rep_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 64,
            rep_dim,
            layers: 2,
            aggregator: Aggregator::Mean,
            layer_norm_eps: 1e-5,
            adaptive: true,
            gate: GateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SageLayer {
    pub lin_self: Linear,
    pub w_neigh: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GinLayer {
    pub eps: usize,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneLayout {
    pub ln_gain: usize,
    pub ln_bias: usize,
    pub u_in: Vec<SageLayer>,
    pub u_out: Vec<SageLayer>,
    pub env: Vec<GinLayer>,
    pub proj_in: Linear,
    pub proj_out: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Norm,
    ActionIn,
    ActionOut,
    Env,
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub layout: BackboneLayout,
    pub params: ParamStore,
}

/// Gumbel noise for the in and out gates of every node (`N x 2` each).
#[derive(Debug, Clone, PartialEq)]
pub struct GateNoise {
    pub g_in: Mat,
    pub g_out: Mat,
}

impl GateNoise {
    pub fn sample(n: usize, rng: &mut impl Rng) -> Self {
        let mut draw = || Mat::from_shape_fn((n, NUM_ACTIONS), |_| sample_gumbel(rng));
        let g_in = draw();
        let g_out = draw();
        Self { g_in, g_out }
    }

    /// Zero noise: hard gates reduce to the argmax of the action probabilities.
    pub fn zeros(n: usize) -> Self {
        Self {
            g_in: Mat::zeros((n, NUM_ACTIONS)),
            g_out: Mat::zeros((n, NUM_ACTIONS)),
        }
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        Self {
            g_in: self.g_in.select(ndarray::Axis(0), perm),
            g_out: self.g_out.select(ndarray::Axis(0), perm),
        }
    }
}

/// `g = -ln(-ln(u))`, `u ~ U(0,1)`.
pub fn sample_gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Gumbel-Softmax on a single probability vector with given noise.
/// Hard mode returns the one-hot argmax of the perturbed logits.
pub fn gumbel_softmax(p: &[f64], temperature: f64, noise: &[f64], hard: bool) -> Vec<f64> {
    let z: Vec<f64> = p
        .iter()
        .zip(noise)
        .map(|(pi, g)| (pi.max(PROB_FLOOR).ln() + g) / temperature)
        .collect();
    if hard {
        let best = argmax(&z);
        (0..p.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
    } else {
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Edge weights `w_uv = GS(p_out^u)[transmit] * GS(p_in^v)[transmit]`
/// for directed edges `src[e] -> dst[e]`, from already-sampled gates.
pub fn edge_weights(gs_out: &Mat, gs_in: &Mat, src: &[usize], dst: &[usize]) -> Vec<f64> {
    src.iter()
        .zip(dst)
        .map(|(&u, &v)| gs_out[[u, TRANSMIT]] * gs_in[[v, TRANSMIT]])
        .collect()
}

/// Indices of the edges kept by pruning (`w > 0`).
pub fn prune_adjacency(weights: &[f64]) -> Vec<usize> {
    weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, _)| i)
        .collect()
}

fn edge_list(n: usize, src: Vec<usize>, dst: Vec<usize>, agg: Aggregator) -> EdgeList {
    let mut deg = vec![0usize; n];
    for &d in &dst {
        deg[d] += 1;
    }
    let scale: Vec<f64> = deg
        .iter()
        .map(|&k| match agg {
            Aggregator::Sum => 1.0,
            Aggregator::Mean if k > 0 => 1.0 / k as f64,
            Aggregator::Mean => 0.0,
        })
        .collect();
    EdgeList {
        src: Rc::from(src),
        dst: Rc::from(dst),
        scale: Rc::from(scale),
        num_nodes: n,
    }
}

/// Tape outputs of one backbone pass.
pub struct BackboneOutput {
    pub reps: Var,
    /// Hidden matrix before projection.
    pub hidden: Var,
    pub p_in: Option<Var>,
    pub p_out: Option<Var>,
    /// Directed edge indices (into the graph's `src`/`dst`) kept after pruning.
    pub retained: Vec<usize>,
}

fn build_sage(p: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Vec<SageLayer> {
    (0..cfg.layers)
        .map(|l| {
            let fan_in = if l == 0 { cfg.input_dim } else { cfg.hidden_dim };
            let fan_out = if l + 1 == cfg.layers { NUM_ACTIONS } else { cfg.hidden_dim };
            let lin_self = Linear::new(p, &format!("{prefix}.{l}.self"), fan_in, fan_out, rng);
            let w_neigh = p.push(format!("{prefix}.{l}.neigh.weight"), glorot(fan_in, fan_out, rng));
            SageLayer { lin_self, w_neigh }
        })
        .collect()
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamStore::new();
        let d = cfg.input_dim;
        let h = cfg.hidden_dim;
        let ln_gain = p.push("ln.gain", Mat::ones((1, d)));
        let ln_bias = p.push("ln.bias", Mat::zeros((1, d)));
        let u_in = build_sage(&mut p, "u_in", &cfg, rng);
        let u_out = build_sage(&mut p, "u_out", &cfg, rng);
        let mut env = Vec::new();
        for l in 0..cfg.layers {
            let fan_in = if l == 0 { d } else { h };
            let eps = p.push(format!("env.{l}.eps"), Mat::zeros((1, 1)));
            let mlp1 = Linear::new(&mut p, &format!("env.{l}.mlp1"), fan_in, h, rng);
            let mlp2 = Linear::new(&mut p, &format!("env.{l}.mlp2"), h, h, rng);
            env.push(GinLayer { eps, mlp1, mlp2 });
        }
        let proj_in = Linear::new(&mut p, "proj_in", h, cfg.rep_dim, rng);
        let proj_out = Linear::new(&mut p, "proj_out", cfg.rep_dim, cfg.rep_dim, rng);
        Self {
            cfg,
            layout: BackboneLayout {
                ln_gain,
                ln_bias,
                u_in,
                u_out,
                env,
                proj_in,
                proj_out,
            },
            params: p,
        }
    }

    pub fn group_of(&self, slot: usize) -> ParamGroup {
        let name = &self.params.names[slot];
        if name.starts_with("ln.") {
            ParamGroup::Norm
        } else if name.starts_with("u_in.") {
            ParamGroup::ActionIn
        } else if name.starts_with("u_out.") {
            ParamGroup::ActionOut
        } else if name.starts_with("env.") {
            ParamGroup::Env
        } else {
            ParamGroup::Projection
        }
    }

    /// Slots of the final `rep_dim -> rep_dim` projection sub-layer.
    pub fn proj_out_slots(&self) -> [usize; 2] {
        [self.layout.proj_out.w, self.layout.proj_out.b]
    }

    fn sage_forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        layers: &[SageLayer],
        h0: Var,
        edges: &EdgeList,
    ) -> Var {
        let mut h = h0;
        for (l, layer) in layers.iter().enumerate() {
            let own = layer.lin_self.forward(g, p, h);
            let neigh = g.edge_aggregate(h, None, edges);
            let neigh = g.matmul(neigh, p[layer.w_neigh]);
            h = g.add(own, neigh);
            if l + 1 < layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    /// Per-node action distributions `(P_in, P_out)` over {transmit, withhold}.
    pub fn action_probs(&self, g: &mut Graph, p: &[Var], h: Var, graph: &LocalGraph) -> (Var, Var) {
        let edges = edge_list(
            graph.num_nodes(),
            graph.src.to_vec(),
            graph.dst.to_vec(),
            self.cfg.aggregator,
        );
        let li = self.sage_forward(g, p, &self.layout.u_in, h, &edges);
        let lo = self.sage_forward(g, p, &self.layout.u_out, h, &edges);
        (g.softmax(li), g.softmax(lo))
    }

    /// GIN propagation `h <- relu(MLP((1 + eps) h + AGG_{A'}(w * h)))`.
    pub fn env_propagate(&self, g: &mut Graph, p: &[Var], h0: Var, edges: &EdgeList, w: Option<Var>) -> Var {
        let mut h = h0;
        for layer in &self.layout.env {
            let agg = g.edge_aggregate(h, w, edges);
            let eh = g.mul_scalar_var(h, p[layer.eps]);
            let own = g.add(h, eh);
            let z = g.add(own, agg);
            let z = layer.mlp1.forward(g, p, z);
            let z = g.relu(z);
            let z = layer.mlp2.forward(g, p, z);
            h = g.relu(z);
        }
        h
    }

    fn gate(&self, g: &mut Graph, probs: Var, noise: &Mat) -> Var {
        let tau = self.cfg.gate.temperature;
        let logp = {
            let pv = g.value(probs).mapv(|x| x.max(PROB_FLOOR));
            // log of the floored probabilities, differentiable through `probs`.
            let floor_gap = &pv - g.value(probs);
            let gap = g.constant(floor_gap);
            let pf = g.add(probs, gap);
            g.log(pf)
        };
        let nz = g.constant(noise.clone());
        let z = g.add(logp, nz);
        let z = g.scale(z, 1.0 / tau);
        let soft = g.softmax(z);
        if self.cfg.gate.hard {
            let zv = g.value(z);
            let mut hard = Mat::zeros(zv.raw_dim());
            for (r, row) in zv.rows().into_iter().enumerate() {
                let best = argmax(row.as_slice().unwrap());
                hard[[r, best]] = 1.0;
            }
            g.straight_through(soft, hard)
        } else {
            soft
        }
    }

    /// Full forward pass on `graph` with the given gate noise.
    pub fn forward(&self, g: &mut Graph, p: &[Var], graph: &LocalGraph, noise: &GateNoise) -> BackboneOutput {
        let n = graph.num_nodes();
        let x = g.constant(graph.features.clone());
        let h = g.layer_norm(x, p[self.layout.ln_gain], p[self.layout.ln_bias], self.cfg.layer_norm_eps);
        let gated = self.cfg.adaptive && !self.cfg.gate.force_transmit;
        let (hidden, p_in, p_out, retained) = if gated {
            let (p_in, p_out) = self.action_probs(g, p, h, graph);
            let gs_in = self.gate(g, p_in, &noise.g_in);
            let gs_out = self.gate(g, p_out, &noise.g_out);
            let t_out = g.select_col(gs_out, TRANSMIT);
            let t_in = g.select_col(gs_in, TRANSMIT);
            let wo = g.gather_rows(t_out, graph.src.clone());
            let wi = g.gather_rows(t_in, graph.dst.clone());
            let w = g.mul(wo, wi);
            let wv: Vec<f64> = g.value(w).iter().copied().collect();
            let retained = prune_adjacency(&wv);
            let src: Vec<usize> = retained.iter().map(|&e| graph.src[e]).collect();
            let dst: Vec<usize> = retained.iter().map(|&e| graph.dst[e]).collect();
            let kept = g.gather_rows(w, Rc::from(retained.clone()));
            let edges = edge_list(n, src, dst, self.cfg.aggregator);
            let hidden = self.env_propagate(g, p, h, &edges, Some(kept));
            (hidden, Some(p_in), Some(p_out), retained)
        } else {
            let edges = edge_list(n, graph.src.to_vec(), graph.dst.to_vec(), self.cfg.aggregator);
            let hidden = self.env_propagate(g, p, h, &edges, None);
            (hidden, None, None, (0..graph.num_directed_edges()).collect())
        };
        let r = self.layout.proj_in.forward(g, p, hidden);
        let r = self.layout.proj_out.forward(g, p, r);
        BackboneOutput {
            reps: r,
            hidden,
            p_in,
            p_out,
            retained,
        }
    }

    /// Representations without gradient tracking.
    pub fn infer(&self, graph: &LocalGraph, noise: &GateNoise) -> Mat {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, graph, noise);
        g.value(out.reps).clone()
    }

    /// Inference with noise-free gates.
    pub fn infer_greedy(&self, graph: &LocalGraph) -> Mat {
        self.infer(graph, &GateNoise::zeros(graph.num_nodes()))
    }

    pub fn with_params(&self, params: ParamStore) -> Self {
        Self {
            cfg: self.cfg,
            layout: self.layout.clone(),
            params,
        }
    }
}

//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every value is a 2-D `ndarray` matrix; scalars are `1x1`. Nodes are
//! appended to a [`Graph`] in evaluation order, so a single reverse sweep
//! over the node list is a valid topological backward pass.

use ndarray::{Array2, Axis};
use std::rc::Rc;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse neighbour aggregation: `out[dst[e]] += scale[dst[e]] * w[e] * h[src[e]]`.
#[derive(Debug, Clone)]
pub struct EdgeList {
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    /// Per-destination multiplier (e.g. 1/deg for mean aggregation).
    pub scale: Rc<[f64]>,
    pub num_nodes: usize,
}

enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows(Var, Rc<[usize]>),
    SelectCol(Var, usize),
    ConcatCols(Vec<Var>),
    EdgeAgg {
        h: Var,
        w: Option<Var>,
        edges: EdgeList,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        denom: Vec<f64>,
        std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    CosineRows(Var, Var),
    PairDist {
        x: Var,
        weights: Rc<Mat>,
    },
    StraightThrough(Var),
    Pick(Var, Rc<[(usize, usize)]>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(like.raw_dim()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Const => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, &[])
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `a[n x m] + b[1 x m]`
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a row vector");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b), &[a, b])
    }

    /// `a[n x m] * b[1 x m]`
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "mul_row expects a row vector");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MulRow(a, b), &[a, b])
    }

    /// `a[n x m] * b[n x 1]`
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).ncols(), 1, "mul_col expects a column vector");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MulCol(a, b), &[a, b])
    }

    /// `a * s` where `s` is a `1x1` node.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.push(v, Op::MulScalarVar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::from_elem((1, 1), m.sum() / m.len() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Row sums, `n x m -> n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumRows(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmax(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::GatherRows(a, idx), &[a])
    }

    pub fn select_col(&mut self, a: Var, col: usize) -> Var {
        let v = self
            .value(a)
            .column(col)
            .to_owned()
            .insert_axis(Axis(1));
        self.push(v, Op::SelectCol(a, col), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Weighted neighbour aggregation over a directed edge list.
    /// `w`, when given, is an `E x 1` per-edge weight.
    pub fn edge_aggregate(&mut self, h: Var, w: Option<Var>, edges: &EdgeList) -> Var {
        let hv = self.value(h);
        let mut out = Mat::zeros((edges.num_nodes, hv.ncols()));
        let wv = w.map(|w| self.value(w));
        for e in 0..edges.src.len() {
            let (s, d) = (edges.src[e], edges.dst[e]);
            let mut coef = edges.scale[d];
            if let Some(wv) = wv {
                coef *= wv[[e, 0]];
            }
            if coef == 0.0 {
                continue;
            }
            let src_row = hv.row(s);
            let mut dst_row = out.row_mut(d);
            dst_row.scaled_add(coef, &src_row);
        }
        let mut parents = vec![h];
        if let Some(w) = w {
            parents.push(w);
        }
        self.push(
            out,
            Op::EdgeAgg {
                h,
                w,
                edges: edges.clone(),
            },
            &parents,
        )
    }

    /// Row-wise normalisation `gain * (x - mean) / (std + eps) + bias`
    /// with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut denom = Vec::with_capacity(n);
        let mut stdv = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let std = var.sqrt();
            let s = std + eps;
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) / s;
            }
            denom.push(s);
            stdv.push(std);
        }
        let out = &(&xhat * self.value(gain)) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                denom,
                std: stdv,
            },
            &[x, gain, bias],
        )
    }

    /// Batch normalisation using the batch's own statistics (training mode).
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mean = xv.sum_axis(Axis(0)) / n;
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let inv = ndarray::Array1::from(inv_std.clone());
        let xhat = &centered * &inv;
        let out = &(&xhat * self.value(gain)) + self.value(bias);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Row-wise cosine similarity, `n x 1`. Zero-norm rows give 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let v: Vec<f64> = av
            .rows()
            .into_iter()
            .zip(bv.rows())
            .map(|(x, y)| cosine(x.as_slice().unwrap(), y.as_slice().unwrap()))
            .collect();
        let n = v.len();
        let m = Mat::from_shape_vec((n, 1), v).unwrap();
        self.push(m, Op::CosineRows(a, b), &[a, b])
    }

    /// `sum_ij weights[i,j] * ||x_i - x_j||_2` as a `1x1` node.
    pub fn pairwise_dist_weighted(&mut self, x: Var, weights: Rc<Mat>) -> Var {
        let xv = self.value(x);
        let n = xv.nrows();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let w = weights[[i, j]];
                if w == 0.0 {
                    continue;
                }
                let d = row_dist(xv, i, j);
                total += w * d;
            }
        }
        self.push(
            Mat::from_elem((1, 1), total),
            Op::PairDist { x, weights },
            &[x],
        )
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Mat) -> Var {
        assert_eq!(hard.dim(), self.value(soft).dim());
        self.push(hard, Op::StraightThrough(soft), &[soft])
    }

    /// Gathers `a[r, c]` for each `(r, c)` into a column vector.
    pub fn pick(&mut self, a: Var, idx: Rc<[(usize, usize)]>) -> Var {
        let av = self.value(a);
        let v: Vec<f64> = idx.iter().map(|&(r, c)| av[[r, c]]).collect();
        let m = Mat::from_shape_vec((idx.len(), 1), v).unwrap();
        self.push(m, Op::Pick(a, idx), &[a])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones((1, 1)));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], -g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*b));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g * self.value(*a));
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*b));
                }
                if self.wants(*b) {
                    let gb = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::MulCol(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*b));
                }
                if self.wants(*b) {
                    let gb = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::MulScalarVar(a, s) => {
                let k = self.scalar(*s);
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g * k);
                }
                if self.wants(*s) {
                    let gs = (g * self.value(*a)).sum();
                    accumulate(&mut grads[s.0], Mat::from_elem((1, 1), gs));
                }
            }
            Op::Scale(a, k) => accumulate(&mut grads[a.0], g * *k),
            Op::AddScalar(a) => accumulate(&mut grads[a.0], g.clone()),
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                accumulate(&mut grads[a.0], g * &mask);
            }
            Op::Exp(a) => accumulate(&mut grads[a.0], g * &node.value),
            Op::Log(a) => accumulate(&mut grads[a.0], g / self.value(*a)),
            Op::Sum(a) => {
                let k = g[[0, 0]];
                accumulate(&mut grads[a.0], Mat::from_elem(self.value(*a).raw_dim(), k));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let k = g[[0, 0]] / av.len() as f64;
                accumulate(&mut grads[a.0], Mat::from_elem(av.raw_dim(), k));
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let ga = Mat::from_shape_fn(av.raw_dim(), |(r, _)| g[[r, 0]]);
                accumulate(&mut grads[a.0], ga);
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let dot = (g * s).sum_axis(Axis(1)).insert_axis(Axis(1));
                accumulate(&mut grads[a.0], s * &(g - &dot));
            }
            Op::LogSoftmax(a) => {
                let s = node.value.mapv(f64::exp);
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                accumulate(&mut grads[a.0], g - &(&s * &gsum));
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut ga = Mat::zeros(av.raw_dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = ga.row_mut(src);
                    row += &g.row(r);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::SelectCol(a, col) => {
                let av = self.value(*a);
                let mut ga = Mat::zeros(av.raw_dim());
                ga.column_mut(*col).assign(&g.column(0));
                accumulate(&mut grads[a.0], ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.wants(*p) {
                        let slice = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads[p.0], slice);
                    }
                    offset += w;
                }
            }
            Op::EdgeAgg { h, w, edges } => {
                let hv = self.value(*h);
                let wv = w.map(|w| self.value(w));
                let want_h = self.wants(*h);
                let want_w = w.map(|w| self.wants(w)).unwrap_or(false);
                let mut gh = if want_h {
                    Some(Mat::zeros(hv.raw_dim()))
                } else {
                    None
                };
                let mut gw = if want_w {
                    Some(Mat::zeros((edges.src.len(), 1)))
                } else {
                    None
                };
                for e in 0..edges.src.len() {
                    let (s, d) = (edges.src[e], edges.dst[e]);
                    let scale = edges.scale[d];
                    let we = wv.map(|wv| wv[[e, 0]]).unwrap_or(1.0);
                    if let Some(gh) = gh.as_mut() {
                        let coef = scale * we;
                        if coef != 0.0 {
                            let mut row = gh.row_mut(s);
                            row.scaled_add(coef, &g.row(d));
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[[e, 0]] = scale * g.row(d).dot(&hv.row(s));
                    }
                }
                if let Some(gh) = gh {
                    accumulate(&mut grads[h.0], gh);
                }
                if let (Some(gw), Some(w)) = (gw, w) {
                    accumulate(&mut grads[w.0], gw);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                denom,
                std,
            } => {
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*gain) {
                    accumulate(
                        &mut grads[gain.0],
                        (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if self.wants(*x) {
                    let gxhat = g * self.value(*gain);
                    let (n, d) = xhat.dim();
                    let mut gx = Mat::zeros((n, d));
                    for i in 0..n {
                        let s = denom[i];
                        // c_j = xhat_j * s
                        let mut gc: Vec<f64> = (0..d).map(|j| gxhat[[i, j]] / s).collect();
                        if std[i] > 0.0 {
                            let gs: f64 = -(0..d)
                                .map(|j| gxhat[[i, j]] * xhat[[i, j]] * s)
                                .sum::<f64>()
                                / (s * s);
                            for (j, gcj) in gc.iter_mut().enumerate() {
                                let c = xhat[[i, j]] * s;
                                *gcj += gs * c / (d as f64 * std[i]);
                            }
                        }
                        let mean_gc = gc.iter().sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[[i, j]] = gc[j] - mean_gc;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*gain) {
                    accumulate(
                        &mut grads[gain.0],
                        (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if self.wants(*x) {
                    let gxhat = g * self.value(*gain);
                    let n = xhat.nrows() as f64;
                    let mean_g = gxhat.sum_axis(Axis(0)) / n;
                    let mean_gx = (&gxhat * xhat).sum_axis(Axis(0)) / n;
                    let inv = ndarray::Array1::from(inv_std.clone());
                    let gx = &(&(&gxhat - &mean_g) - &(xhat * &mean_gx)) * &inv;
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Mat::zeros(av.raw_dim());
                let mut gb = Mat::zeros(bv.raw_dim());
                for r in 0..av.nrows() {
                    let x = av.row(r);
                    let y = bv.row(r);
                    let nx = x.dot(&x).sqrt();
                    let ny = y.dot(&y).sqrt();
                    if nx == 0.0 || ny == 0.0 {
                        continue;
                    }
                    let c = node.value[[r, 0]];
                    let gr = g[[r, 0]];
                    for j in 0..x.len() {
                        ga[[r, j]] = gr * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        gb[[r, j]] = gr * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                }
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::PairDist { x, weights } => {
                let xv = self.value(*x);
                let n = xv.nrows();
                let k = g[[0, 0]];
                let mut gx = Mat::zeros(xv.raw_dim());
                for i in 0..n {
                    for j in 0..n {
                        let w = weights[[i, j]];
                        if w == 0.0 || i == j {
                            continue;
                        }
                        let d = row_dist(xv, i, j);
                        if d == 0.0 {
                            continue;
                        }
                        let coef = k * w / d;
                        for c in 0..xv.ncols() {
                            let diff = xv[[i, c]] - xv[[j, c]];
                            gx[[i, c]] += coef * diff;
                            gx[[j, c]] -= coef * diff;
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::StraightThrough(soft) => accumulate(&mut grads[soft.0], g.clone()),
            Op::Pick(a, idx) => {
                let mut ga = Mat::zeros(self.value(*a).raw_dim());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    ga[[r, c]] += g[[k, 0]];
                }
                accumulate(&mut grads[a.0], ga);
            }
        }
    }
}

fn row_dist(x: &Mat, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        dot / (nx * ny)
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn log_softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

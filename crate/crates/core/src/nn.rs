//! Parameter containers, dense layers and the Adam optimiser.

use crate::error::{Error, Result};
use crate::tensor::{Grads, Graph, Mat, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

/// Named, ordered list of parameter matrices.
///
/// Models keep slot indices into a store instead of owning matrices, so
/// whole-model arithmetic (averaging, masking, momentum mixing) is a flat
/// walk over `values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Puts every parameter on the tape, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    g.leaf(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect()
    }

    pub fn collect_grads(&self, grads: &Grads, vars: &[Var]) -> Vec<Mat> {
        self.values
            .iter()
            .zip(vars)
            .map(|(v, var)| grads.get_or_zeros(*var, v))
            .collect()
    }

    pub fn same_shape(&self, other: &ParamStore) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.dim() == b.dim())
    }

    pub fn check_same_shape(&self, other: &ParamStore) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "parameter sets differ: {} vs {} tensors",
                self.values.len(),
                other.values.len()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect(),
        }
    }

    /// `(1 - alpha) * self + alpha * other`, elementwise.
    pub fn mix(&self, other: &ParamStore, alpha: f64) -> Result<ParamStore> {
        self.check_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * (1.0 - alpha) + b * alpha)
            .collect();
        Ok(ParamStore {
            names: self.names.clone(),
            values,
        })
    }

    pub fn sub(&self, other: &ParamStore) -> Result<ParamStore> {
        self.check_same_shape(other)?;
        Ok(ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn sq_dist(&self, other: &ParamStore) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).mapv(|x| x * x).sum())
            .sum()
    }

    /// Unweighted coordinate-wise mean of identically shaped stores.
    pub fn mean_of(stores: &[&ParamStore]) -> Result<ParamStore> {
        let first = stores
            .first()
            .ok_or_else(|| Error::InvalidInput("mean of zero parameter sets".into()))?;
        let mut acc = first.zeros_like();
        for s in stores {
            first.check_same_shape(s)?;
            for (a, v) in acc.values.iter_mut().zip(&s.values) {
                *a += v;
            }
        }
        let k = stores.len() as f64;
        for a in acc.values.iter_mut() {
            a.mapv_inplace(|x| x / k);
        }
        Ok(acc)
    }
}

/// Uniform Glorot initialisation.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.push(format!("{name}.weight"), glorot(fan_in, fan_out, rng));
        let b = store.push(format!("{name}.bias"), Mat::zeros((1, fan_out)));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let xw = g.matmul(x, p[self.w]);
        g.add_row(xw, p[self.b])
    }

    /// Plain forward on matrices, no tape.
    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        x.dot(&store.values[self.w]) + &store.values[self.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            m: store.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect(),
            v: store.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect(),
            t: 0,
        }
    }

    /// One update. Slots whose gradient is entirely zero and carry no
    /// weight decay are left bitwise untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.step_masked(store, grads, None)
    }

    /// Like [`Adam::step`] but only updates slots where `active[i]` holds.
    pub fn step_masked(&mut self, store: &mut ParamStore, grads: &[Mat], active: Option<&[bool]>) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, ((p, g), (m, v))) in store
            .values
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            if let Some(active) = active {
                if !active[i] {
                    continue;
                }
            }
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + c.weight_decay * *p;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
                });
        }
    }
}

/// SplitMix64 finaliser, used to derive independent seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream identified by `parts` under `master`.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(master), |acc, p| mix64(acc ^ mix64(*p)))
}

pub fn stream(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mix_endpoints_and_midpoint() {
        let mut a = ParamStore::new();
        a.push("p", array![[2.0, 4.0]]);
        let mut b = ParamStore::new();
        b.push("p", array![[4.0, 8.0]]);
        assert_eq!(a.mix(&b, 0.0).unwrap(), a);
        assert_eq!(a.mix(&b, 1.0).unwrap(), b);
        assert_eq!(a.mix(&b, 0.5).unwrap().values[0], array![[3.0, 6.0]]);
    }

    #[test]
    fn mean_of_mismatched_shapes_fails() {
        let mut a = ParamStore::new();
        a.push("p", array![[1.0]]);
        let mut b = ParamStore::new();
        b.push("p", array![[1.0, 2.0]]);
        assert!(ParamStore::mean_of(&[&a, &b]).is_err());
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut s = ParamStore::new();
        s.push("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(AdamConfig::new(0.05, 0.0), &s);
        for _ in 0..500 {
            let grad = s.values[0].mapv(|x| 2.0 * x);
            opt.step(&mut s, &[grad]);
        }
        assert!(s.values[0].iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut s = ParamStore::new();
        s.push("x", array![[3.0, -2.0]]);
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig::new(0.05, 0.0), &s);
        opt.step(&mut s, &[Mat::zeros((1, 2))]);
        assert_eq!(s, before);
    }

    #[test]
    fn derived_streams_are_distinct_and_stable() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }
}

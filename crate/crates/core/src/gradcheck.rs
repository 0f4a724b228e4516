//! Central finite-difference checks of tape gradients.

use crate::nn::ParamStore;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with an absolute fallback for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares `d loss / d params` from the tape with central differences.
///
/// `loss` builds the scalar loss on a fresh graph from bound parameter
/// handles. At most `per_tensor` coordinates of every tensor are probed,
/// spread evenly through it.
pub fn check_params<F>(store: &ParamStore, step: f64, per_tensor: usize, loss: F) -> GradReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars = store.bind(&mut g, true);
    let out = loss(&mut g, &vars);
    let grads = store.collect_grads(&g.backward(out), &vars);

    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let vars = s.bind(&mut g, false);
        let out = loss(&mut g, &vars);
        g.scalar(out)
    };
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for t in 0..store.len() {
        let n = store.values[t].len();
        let stride = (n / per_tensor.max(1)).max(1);
        for flat in (0..n).step_by(stride).take(per_tensor) {
            let cols = store.values[t].ncols();
            let idx = (flat / cols, flat % cols);
            let orig = work.values[t][idx];
            work.values[t][idx] = orig + step;
            let up = eval(&work);
            work.values[t][idx] = orig - step;
            let down = eval(&work);
            work.values[t][idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(grads[t][idx], numeric));
            checked += 1;
        }
    }
    GradReport {
        max_rel_err: worst,
        checked,
    }
}

//! Neuron-level masked aggregation of client backbone updates.

use crate::backbone::Backbone;
use crate::client::ClientUpload;
use crate::error::{Error, Result};
use crate::models::{cross_entropy, one_hot, Classifier, Generator, LabelDistribution};
use crate::nn::ParamStore;
use crate::tensor::{Graph, Mat, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 256,
        }
    }
}

/// Raw (pre-softmax) per-client masks shaped like the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Masks {
    pub raw: Vec<ParamStore>,
}

impl Masks {
    /// Equal raw values, so every normalised weight is `1/K`.
    pub fn uniform(template: &ParamStore, num_clients: usize) -> Self {
        Self {
            raw: vec![template.zeros_like(); num_clients],
        }
    }

    pub fn normalized(&self) -> Result<Vec<ParamStore>> {
        normalize_masks(&self.raw)
    }
}

/// Coordinate-wise softmax across clients.
pub fn normalize_masks(raw: &[ParamStore]) -> Result<Vec<ParamStore>> {
    let first = raw
        .first()
        .ok_or_else(|| Error::InvalidInput("no masks to normalise".into()))?;
    for r in raw {
        first.check_same_shape(r)?;
    }
    let mut out: Vec<ParamStore> = raw.to_vec();
    for t in 0..first.len() {
        let mut mx = raw[0].values[t].clone();
        for r in &raw[1..] {
            ndarray::Zip::from(&mut mx).and(&r.values[t]).for_each(|m, &v| *m = m.max(v));
        }
        let mut denom = Mat::zeros(mx.raw_dim());
        for (o, r) in out.iter_mut().zip(raw) {
            let e = (&r.values[t] - &mx).mapv(f64::exp);
            denom += &e;
            o.values[t] = e;
        }
        for o in out.iter_mut() {
            o.values[t] /= &denom;
        }
    }
    Ok(out)
}

/// `prev + sum_k w_k * (client_k - start_k)`.
pub fn aggregate(
    prev: &ParamStore,
    clients: &[&ParamStore],
    starts: &[&ParamStore],
    weights: &[ParamStore],
) -> Result<ParamStore> {
    if clients.len() != starts.len() || clients.len() != weights.len() || clients.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} client sets, {} start points, {} masks",
            clients.len(),
            starts.len(),
            weights.len()
        )));
    }
    let mut out = prev.clone();
    for ((c, s), w) in clients.iter().zip(starts).zip(weights) {
        prev.check_same_shape(c)?;
        prev.check_same_shape(s)?;
        prev.check_same_shape(w)?;
        for t in 0..out.len() {
            ndarray::Zip::from(&mut out.values[t])
                .and(&c.values[t])
                .and(&s.values[t])
                .and(&w.values[t])
                .for_each(|o, &c, &s, &w| *o += w * (c - s));
        }
    }
    Ok(out)
}

/// Unweighted mean of client classifiers.
pub fn aggregate_classifier(clients: &[&ParamStore]) -> Result<ParamStore> {
    ParamStore::mean_of(clients)
}

/// Cross-entropy of `d` on pseudo samples routed through the backbone's
/// final projection, whose weight and bias are the handles `(w, b)`.
pub fn mask_loss(g: &mut Graph, (w, b): (Var, Var), (d, pd): (&Classifier, &[Var]), pseudo: &Mat, labels: &[usize]) -> Var {
    let x = g.constant(pseudo.clone());
    let h = g.matmul(x, w);
    let h = g.add_row(h, b);
    let logits = d.forward(g, pd, h);
    cross_entropy(g, logits, labels)
}

/// Loss value and gradients with respect to every client's raw mask.
///
/// Only the projection slots reach the loss, so all other raw-mask
/// gradients are zero.
pub fn mask_gradient(
    backbone: &Backbone,
    prev: &ParamStore,
    uploads: &[&ClientUpload],
    masks: &Masks,
    d: &Classifier,
    pseudo: &Mat,
    labels: &[usize],
) -> Result<(f64, Vec<ParamStore>)> {
    let weights = masks.normalized()?;
    let clients: Vec<&ParamStore> = uploads.iter().map(|u| &u.backbone).collect();
    let starts: Vec<&ParamStore> = uploads.iter().map(|u| &u.backbone_start).collect();
    let agg = aggregate(prev, &clients, &starts, &weights)?;
    let [sw, sb] = backbone.proj_out_slots();
    let mut g = Graph::new();
    let w = g.leaf(agg.values[sw].clone());
    let b = g.leaf(agg.values[sb].clone());
    let pd = d.params.bind(&mut g, false);
    let loss = mask_loss(&mut g, (w, b), (d, &pd), pseudo, labels);
    let value = g.scalar(loss);
    let grads = g.backward(loss);
    let gw = grads.get_or_zeros(w, &agg.values[sw]);
    let gb = grads.get_or_zeros(b, &agg.values[sb]);

    let mut out: Vec<ParamStore> = masks.raw.iter().map(|r| r.zeros_like()).collect();
    for (slot, gs) in [(sw, &gw), (sb, &gb)] {
        // g * delta_k per client, then the softmax Jacobian across clients.
        let gd: Vec<Mat> = uploads
            .iter()
            .map(|u| gs * &(&u.backbone.values[slot] - &u.backbone_start.values[slot]))
            .collect();
        let mut mean = Mat::zeros(gs.raw_dim());
        for (wk, gdk) in weights.iter().zip(&gd) {
            mean += &(&wk.values[slot] * gdk);
        }
        for ((o, wk), gdk) in out.iter_mut().zip(&weights).zip(&gd) {
            o.values[slot] = &wk.values[slot] * &(gdk - &mean);
        }
    }
    Ok((value, out))
}

/// One descent step on raw masks. Non-finite gradients skip the step.
pub fn update_masks(masks: &mut Masks, grads: &[ParamStore], learning_rate: f64) -> bool {
    if grads.iter().any(|g| !g.is_finite()) {
        log::warn!("non-finite mask gradient; skipping mask update");
        return false;
    }
    for (r, g) in masks.raw.iter_mut().zip(grads) {
        for (rv, gv) in r.values.iter_mut().zip(&g.values) {
            rv.scaled_add(-learning_rate, gv);
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationOutcome {
    pub backbone: ParamStore,
    pub mask_loss: f64,
    pub mask_updated: bool,
}

/// Synthesise a batch, step the masks, then aggregate with the new masks.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_round(
    backbone: &Backbone,
    prev: &ParamStore,
    uploads: &[&ClientUpload],
    masks: &mut Masks,
    d: &Classifier,
    gen: &Generator,
    dist: &LabelDistribution,
    cfg: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<AggregationOutcome> {
    if uploads.len() != masks.raw.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} uploads for {} masks",
            uploads.len(),
            masks.raw.len()
        )));
    }
    let labels = dist.sample_labels(cfg.batch_size, rng);
    let z = gen.sample_noise(cfg.batch_size, rng);
    let pseudo = gen.generate(&z, &one_hot(&labels))?;
    let (loss, grads) = mask_gradient(backbone, prev, uploads, masks, d, &pseudo, &labels)?;
    let mask_updated = cfg.learning_rate != 0.0 && update_masks(masks, &grads, cfg.learning_rate);
    let weights = masks.normalized()?;
    let clients: Vec<&ParamStore> = uploads.iter().map(|u| &u.backbone).collect();
    let starts: Vec<&ParamStore> = uploads.iter().map(|u| &u.backbone_start).collect();
    Ok(AggregationOutcome {
        backbone: aggregate(prev, &clients, &starts, &weights)?,
        mask_loss: loss,
        mask_updated,
    })
}

/// Mean normalised weight of each client over every coordinate.
pub fn mean_client_weight(weights: &[ParamStore]) -> Vec<f64> {
    weights
        .iter()
        .map(|w| {
            let n = w.num_scalars().max(1) as f64;
            w.values.iter().map(|v| v.sum()).sum::<f64>() / n
        })
        .collect()
}

/// `tensor,client,mean_weight` rows, one per tensor and client.
pub fn write_mask_csv(weights: &[ParamStore], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tensor", "client", "mean_weight"])
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    if let Some(first) = weights.first() {
        for (t, name) in first.names.iter().enumerate() {
            for (k, m) in weights.iter().enumerate() {
                let mean = m.values[t].mean().unwrap_or(0.0);
                w.write_record([name.clone(), k.to_string(), format!("{mean:.12}")])
                    .map_err(|e| Error::InvalidInput(e.to_string()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::models::ClassifierArch;
    use crate::nn::stream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn random_store(template: &ParamStore, rng: &mut impl Rng, scale: f64) -> ParamStore {
        let mut s = template.clone();
        for v in s.values.iter_mut() {
            v.mapv_inplace(|_| scale * rng.sample::<f64, _>(StandardNormal));
        }
        s
    }

    #[test]
    fn normalisation_cases() {
        let mut a = ParamStore::new();
        a.push("w", array![[0.0, 10.0]]);
        let mut b = ParamStore::new();
        b.push("w", array![[0.0, 0.0]]);
        let n = normalize_masks(&[a.clone(), b.clone(), b.clone()]).unwrap();
        assert_abs_diff_eq!(n[1].values[0][[0, 0]], 1.0 / 3.0, epsilon = 1e-15);
        assert!(n[0].values[0][[0, 1]] >= 0.99);

        let mut rng = stream(41, &[]);
        let raws: Vec<ParamStore> = (0..7).map(|_| random_store(&a, &mut rng, 3.0)).collect();
        let n = normalize_masks(&raws).unwrap();
        for j in 0..2 {
            let s: f64 = n.iter().map(|m| m.values[0][[0, j]]).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
        }
    }

    fn backbone_fixture() -> (Backbone, ParamStore) {
        let mut rng = stream(42, &[]);
        let mut cfg = BackboneConfig::new(3, 4);
        cfg.hidden_dim = 5;
        let b = Backbone::new(cfg, &mut rng);
        let p = b.params.clone();
        (b, p)
    }

    #[test]
    fn uniform_masks_with_full_downloads_give_fedavg() {
        let (_, prev) = backbone_fixture();
        let mut rng = stream(43, &[]);
        let clients: Vec<ParamStore> = (0..4).map(|_| random_store(&prev, &mut rng, 1.0)).collect();
        let refs: Vec<&ParamStore> = clients.iter().collect();
        let starts = vec![&prev; 4];
        let w = Masks::uniform(&prev, 4).normalized().unwrap();
        let agg = aggregate(&prev, &refs, &starts, &w).unwrap();
        for t in 0..prev.len() {
            for (idx, v) in agg.values[t].indexed_iter() {
                let mean = clients.iter().map(|c| c.values[t][idx]).sum::<f64>() / 4.0;
                assert!((v - mean).abs() <= 1e-9);
            }
        }
        let still = aggregate(&prev, &starts, &starts, &w).unwrap();
        assert_eq!(still, prev);
        let one = Masks::uniform(&prev, 1).normalized().unwrap();
        let solo = aggregate(&prev, &refs[..1], &starts[..1], &one).unwrap();
        for t in 0..prev.len() {
            assert!((&solo.values[t] - &clients[0].values[t]).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn classifier_mean() {
        let mut a = ParamStore::new();
        a.push("w", array![[0.0]]);
        let mut b = ParamStore::new();
        b.push("w", array![[2.0]]);
        assert_eq!(aggregate_classifier(&[&a, &b]).unwrap().values[0], array![[1.0]]);
        assert_eq!(aggregate_classifier(&[&a, &a]).unwrap(), a);
    }

    #[test]
    fn mask_loss_reference_values() {
        let (bb, prev) = backbone_fixture();
        let mut d = Classifier::new(ClassifierArch::Shared, 4, 3, &mut stream(44, &[]));
        for v in d.params.values.iter_mut() {
            v.fill(0.0);
        }
        let [sw, sb] = bb.proj_out_slots();
        let mut g = Graph::new();
        let w = g.constant(prev.values[sw].clone());
        let b = g.constant(prev.values[sb].clone());
        let pd = d.params.bind(&mut g, false);
        let x = Mat::from_elem((5, 4), 0.3);
        let l = mask_loss(&mut g, (w, b), (&d, &pd), &x, &[0, 1, 1, 0, 1]);
        assert_abs_diff_eq!(g.scalar(l), 2f64.ln(), epsilon = 1e-12);
    }

    fn uploads_fixture(prev: &ParamStore, k: usize, seed: u64) -> Vec<ClientUpload> {
        let mut rng = stream(seed, &[]);
        (0..k)
            .map(|i| {
                let start = random_store(prev, &mut rng, 0.5);
                let mut end = start.clone();
                for v in end.values.iter_mut() {
                    v.mapv_inplace(|x| x + 0.3 * rng.sample::<f64, _>(StandardNormal));
                }
                ClientUpload {
                    client: i,
                    backbone: end,
                    backbone_start: start,
                    d1: ParamStore::new(),
                }
            })
            .collect()
    }

    #[test]
    fn mask_gradient_matches_finite_differences() {
        let (bb, prev) = backbone_fixture();
        let uploads = uploads_fixture(&prev, 3, 45);
        let refs: Vec<&ClientUpload> = uploads.iter().collect();
        let mut rng = stream(46, &[]);
        let mut masks = Masks::uniform(&prev, 3);
        for r in masks.raw.iter_mut() {
            *r = random_store(r, &mut rng, 0.5);
        }
        let d = Classifier::new(ClassifierArch::Shared, 4, 6, &mut rng);
        let x = Mat::from_shape_fn((8, 4), |_| rng.sample(StandardNormal));
        let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let (_, grads) = mask_gradient(&bb, &prev, &refs, &masks, &d, &x, &y).unwrap();
        let [sw, sb] = bb.proj_out_slots();
        let mut worst: f64 = 0.0;
        for k in 0..3 {
            for (slot, idx) in [(sw, (0, 0)), (sw, (2, 3)), (sb, (0, 1))] {
                let h = 1e-5;
                let mut up = masks.clone();
                up.raw[k].values[slot][idx] += h;
                let mut down = masks.clone();
                down.raw[k].values[slot][idx] -= h;
                let f = |m: &Masks| mask_gradient(&bb, &prev, &refs, m, &d, &x, &y).unwrap().0;
                let numeric = (f(&up) - f(&down)) / (2.0 * h);
                worst = worst.max(crate::gradcheck::rel_err(grads[k].values[slot][idx], numeric));
            }
        }
        assert!(worst <= 1e-3, "{worst}");
        // Coordinates outside the projection never receive gradient.
        assert!(grads.iter().all(|g| g.values[0].iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn mask_update_arithmetic() {
        let mut a = ParamStore::new();
        a.push("w", array![[0.0, 0.0]]);
        let mut masks = Masks::uniform(&a, 2);
        let mut g0 = a.clone();
        g0.values[0] = array![[1.0, -2.0]];
        let g1 = a.clone();
        let before = masks.clone();
        assert!(update_masks(&mut masks, &[a.clone(), a.clone()], 0.1));
        assert_eq!(masks, before);
        assert!(update_masks(&mut masks, &[g0, g1], 0.5));
        assert_eq!(masks.raw[0].values[0], array![[-0.5, 1.0]]);
        let w = masks.normalized().unwrap();
        let e = |x: f64| x.exp();
        assert_abs_diff_eq!(w[0].values[0][[0, 0]], e(-0.5) / (e(-0.5) + 1.0), epsilon = 1e-12);
        for j in 0..2 {
            assert_abs_diff_eq!(w[0].values[0][[0, j]] + w[1].values[0][[0, j]], 1.0, epsilon = 1e-12);
        }
        let mut bad = a.clone();
        bad.values[0][[0, 0]] = f64::NAN;
        assert!(!update_masks(&mut masks, &[bad, a.clone()], 0.1));
    }

    #[test]
    fn round_with_frozen_masks_is_fedavg_and_relabeling_invariant() {
        let (bb, prev) = backbone_fixture();
        let mut rng = stream(47, &[]);
        let mut uploads = uploads_fixture(&prev, 3, 48);
        for u in uploads.iter_mut() {
            u.backbone_start = prev.clone();
        }
        let refs: Vec<&ClientUpload> = uploads.iter().collect();
        let d = Classifier::new(ClassifierArch::Shared, 4, 6, &mut rng);
        let gen = Generator::new(3, 4, 6, &mut rng);
        let dist = crate::models::estimate_label_distribution(&[[3, 1], [1, 3], [2, 2]]).unwrap();
        let cfg = MaskConfig {
            learning_rate: 0.0,
            batch_size: 16,
        };
        let mut masks = Masks::uniform(&prev, 3);
        let out = aggregate_round(&bb, &prev, &refs, &mut masks, &d, &gen, &dist, &cfg, &mut rng).unwrap();
        assert!(!out.mask_updated);
        for t in 0..prev.len() {
            for (idx, v) in out.backbone.values[t].indexed_iter() {
                let mean = uploads.iter().map(|u| u.backbone.values[t][idx]).sum::<f64>() / 3.0;
                assert!((v - mean).abs() <= 1e-9);
            }
        }

        // Learned masks: permuting clients permutes masks and keeps the result.
        let cfg = MaskConfig {
            learning_rate: 0.5,
            batch_size: 16,
        };
        let mut m1 = Masks::uniform(&prev, 3);
        let a = aggregate_round(&bb, &prev, &refs, &mut m1, &d, &gen, &dist, &cfg, &mut stream(5, &[])).unwrap();
        let perm = [2usize, 0, 1];
        let prefs: Vec<&ClientUpload> = perm.iter().map(|&i| &uploads[i]).collect();
        let mut m2 = Masks::uniform(&prev, 3);
        let b = aggregate_round(&bb, &prev, &prefs, &mut m2, &d, &gen, &dist, &cfg, &mut stream(5, &[])).unwrap();
        for t in 0..prev.len() {
            assert!((&a.backbone.values[t] - &b.backbone.values[t]).iter().all(|x| x.abs() < 1e-12));
        }
        for (j, &i) in perm.iter().enumerate() {
            assert!((&m2.raw[j].values[0] - &m1.raw[i].values[0]).iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn mask_csv_has_row_per_tensor_and_client() {
        let (_, prev) = backbone_fixture();
        let w = Masks::uniform(&prev, 2).normalized().unwrap();
        let mut buf = Vec::new();
        write_mask_csv(&w, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * prev.len());
        assert!(text.lines().nth(1).unwrap().ends_with("0.500000000000"));
        assert_eq!(mean_client_weight(&w), vec![0.5, 0.5]);
    }
}

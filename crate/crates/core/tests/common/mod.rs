#![allow(dead_code)]

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use slimroute::encoder::{EncoderConfig, SeqBatch};
use slimroute::hardness::HardnessLabel;
use slimroute::flops::Cost;
use slimroute::model::Model;
use slimroute::numerics::{counter, Bindings, ParamId, Tape, Tensor};
use slimroute::router::router_loss;

pub fn config(layers: usize, k: usize, d: usize, heads: usize, factors: &[f64]) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        num_nonadaptive: k,
        d_model: d,
        num_heads: heads,
        d_ffn: 4 * d,
        vocab_size: 12,
        max_seq_len: 8,
        num_classes: 2,
        reduction_factors: factors.to_vec(),
        router_hidden: 6,
        layer_norm_eps: 1e-5,
    }
}

/// Two sequences of different lengths so padding and masking are exercised.
pub fn sample_batch() -> (Vec<Vec<usize>>, Vec<usize>) {
    (vec![vec![4, 5, 6, 7, 4], vec![8, 9, 10]], vec![1, 0])
}

/// Task cross-entropy at factor `r` plus the router BCE, evaluated on a
/// fresh tape. Returns the loss value and, with `grads`, every parameter
/// gradient.
pub fn combined_loss(model: &Model, r: f64, grads: bool) -> (f64, Vec<(ParamId, Tensor)>) {
    let (seqs, labels) = sample_batch();
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let batch = SeqBatch::new(&refs, Some(model.config().max_seq_len)).unwrap();
    let tape = Tape::new();
    let b = Bindings::new(&tape, &model.store, grads);
    let parts = model.encoder.forward_parts(&b, &batch, r).unwrap();
    let ce = parts.logits.cross_entropy(&labels).unwrap();
    let cls = parts.hidden.select_rows(&batch.cls_rows()).unwrap();
    let rl = model.router.forward(&b, &cls).unwrap();
    let m = model.config().num_levels();
    let hl = vec![
        HardnessLabel::new((0..m).map(|i| i == 0).collect()),
        HardnessLabel::new((0..m).map(|i| i + 1 == m).collect()),
    ];
    let loss = ce.add(&router_loss(&rl, &hl).unwrap().scale(0.5)).unwrap();
    let value = loss.value().item().unwrap();
    if !grads {
        return (value, vec![]);
    }
    tape.backward(loss).unwrap();
    (value, b.gradients())
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between the analytic gradient and a central
/// difference (step 1e-5) over every scalar of every parameter, and the
/// number of scalars checked.
pub fn finite_difference_check(model: &Model, r: f64) -> (f64, usize) {
    let (_, grads) = combined_loss(model, r, true);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let h = 1e-5;
    let mut probe = model.clone();
    for id in model.store.ids() {
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; model.store.get(id).len()]);
        for i in 0..model.store.get(id).len() {
            let orig = model.store.get(id).data()[i];
            probe.store.get_mut(id).data_mut()[i] = orig + h;
            let plus = combined_loss(&probe, r, false).0;
            probe.store.get_mut(id).data_mut()[i] = orig - h;
            let minus = combined_loss(&probe, r, false).0;
            probe.store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (plus - minus) / (2.0 * h)));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Every `(param, flat index)` the sub-network at `r` reads.
pub fn prefix_entries(model: &Model, r: f64) -> HashSet<(ParamId, usize)> {
    let mut inside = HashSet::new();
    for (id, rows, cols) in model.encoder.prefix_regions(r).unwrap() {
        let t = model.store.get(id);
        let width = if t.shape().len() == 2 { t.shape()[1] } else { t.len() };
        for row in rows {
            for col in cols.clone() {
                inside.insert((id, row * width + col));
            }
        }
    }
    inside
}

/// All parameter entries outside the `r` prefix, router included.
pub fn outside_entries(model: &Model, r: f64) -> Vec<(ParamId, usize)> {
    let inside = prefix_entries(model, r);
    model
        .store
        .ids()
        .flat_map(|id| (0..model.store.get(id).len()).map(move |i| (id, i)))
        .filter(|e| !inside.contains(e))
        .collect()
}

/// Adds large random offsets to `n` entries outside the `r` prefix.
pub fn perturb_outside<R: Rng>(model: &mut Model, r: f64, n: usize, rng: &mut R) -> usize {
    let candidates = outside_entries(model, r);
    let picked: Vec<_> = candidates.choose_multiple(rng, n).copied().collect();
    for &(id, i) in &picked {
        model.store.get_mut(id).data_mut()[i] += rng.random_range(-5.0..5.0);
    }
    picked.len()
}

pub fn logits(model: &Model, tokens: &[usize], r: f64) -> Vec<f64> {
    model.predict_at(tokens, r).unwrap().logits
}

const GRID: usize = 21;

fn grid(k: usize) -> f64 {
    k as f64 * 0.05
}

/// Every history of length `0..=4` over the 0.05 grid.
pub fn histories() -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..4 {
        let mut next = Vec::new();
        for h in &frontier {
            for k in 0..GRID {
                let mut g: Vec<f64> = h.clone();
                g.push(grid(k));
                next.push(g);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Direct restatement: bit `i` is set iff at least `w` values exist and each
/// of the newest `w` falls inside interval `i`.
pub fn label_oracle(history: &[f64], intervals: &[(f64, f64)], w: usize) -> Vec<bool> {
    intervals
        .iter()
        .map(|&(lo, hi)| {
            if history.len() < w {
                return false;
            }
            let mut hits = 0;
            for idx in history.len() - w..history.len() {
                if history[idx] >= lo && history[idx] <= hi {
                    hits += 1;
                }
            }
            hits == w
        })
        .collect()
}

/// Result of `f` and the matmul cost the instrumented primitives saw.
pub fn counted<T>(f: impl FnOnce() -> T) -> (T, Cost) {
    counter::reset();
    let out = f();
    let c = counter::snapshot();
    (
        out,
        Cost {
            macs: c.matmul_macs + c.attention_macs,
            adds: c.bias_adds,
        },
    )
}

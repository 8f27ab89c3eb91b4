use crate::encoder::SeqBatch;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::numerics::{Bindings, ParamId, Tape, Tensor};

use super::optim::AdamW;

/// Importance of every `(layer, head)`: the mean, over the real (non-pad)
/// tokens of `calibration`, of the L2 norm of that head's contribution to
/// the attention output, i.e. its output block multiplied by its rows of
/// `W_O`. Computed at full width.
pub fn head_importance(model: &Model, calibration: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
    if calibration.is_empty() {
        return Err(invalid("empty calibration set"));
    }
    let config = model.config();
    let (d, nh, dh) = (config.d_model, config.num_heads, config.d_head());
    let mut sums = vec![vec![0.0; nh]; config.num_layers];
    let mut tokens = 0usize;
    for chunk in calibration.chunks(32) {
        let tape = Tape::new();
        let b = Bindings::new(&tape, &model.store, false);
        let batch = SeqBatch::new(chunk, None)?;
        let mut h = model.encoder.embed(&b, &batch)?;
        for (layer, params) in model.encoder.layers.iter().enumerate() {
            let (out, heads) = model.encoder.mha_inner(&b, &h, layer, 1.0, &batch)?;
            let heads = heads.value();
            let wo = model.store.get(params.out_w);
            for (s, &len) in batch.lengths().iter().enumerate() {
                for t in 0..len {
                    let row = heads.row(s * batch.seq_len() + t);
                    for (head, acc) in sums[layer].iter_mut().enumerate() {
                        let mut contrib = vec![0.0; d];
                        for k in head * dh..(head + 1) * dh {
                            let x = row[k];
                            for (c, w) in contrib.iter_mut().zip(wo.row(k)) {
                                *c += x * w;
                            }
                        }
                        *acc += contrib.iter().map(|c| c * c).sum::<f64>().sqrt();
                    }
                }
            }
            h = model.encoder.ffn_forward(&b, &out, layer, 1.0)?;
        }
        tokens += batch.lengths().iter().sum::<usize>();
    }
    for layer in &mut sums {
        for s in layer.iter_mut() {
            *s /= tokens as f64;
        }
    }
    Ok(sums)
}

/// Per-layer order putting the most important head first; ties keep their
/// original order. `perm[j]` is the old index of the head moved to slot `j`.
pub fn head_order(scores: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..scores.len()).collect();
    perm.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    perm
}

/// Permutes heads in every layer so importance is non-increasing with head
/// index: the Q/K/V column blocks and biases and the matching `W_O` row
/// blocks move together, which leaves the full-width function unchanged.
/// Optimizer moments, when given, are permuted alongside. Returns the
/// permutation applied to each layer.
pub fn reorder_heads(model: &mut Model, scores: &[Vec<f64>], mut optimizer: Option<&mut AdamW>) -> Result<Vec<Vec<usize>>> {
    let config = model.config().clone();
    if scores.len() != config.num_layers || scores.iter().any(|s| s.len() != config.num_heads) {
        return Err(invalid(format!(
            "expected {} x {} head scores",
            config.num_layers, config.num_heads
        )));
    }
    let dh = config.d_head();
    let mut perms = Vec::with_capacity(scores.len());
    for (layer, layer_scores) in scores.iter().enumerate() {
        let perm = head_order(layer_scores);
        perms.push(perm.clone());
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            continue;
        }
        let p = model.encoder.layers[layer].clone();
        let mut apply = |id: ParamId, f: &dyn Fn(&Tensor) -> Tensor| {
            let t = model.store.get_mut(id);
            *t = f(t);
            if let Some(m) = optimizer.as_deref_mut().and_then(|o| o.moments_mut(id)) {
                m.m = f(&m.m);
                m.v = f(&m.v);
            }
        };
        for id in [p.query_w, p.key_w, p.value_w, p.query_b, p.key_b, p.value_b] {
            apply(id, &|t| permute_column_blocks(t, &perm, dh));
        }
        apply(p.out_w, &|t| permute_row_blocks(t, &perm, dh));
    }
    Ok(perms)
}

/// Column blocks of width `block` (the whole vector for rank 1).
fn permute_column_blocks(t: &Tensor, perm: &[usize], block: usize) -> Tensor {
    let cols = t.shape()[t.shape().len() - 1];
    let rows = t.len() / cols;
    let src = t.data();
    let mut out = t.clone();
    let dst = out.data_mut();
    for r in 0..rows {
        for (j, &old) in perm.iter().enumerate() {
            let s = r * cols + old * block;
            let d = r * cols + j * block;
            dst[d..d + block].copy_from_slice(&src[s..s + block]);
        }
    }
    out
}

fn permute_row_blocks(t: &Tensor, perm: &[usize], block: usize) -> Tensor {
    let cols = t.cols();
    let src = t.data();
    let mut out = t.clone();
    let dst = out.data_mut();
    let span = block * cols;
    for (j, &old) in perm.iter().enumerate() {
        dst[j * span..(j + 1) * span].copy_from_slice(&src[old * span..(old + 1) * span]);
    }
    out
}

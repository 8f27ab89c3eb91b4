mod common;

use common::counted;
use slimroute::encoder::EncoderConfig;
use slimroute::flops::{count_ffn, count_forward, count_mha, Cost};
use slimroute::model::Model;
use slimroute::encoder::SeqBatch;
use slimroute::numerics::{Bindings, Tape};

fn cfg() -> EncoderConfig {
    EncoderConfig {
        num_layers: 3,
        num_nonadaptive: 1,
        d_model: 16,
        num_heads: 4,
        d_ffn: 32,
        vocab_size: 12,
        max_seq_len: 17,
        reduction_factors: vec![0.25, 0.5, 1.0],
        router_hidden: 6,
        ..EncoderConfig::default()
    }
}

/// `r` as `num / den` for the factors used here.
fn ratio(r: f64) -> (u64, u64) {
    ((r * 4.0) as u64, 4)
}

#[test]
fn width_scaled_terms_follow_r_squared() {
    let c = cfg();
    for l in 1..=17 {
        let ffn_full = count_ffn(l, &c, 1.0).unwrap().macs;
        let mha_full = count_mha(l, &c, 1.0).unwrap();
        for &r in &c.reduction_factors {
            let (n, d) = ratio(r);
            assert_eq!(count_ffn(l, &c, r).unwrap().macs * d * d, ffn_full * n * n);
            let m = count_mha(l, &c, r).unwrap();
            assert_eq!(m.projections.macs * d * d, mha_full.projections.macs * n * n);
            assert_eq!(m.output.macs * d * d, mha_full.output.macs * n * n);
            assert_eq!(m.scores.macs * d, mha_full.scores.macs * n);
            assert_eq!(m.values.macs * d, mha_full.values.macs * n);
        }
    }
}

#[test]
fn static_count_matches_instrumented_forward() {
    let c = cfg();
    let model = Model::new(&c, 3).unwrap();
    for n in 1..=16 {
        let tokens: Vec<usize> = (0..n).map(|i| 4 + i % 8).collect();
        for &r in &c.reduction_factors {
            let (_, dynamic) = counted(|| model.predict_at(&tokens, r).unwrap());
            let stat = count_forward(&c, n + 1, r, false).unwrap();
            assert_eq!(dynamic, stat.matmul_cost(), "fixed n={n} r={r}");
        }
        let (routed, dynamic) = counted(|| model.predict_routed(&tokens).unwrap());
        let stat = count_forward(&c, n + 1, routed.r, true).unwrap();
        assert_eq!(dynamic, stat.matmul_cost(), "routed n={n}");
    }
}

#[test]
fn backward_is_not_counted() {
    let c = cfg();
    let model = Model::new(&c, 2).unwrap();
    let batch = SeqBatch::single(&[4, 5, 6]).unwrap();
    let tape = Tape::new();
    let b = Bindings::new(&tape, &model.store, true);
    let (loss, forward) = counted(|| {
        let logits = model.encoder.forward_adaptive(&b, &batch, 0.5).unwrap();
        logits.cross_entropy(&[1]).unwrap()
    });
    let (_, backward) = counted(|| tape.backward(loss).unwrap());
    assert_eq!(forward, count_forward(&c, 4, 0.5, false).unwrap().matmul_cost());
    assert_eq!(backward, Cost::default());
}

#[test]
fn berxit_labelling_costs_one_pass_per_factor() {
    let c = cfg();
    let model = Model::new(&c, 1).unwrap();
    let (_, a) = counted(|| model.predict_at(&[4, 5], 1.0).unwrap());
    let (_, b) = counted(|| slimroute::hardness::assign_berxit_style_label(&model, &[4, 5], 0).unwrap());
    let per_factor: Vec<Cost> = c
        .reduction_factors
        .iter()
        .map(|&r| count_forward(&c, 3, r, false).unwrap().matmul_cost())
        .collect();
    assert_eq!(a, per_factor[2]);
    assert_eq!(b, per_factor.into_iter().fold(Cost::default(), |s, x| s + x));
}

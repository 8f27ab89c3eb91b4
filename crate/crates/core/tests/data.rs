use std::io::Write;

use proptest::prelude::*;
use slimroute::config::RunConfig;
use slimroute::data::sweep::run_sweep;
use slimroute::data::{generate_synthetic, load_jsonl, Dataset, HardnessTag, SyntheticSpec, Vocab};
use slimroute::error::Error;

fn file(lines: &[&str]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

#[test]
fn jsonl_loading_and_pairs() {
    let f = file(&[
        r#"{"text": "a b c", "label": 1}"#,
        r#"{"text": "b a", "text2": "c d", "label": 0}"#,
    ]);
    let d = load_jsonl(f.path()).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.samples.iter().map(|s| s.id).collect::<Vec<_>>(), [0, 1]);
    let sep = d.vocab.id("<sep>").unwrap();
    assert_eq!(d.samples[0].token_ids.iter().filter(|&&t| t == sep).count(), 0);
    assert_eq!(d.samples[1].token_ids.iter().filter(|&&t| t == sep).count(), 1);
    assert_eq!(load_jsonl(f.path()).unwrap(), d);

    let bad = file(&[r#"{"text": "a", "label": 0}"#, "not json"]);
    match load_jsonl(bad.path()).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        e => panic!("{e}"),
    }
}

#[test]
fn synthetic_counts_tags_and_determinism() {
    let spec = SyntheticSpec::new(100, 100, 16, 8);
    let d = generate_synthetic(&spec, 4).unwrap();
    assert_eq!(d.len(), 200);
    let easy = d.samples.iter().filter(|s| s.hardness == Some(HardnessTag::Easy)).count();
    assert_eq!(easy, 100);
    assert_eq!(generate_synthetic(&spec, 4).unwrap(), d);
    assert_ne!(generate_synthetic(&spec, 5).unwrap(), d);
    assert!(generate_synthetic(&SyntheticSpec::new(1, 1, 2, 8), 0).is_err());
    let round = tempfile::NamedTempFile::new().unwrap();
    d.write_jsonl(round.path()).unwrap();
    let back = load_jsonl(round.path()).unwrap();
    assert_eq!(back.samples.iter().map(|s| (s.label, s.hardness)).collect::<Vec<_>>(),
        d.samples.iter().map(|s| (s.label, s.hardness)).collect::<Vec<_>>());
}

/// Logistic regression on token-presence features, fitted by full-batch
/// gradient descent.
fn presence_oracle(train: &Dataset, test: &Dataset) -> (f64, f64) {
    let dim = train.vocab.len().max(test.vocab.len());
    let features = |ids: &[usize]| {
        let mut x = vec![0.0; dim + 1];
        x[dim] = 1.0;
        for &i in ids {
            x[i] = 1.0;
        }
        x
    };
    let xs: Vec<Vec<f64>> = train.samples.iter().map(|s| features(&s.token_ids)).collect();
    let mut w = vec![0.0; dim + 1];
    for _ in 0..500 {
        let mut g = vec![0.0; dim + 1];
        for (x, s) in xs.iter().zip(&train.samples) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let err = 1.0 / (1.0 + (-z).exp()) - s.label as f64;
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += err * xi;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= 0.5 * gi / xs.len() as f64;
        }
    }
    let acc = |tag| {
        let rows: Vec<_> = test.samples.iter().filter(|s| s.hardness == Some(tag)).collect();
        let hits = rows
            .iter()
            .filter(|s| {
                let z: f64 = features(&s.token_ids).iter().zip(&w).map(|(a, b)| a * b).sum();
                (z > 0.0) as usize == s.label
            })
            .count();
        hits as f64 / rows.len() as f64
    };
    (acc(HardnessTag::Easy), acc(HardnessTag::Hard))
}

#[test]
fn linear_oracle_separates_easy_from_hard() {
    let d = generate_synthetic(&SyntheticSpec::new(1000, 1000, 16, 8), 0).unwrap();
    let (train, test) = d.split(0.2, 0).unwrap();
    let (easy, hard) = presence_oracle(&train, &test);
    assert!(easy >= 0.99, "easy {easy}");
    assert!(hard <= 0.85, "hard {hard}");
}

proptest! {
    #[test]
    fn tokenization_round_trips(words in prop::collection::vec("[a-z]{1,5}", 1..12)) {
        let text = words.join("  ");
        let mut vocab = Vocab::default();
        let ids = vocab.tokenize(&text, true);
        let back = vocab.detokenize(&ids);
        prop_assert_eq!(vocab.tokenize(&back, false), ids);
    }
}

fn sweep_config() -> (RunConfig, Dataset, Dataset) {
    let mut c = RunConfig::parse(
        "seed = 3\nnum_layers = 3\nnum_nonadaptive = 1\nd_model = 16\nnum_heads = 4\nd_ffn = 32\n\
         router_hidden = 8\nepochs = 3\nwindow = 1\nbatch_size = 16\ncalibration_size = 32\n\
         synthetic.n_easy = 40\nsynthetic.n_hard = 40\nsynthetic.seq_len = 8\nsynthetic.vocab = 6\n",
        "inline",
    )
    .unwrap();
    c.sweep.thresholds = vec![0.5, 0.7, 0.9];
    let (train, eval) = c.datasets().unwrap();
    (c, train, eval)
}

#[test]
fn sweep_rows_are_consistent_and_reproducible() {
    let (c, train, eval) = sweep_config();
    let a = run_sweep(&c, &train, &eval).unwrap();
    assert_eq!(a.rows.len(), 3);
    for row in &a.rows {
        assert!(row.error.is_none());
        assert!((row.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    a.write_csv(&mut x).unwrap();
    run_sweep(&c, &train, &eval).unwrap().write_csv(&mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn failed_cells_are_recorded() {
    let (mut c, train, eval) = sweep_config();
    c.sweep.thresholds = vec![0.7];
    c.sweep.reduction_sets = vec![vec![0.3, 1.0], vec![0.25, 0.5, 1.0]];
    let r = run_sweep(&c, &train, &eval).unwrap();
    assert_eq!(r.factors, [0.25, 0.3, 0.5, 1.0]);
    assert!(r.rows[0].error.is_some());
    assert!(r.rows[1].error.is_none());
    assert_eq!(r.rows[1].fractions[1], 0.0);
    let mut out = Vec::new();
    r.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.lines().next().unwrap().ends_with("frac_r_1.0,error"));
    assert_eq!(text.lines().count(), 3);
}

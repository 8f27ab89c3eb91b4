//! Static FLOPs accounting for every forward configuration.
//!
//! One multiply-accumulate counts as two FLOPs and every bias element adds
//! one. Elementwise work (softmax, GeLU, LayerNorm, residual adds) is left
//! out unless [`FlopsOptions::include_elementwise`] is set. The formulas
//! here never call into [`crate::numerics`]; the instrumented counters
//! there serve as an independent check.
//!
//! Sequence lengths `l` count encoder rows, i.e. the prepended CLS token is
//! included. The pooler is a truncation and costs nothing.

use std::io::Write;
use std::ops::{Add, AddAssign};

use serde::Serialize;

use crate::encoder::EncoderConfig;
use crate::error::{invalid, Result};

/// Matmul multiply-accumulates and bias additions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub macs: u64,
    pub adds: u64,
}

impl Cost {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.adds
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            macs: self.macs + o.macs,
            adds: self.adds + o.adds,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

/// `l` rows through an `in_dim -> out_dim` affine map:
/// `l * in * out` MACs plus `l * out` bias adds.
pub fn count_linear(l: usize, in_dim: usize, out_dim: usize) -> Cost {
    Cost {
        macs: (l * in_dim * out_dim) as u64,
        adds: (l * out_dim) as u64,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MhaCost {
    pub projections: Cost,
    pub scores: Cost,
    pub values: Cost,
    pub output: Cost,
}

impl MhaCost {
    pub fn total(&self) -> Cost {
        self.projections + self.scores + self.values + self.output
    }
}

/// Attention block at factor `r`: `r * n_heads` heads of unchanged
/// `d_head`.
pub fn count_mha(l: usize, config: &EncoderConfig, r: f64) -> Result<MhaCost> {
    let w = config.width(r)?;
    let heads = config.heads_at(r)?;
    let dh = config.d_head();
    let qkv = count_linear(l, w, heads * dh);
    let per_head = Cost {
        macs: (heads * l * l * dh) as u64,
        adds: 0,
    };
    Ok(MhaCost {
        projections: qkv + qkv + qkv,
        scores: per_head,
        values: per_head,
        output: count_linear(l, w, w),
    })
}

/// Feed-forward block at factor `r`.
pub fn count_ffn(l: usize, config: &EncoderConfig, r: f64) -> Result<Cost> {
    let w = config.width(r)?;
    let f = config.ffn_width(r)?;
    Ok(count_linear(l, w, f) + count_linear(l, f, w))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopsOptions {
    /// Also count elementwise work at the per-element costs in
    /// [`elementwise_layer`].
    pub include_elementwise: bool,
}

/// Elementwise FLOPs of one layer at width `w`: attention scaling (1) and
/// softmax (5) per score, two residual adds (1 each) and two LayerNorms (8
/// each) per hidden element, GeLU (8) per FFN hidden element.
pub fn elementwise_layer(l: usize, config: &EncoderConfig, r: f64) -> Result<u64> {
    let w = config.width(r)? as u64;
    let f = config.ffn_width(r)? as u64;
    let heads = config.heads_at(r)? as u64;
    let l = l as u64;
    Ok(6 * heads * l * l + 18 * l * w + 8 * l * f)
}

/// FLOPs of one forward pass, by component. The pooler is always zero and
/// so has no field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Breakdown {
    /// Lookups are free; holds the position-add when elementwise work is
    /// counted.
    pub embedding: Cost,
    pub mha_projections: Cost,
    pub mha_scores: Cost,
    pub mha_values: Cost,
    pub mha_output: Cost,
    pub ffn: Cost,
    pub unpooler: Cost,
    pub classifier: Cost,
    pub router: Cost,
    /// Elementwise work inside the layers and router, in FLOPs.
    pub elementwise: u64,
}

impl Breakdown {
    /// Sum of every component.
    pub fn total(&self) -> u64 {
        self.matmul_cost().flops() + self.elementwise
    }

    /// Everything except elementwise work.
    pub fn matmul_cost(&self) -> Cost {
        self.embedding
            + self.mha_projections
            + self.mha_scores
            + self.mha_values
            + self.mha_output
            + self.ffn
            + self.unpooler
            + self.classifier
            + self.router
    }

    fn add_mha(&mut self, m: &MhaCost) {
        self.mha_projections += m.projections;
        self.mha_scores += m.scores;
        self.mha_values += m.values;
        self.mha_output += m.output;
    }
}

impl AddAssign for Breakdown {
    fn add_assign(&mut self, o: Breakdown) {
        self.embedding += o.embedding;
        self.mha_projections += o.mha_projections;
        self.mha_scores += o.mha_scores;
        self.mha_values += o.mha_values;
        self.mha_output += o.mha_output;
        self.ffn += o.ffn;
        self.unpooler += o.unpooler;
        self.classifier += o.classifier;
        self.router += o.router;
        self.elementwise += o.elementwise;
    }
}

/// Cost of the router MLP on one CLS row.
pub fn count_router(config: &EncoderConfig) -> Cost {
    count_linear(1, config.d_model, config.router_hidden)
        + count_linear(1, config.router_hidden, config.num_levels())
}

/// Whole forward pass over `l` encoder rows at factor `r`; `routed` adds
/// the router on top.
pub fn count_forward_with(
    config: &EncoderConfig,
    l: usize,
    r: f64,
    routed: bool,
    options: FlopsOptions,
) -> Result<Breakdown> {
    if l == 0 {
        return Err(invalid("sequence length must be positive"));
    }
    let full = config.full_factor();
    let mut out = Breakdown::default();
    for layer in 0..config.num_layers {
        let rl = if layer < config.num_nonadaptive { full } else { r };
        out.add_mha(&count_mha(l, config, rl)?);
        out.ffn += count_ffn(l, config, rl)?;
        if options.include_elementwise {
            out.elementwise += elementwise_layer(l, config, rl)?;
        }
    }
    out.unpooler = count_linear(l, config.width(r)?, config.d_model);
    out.classifier = count_linear(1, config.d_model, config.num_classes);
    if routed {
        out.router = count_router(config);
        if options.include_elementwise {
            out.elementwise += 8 * config.router_hidden as u64;
        }
    }
    if options.include_elementwise {
        out.embedding.adds = (l * config.d_model) as u64;
    }
    Ok(out)
}

/// [`count_forward_with`] with matmul-only accounting.
pub fn count_forward(config: &EncoderConfig, l: usize, r: f64, routed: bool) -> Result<Breakdown> {
    count_forward_with(config, l, r, routed, FlopsOptions::default())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub seq_len: usize,
    pub r: f64,
    pub total: u64,
}

/// Per-component and per-sample FLOPs over an evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopsLedger {
    pub components: Breakdown,
    pub records: Vec<SampleRecord>,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, sample_id: usize, seq_len: usize, r: f64, cost: Breakdown) {
        self.components += cost;
        self.records.push(SampleRecord {
            sample_id,
            seq_len,
            r,
            total: cost.total(),
        });
    }

    pub fn merge(&mut self, other: FlopsLedger) {
        self.components += other.components;
        self.records.extend(other.records);
    }

    pub fn total(&self) -> u64 {
        self.components.total()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mean_per_sample(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.total() as f64 / self.records.len() as f64
        }
    }

    /// Share of samples per factor, in the order of `factors`.
    pub fn fractions(&self, factors: &[f64]) -> Vec<f64> {
        let n = self.records.len().max(1) as f64;
        factors
            .iter()
            .map(|&f| self.records.iter().filter(|s| s.r == f).count() as f64 / n)
            .collect()
    }
}

/// One line of an accuracy-vs-FLOPs report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run_id: String,
    pub split: String,
    pub mode: String,
    pub accuracy: f64,
    pub total_flops: u64,
    pub mean_flops_per_sample: f64,
    /// Share of samples per reduction factor.
    pub fractions: Vec<f64>,
    /// Set when the run behind this row failed.
    pub error: Option<String>,
}

impl ReportRow {
    pub fn failed(run_id: String, split: &str, mode: &str, levels: usize, error: String) -> Self {
        Self {
            run_id,
            split: split.into(),
            mode: mode.into(),
            accuracy: f64::NAN,
            total_flops: 0,
            mean_flops_per_sample: f64::NAN,
            fractions: vec![f64::NAN; levels],
            error: Some(error),
        }
    }
}

fn factor_label(r: f64) -> String {
    format!("frac_r_{r:?}")
}

/// CSV with header `run_id,split,mode,accuracy,total_flops,
/// mean_flops_per_sample,frac_r_<r>...`, plus a trailing `error` column
/// when `with_error` is set.
pub fn write_report<W: Write>(out: W, factors: &[f64], rows: &[ReportRow], with_error: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["run_id", "split", "mode", "accuracy", "total_flops", "mean_flops_per_sample"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(factors.iter().map(|&r| factor_label(r)));
    if with_error {
        header.push("error".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        if row.fractions.len() != factors.len() {
            return Err(invalid(format!(
                "row {} has {} fractions for {} factors",
                row.run_id,
                row.fractions.len(),
                factors.len()
            )));
        }
        let num = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
        let mut rec = vec![
            row.run_id.clone(),
            row.split.clone(),
            row.mode.clone(),
            num(row.accuracy),
            if row.error.is_some() { String::new() } else { row.total_flops.to_string() },
            num(row.mean_flops_per_sample),
        ];
        rec.extend(row.fractions.iter().map(|&f| num(f)));
        if with_error {
            rec.push(row.error.clone().unwrap_or_default());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Scalar parameters in one full-width transformer layer.
pub fn layer_param_count(config: &EncoderConfig) -> usize {
    let (d, f) = (config.d_model, config.d_ffn);
    4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
}

/// Scalar parameters in the router MLP.
pub fn router_param_count(config: &EncoderConfig) -> usize {
    let (d, h, m) = (config.d_model, config.router_hidden, config.num_levels());
    d * h + h + h * m + m
}

/// One static breakdown per line: `r,mode,seq_len`, every component in
/// FLOPs, then `total`.
pub fn write_breakdowns<W: Write>(out: W, rows: &[(f64, bool, usize, Breakdown)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "r",
        "mode",
        "seq_len",
        "embedding",
        "mha_projections",
        "mha_scores",
        "mha_values",
        "mha_output",
        "ffn",
        "unpooler",
        "classifier",
        "router",
        "elementwise",
        "total",
    ])
    .map_err(csv_err)?;
    for (r, routed, l, b) in rows {
        let mut rec = vec![
            format!("{r:?}"),
            if *routed { "routed" } else { "fixed" }.to_string(),
            l.to_string(),
        ];
        for c in [
            b.embedding,
            b.mha_projections,
            b.mha_scores,
            b.mha_values,
            b.mha_output,
            b.ffn,
            b.unpooler,
            b.classifier,
            b.router,
        ] {
            rec.push(c.flops().to_string());
        }
        rec.push(b.elementwise.to_string());
        rec.push(b.total().to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => invalid(format!("csv: {other:?}")),
    }
}

use std::io::Write;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::flops::{count_forward_with, FlopsLedger, FlopsOptions, ReportRow};
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode {
    /// The router picks a factor per sample.
    Routed,
    /// Every sample runs at this factor.
    Fixed(f64),
}

impl EvalMode {
    pub fn label(&self) -> String {
        match self {
            EvalMode::Routed => "routed".into(),
            EvalMode::Fixed(r) => format!("fixed-{r:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    pub sample_id: usize,
    pub r: f64,
    pub predicted: usize,
    pub label: usize,
}

/// One routing decision, exported as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingDecision {
    pub sample_id: usize,
    pub logits: Vec<f64>,
    pub chosen_r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub accuracy: f64,
    pub ledger: FlopsLedger,
    /// Samples per reduction factor, in configured order.
    pub histogram: Vec<usize>,
    pub outcomes: Vec<SampleOutcome>,
    /// Empty unless routed.
    pub decisions: Vec<RoutingDecision>,
}

impl EvalReport {
    pub fn report_row(&self, run_id: &str, split: &str, factors: &[f64]) -> ReportRow {
        ReportRow {
            run_id: run_id.into(),
            split: split.into(),
            mode: self.mode.label(),
            accuracy: self.accuracy,
            total_flops: self.ledger.total(),
            mean_flops_per_sample: self.ledger.mean_per_sample(),
            fractions: self.ledger.fractions(factors),
            error: None,
        }
    }

    pub fn write_decisions<W: Write>(&self, out: &mut W) -> Result<()> {
        for d in &self.decisions {
            serde_json::to_writer(&mut *out, d)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Accuracy, FLOPs and routing histogram over `split`. Sequences are run
/// one at a time without padding.
pub fn evaluate(model: &Model, split: &Dataset, mode: EvalMode) -> Result<EvalReport> {
    evaluate_with(model, split, mode, FlopsOptions::default())
}

pub fn evaluate_with(model: &Model, split: &Dataset, mode: EvalMode, flops: FlopsOptions) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(invalid("empty evaluation split"));
    }
    let config = model.config();
    if let EvalMode::Fixed(r) = mode {
        config.level_of(r)?;
    }
    let mut ledger = FlopsLedger::new();
    let mut histogram = vec![0; config.num_levels()];
    let mut outcomes = Vec::with_capacity(split.len());
    let mut decisions = Vec::new();
    let mut correct = 0usize;
    for s in &split.samples {
        let (r, predicted) = match mode {
            EvalMode::Routed => {
                let p = model.predict_routed(&s.token_ids)?;
                decisions.push(RoutingDecision {
                    sample_id: s.id,
                    logits: p.router_logits,
                    chosen_r: p.r,
                });
                (p.r, p.prediction.predicted)
            }
            EvalMode::Fixed(r) => (r, model.predict_at(&s.token_ids, r)?.predicted),
        };
        let l = s.token_ids.len() + 1;
        let cost = count_forward_with(config, l, r, mode == EvalMode::Routed, flops)?;
        ledger.record(s.id, l, r, cost);
        histogram[config.level_of(r)?] += 1;
        correct += usize::from(predicted == s.label);
        outcomes.push(SampleOutcome {
            sample_id: s.id,
            r,
            predicted,
            label: s.label,
        });
    }
    Ok(EvalReport {
        mode,
        accuracy: correct as f64 / split.len() as f64,
        ledger,
        histogram,
        outcomes,
        decisions,
    })
}

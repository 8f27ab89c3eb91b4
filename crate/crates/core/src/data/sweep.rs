use std::io::Write;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::flops::{write_report, ReportRow};
use crate::hardness::ThresholdTable;
use crate::model::Model;
use crate::training::{evaluate_with, train, EvalMode};

/// One trained configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub x: f64,
    pub num_nonadaptive: usize,
    pub window: usize,
    pub factors: Vec<f64>,
}

impl SweepCell {
    pub fn run_id(&self) -> String {
        let set: Vec<String> = self.factors.iter().map(|r| format!("{r:?}")).collect();
        format!("x={:?};K={};W={};R={}", self.x, self.num_nonadaptive, self.window, set.join("/"))
    }
}

/// Grid cells in row order: reduction set, then `K`, then `W`, then `x`.
/// An empty grid axis falls back to the base config's value.
pub fn cells(base: &RunConfig) -> Vec<SweepCell> {
    let g = &base.sweep;
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let sets = if g.reduction_sets.is_empty() {
        vec![base.encoder.reduction_factors.clone()]
    } else {
        g.reduction_sets.clone()
    };
    let mut out = Vec::new();
    for factors in &sets {
        for k in or(&g.num_nonadaptive, base.encoder.num_nonadaptive) {
            for w in or(&g.windows, base.train.window) {
                for &x in &g.thresholds {
                    out.push(SweepCell {
                        x,
                        num_nonadaptive: k,
                        window: w,
                        factors: factors.clone(),
                    });
                }
            }
        }
    }
    out
}

pub struct SweepResult {
    /// Every factor that appears in any cell, ascending.
    pub factors: Vec<f64>,
    pub cells: Vec<SweepCell>,
    pub rows: Vec<ReportRow>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_report(out, &self.factors, &self.rows, true)
    }
}

fn run_cell(base: &RunConfig, cell: &SweepCell, train_set: &Dataset, eval_set: &Dataset) -> Result<ReportRow> {
    let mut config = base.clone();
    config.encoder.num_nonadaptive = cell.num_nonadaptive;
    config.encoder.reduction_factors = cell.factors.clone();
    config.train.window = cell.window;
    config.train.thresholds = ThresholdTable::graded(cell.x, cell.factors.len())?;
    let encoder = config.encoder_for(&[train_set, eval_set])?;
    let model = Model::new(&encoder, config.seed)?;
    let outcome = train(model, train_set, &config.train)?;
    let report = evaluate_with(&outcome.model, eval_set, EvalMode::Routed, config.flops)?;
    Ok(report.report_row(&cell.run_id(), "eval", &cell.factors))
}

/// Trains and evaluates every grid cell. A failing cell becomes a row with
/// its error message and the sweep moves on.
pub fn run_sweep(base: &RunConfig, train_set: &Dataset, eval_set: &Dataset) -> Result<SweepResult> {
    let cells = cells(base);
    let mut factors: Vec<f64> = cells.iter().flat_map(|c| c.factors.iter().copied()).collect();
    factors.sort_by(f64::total_cmp);
    factors.dedup();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let row = match run_cell(base, cell, train_set, eval_set) {
            Ok(mut row) => {
                row.fractions = factors
                    .iter()
                    .map(|f| {
                        cell.factors
                            .iter()
                            .position(|c| c == f)
                            .map_or(0.0, |i| row.fractions[i])
                    })
                    .collect();
                row
            }
            Err(e) => ReportRow::failed(cell.run_id(), "eval", "routed", factors.len(), e.to_string()),
        };
        rows.push(row);
    }
    Ok(SweepResult { factors, cells, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_order_and_fallbacks() {
        let mut base = RunConfig::default();
        base.sweep.reduction_sets = vec![vec![0.25, 1.0], vec![0.25, 0.5, 1.0]];
        base.sweep.windows = vec![3, 5];
        let c = cells(&base);
        assert_eq!(c.len(), 2 * 2 * 3);
        assert_eq!(c[0].run_id(), "x=0.5;K=2;W=3;R=0.25/1.0");
        assert_eq!(c[1].x, 0.7);
        assert_eq!(c[3].window, 5);
        assert_eq!(c[6].factors.len(), 3);
    }
}

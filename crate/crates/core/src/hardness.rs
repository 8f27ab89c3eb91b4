//! Hardness labels from the network's prediction history.
//!
//! Each training sample keeps the probability the classifier gave its true
//! class in each of the last `W` epochs. Level `i` of the label is set when
//! all `W` recorded values fall inside level `i`'s closed interval. Level 1
//! is the easiest and maps to the smallest reduction factor.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::numerics::xlogx;

/// Closed interval per hardness level, ordered like the ascending
/// reduction factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdTable {
    intervals: Vec<(f64, f64)>,
}

impl ThresholdTable {
    /// Confidence intervals, each inside `[0, 1]`.
    pub fn confidence(intervals: Vec<(f64, f64)>) -> Result<Self> {
        Self::checked(intervals, 1.0)
    }

    /// Entropy intervals for a `num_classes`-way classifier, each inside
    /// `[0, ln C]` (with a little slack for rounding).
    pub fn entropy(intervals: Vec<(f64, f64)>, num_classes: usize) -> Result<Self> {
        Self::checked(intervals, (num_classes as f64).ln() + 1e-9)
    }

    fn checked(intervals: Vec<(f64, f64)>, upper: f64) -> Result<Self> {
        if intervals.is_empty() {
            return Err(invalid("threshold table needs at least one level"));
        }
        for &(lo, hi) in &intervals {
            if !(lo <= hi) || lo < 0.0 || hi > upper {
                return Err(invalid(format!("bad threshold interval [{lo}, {hi}]")));
            }
        }
        Ok(Self { intervals })
    }

    /// Two levels split at `x`: easy `[x, 1]`, hard `[0, x]`.
    pub fn split_at(x: f64) -> Result<Self> {
        Self::confidence(vec![(x, 1.0), (0.0, x)])
    }

    /// `M` levels for a sweep value `x`: level 1 gets `[x, 1]`, and `[0, x]`
    /// is cut into `M - 1` equal closed pieces, hardest last.
    pub fn graded(x: f64, levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(invalid("graded thresholds need at least two levels"));
        }
        let pieces = (levels - 1) as f64;
        let mut intervals = vec![(x, 1.0)];
        for j in 0..levels - 1 {
            let hi = x * (pieces - j as f64) / pieces;
            let lo = x * (pieces - j as f64 - 1.0) / pieces;
            intervals.push((lo, hi));
        }
        Self::confidence(intervals)
    }

    pub fn levels(&self) -> usize {
        self.intervals.len()
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn contains(&self, level: usize, value: f64) -> bool {
        let (lo, hi) = self.intervals[level];
        lo <= value && value <= hi
    }

    /// Entropy intervals matching these confidence intervals for a binary
    /// classifier whose confidences are all at least 0.5, where the
    /// binary entropy is decreasing.
    pub fn binary_entropy_image(&self) -> Result<Self> {
        let mut out = Vec::with_capacity(self.levels());
        for &(lo, hi) in &self.intervals {
            if lo < 0.5 {
                return Err(invalid("binary entropy image needs intervals within [0.5, 1]"));
            }
            out.push((binary_entropy(hi), binary_entropy(lo)));
        }
        Self::entropy(out, 2)
    }
}

pub fn binary_entropy(p: f64) -> f64 {
    -(xlogx(p) + xlogx(1.0 - p))
}

/// M-bit label; bit `i` marks the sub-network at the `i`-th smallest factor
/// as eligible for this sample.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HardnessLabel(Vec<bool>);

impl HardnessLabel {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn zeros(levels: usize) -> Self {
        Self(vec![false; levels])
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// No level set; the sample carries no router target.
    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|b| !b)
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    /// Bits as `0.0` / `1.0`.
    pub fn as_targets(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// `"10"`-style rendering, level 1 first.
    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Window-and-interval rule shared by the confidence and entropy modes:
/// level `i` is set iff the window holds exactly `window` values and every
/// one lies in level `i`'s closed interval.
pub fn label_from_window(values: &[f64], thresholds: &ThresholdTable, window: usize) -> HardnessLabel {
    let levels = thresholds.levels();
    if window == 0 || values.len() < window {
        return HardnessLabel::zeros(levels);
    }
    let recent = &values[values.len() - window..];
    HardnessLabel(
        (0..levels)
            .map(|i| recent.iter().all(|&v| thresholds.contains(i, v)))
            .collect(),
    )
}

/// Hardness label from the last `W` ground-truth probabilities.
pub fn assign_hardness_label(history: &[f64], thresholds: &ThresholdTable, window: usize) -> HardnessLabel {
    label_from_window(history, thresholds, window)
}

/// Hardness label from the last `W` prediction entropies; thresholds are on
/// entropy, so low-entropy intervals belong to the easy levels.
pub fn assign_hardness_label_entropy(
    entropies: &[f64],
    thresholds: &ThresholdTable,
    window: usize,
) -> HardnessLabel {
    label_from_window(entropies, thresholds, window)
}

/// Natural-log entropy of a probability vector, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(invalid(format!("not a probability vector (sums to {sum})")));
    }
    Ok(-p.iter().map(|&v| xlogx(v)).sum::<f64>())
}

/// Label used by the BERxiT-style ablation: bit `i` is set iff the
/// sub-network at factor `r_i` predicts the true class in this iteration.
pub fn berxit_label_from_predictions(predictions: &[usize], truth: usize) -> HardnessLabel {
    HardnessLabel(predictions.iter().map(|&p| p == truth).collect())
}

/// Runs `tokens` through every sub-network of `model` and labels each by
/// whether it classifies the sample correctly.
pub fn assign_berxit_style_label(model: &crate::model::Model, tokens: &[usize], truth: usize) -> Result<HardnessLabel> {
    let predictions = model
        .config()
        .reduction_factors
        .iter()
        .map(|&r| model.predict_at(tokens, r).map(|p| p.predicted))
        .collect::<Result<Vec<_>>>()?;
    Ok(berxit_label_from_predictions(&predictions, truth))
}

#[derive(Clone, Debug, Default, PartialEq)]
struct SampleHistory {
    /// `(epoch, value)`, oldest first.
    entries: VecDeque<(usize, f64)>,
}

/// Per-sample ring buffers of the last `W` recorded values.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceHistory {
    window: usize,
    samples: BTreeMap<usize, SampleHistory>,
    /// Upper bound on accepted values: 1 for confidences, `ln C` for
    /// entropies.
    max_value: f64,
}

impl ConfidenceHistory {
    pub fn new(window: usize) -> Self {
        Self::with_bound(window, 1.0)
    }

    /// History of values bounded by `max_value` instead of 1.
    pub fn with_bound(window: usize, max_value: f64) -> Self {
        Self {
            window: window.max(1),
            samples: BTreeMap::new(),
            max_value,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Appends one value for `(sample, epoch)`, evicting the oldest entry
    /// once the buffer holds `W` values. Epochs must strictly increase per
    /// sample.
    pub fn record(&mut self, sample_id: usize, epoch: usize, value: f64) -> Result<()> {
        if !(0.0..=self.max_value).contains(&value) {
            return Err(invalid(format!(
                "value {value} outside [0, {}] for sample {sample_id}",
                self.max_value
            )));
        }
        let h = self.samples.entry(sample_id).or_default();
        if let Some(&(last, _)) = h.entries.back() {
            if epoch <= last {
                return Err(invalid(format!(
                    "sample {sample_id} already has a value for epoch {last} (got epoch {epoch})"
                )));
            }
        }
        h.entries.push_back((epoch, value));
        while h.entries.len() > self.window {
            h.entries.pop_front();
        }
        Ok(())
    }

    /// Buffered values for a sample, oldest first.
    pub fn values(&self, sample_id: usize) -> Vec<f64> {
        self.samples
            .get(&sample_id)
            .map(|h| h.entries.iter().map(|&(_, v)| v).collect())
            .unwrap_or_default()
    }

    pub fn epochs(&self, sample_id: usize) -> Vec<usize> {
        self.samples
            .get(&sample_id)
            .map(|h| h.entries.iter().map(|&(e, _)| e).collect())
            .unwrap_or_default()
    }

    pub fn last_epoch(&self, sample_id: usize) -> Option<usize> {
        self.samples.get(&sample_id).and_then(|h| h.entries.back().map(|&(e, _)| e))
    }

    pub fn label(&self, sample_id: usize, thresholds: &ThresholdTable) -> HardnessLabel {
        label_from_window(&self.values(sample_id), thresholds, self.window)
    }
}

#[derive(Serialize)]
struct DumpRow<'a> {
    sample_id: usize,
    epoch: usize,
    p_truth: f64,
    label_bits: &'a str,
}

/// Writes one JSON line `{sample_id, epoch, p_truth, label_bits}` per
/// buffered entry, with the label the current buffer yields.
pub fn dump_history<W: Write>(
    history: &ConfidenceHistory,
    thresholds: &ThresholdTable,
    out: &mut W,
) -> Result<()> {
    for (&id, h) in &history.samples {
        let bits = history.label(id, thresholds).to_bit_string();
        for &(epoch, value) in &h.entries {
            let row = DumpRow {
                sample_id: id,
                epoch,
                p_truth: value,
                label_bits: &bits,
            };
            serde_json::to_writer(&mut *out, &row)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

//! Training loop: warm-up without the router, hardness-label driven
//! sub-network sampling, the weighted task + router loss, AdamW, head
//! reordering and evaluation.

mod eval;
mod heads;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Dataset, Sample};
use crate::encoder::SeqBatch;
use crate::error::{invalid, Error, Result};
use crate::hardness::{berxit_label_from_predictions, entropy, ConfidenceHistory, HardnessLabel, ThresholdTable};
use crate::model::Model;
use crate::numerics::{Bindings, Tape, Var};
use crate::router::router_loss;

pub use eval::{evaluate, evaluate_with, EvalMode, EvalReport, RoutingDecision, SampleOutcome};
pub use heads::{head_importance, head_order, reorder_heads};
pub use optim::{AdamW, Moments};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Windowed ground-truth probability.
    Confidence,
    /// Windowed prediction entropy; thresholds are entropy intervals.
    Entropy,
    /// Bit `i` set iff the sub-network at `r_i` is right in this step.
    Berxit,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(Self::Confidence),
            "entropy" => Ok(Self::Entropy),
            "berxit" => Ok(Self::Berxit),
            _ => Err(Error::Config(format!("unknown label mode {s:?}"))),
        }
    }
}

/// Which forward pass supplies the value recorded in the history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HardnessSource {
    /// The pass the sample trained through this step.
    Sampled,
    /// An extra gradient-free pass at this factor.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda_task: f64,
    pub lambda_router: f64,
    pub window: usize,
    pub thresholds: ThresholdTable,
    pub seed: u64,
    pub label_mode: LabelMode,
    pub hardness_source: HardnessSource,
    /// Reorder heads by importance after this many epochs; `Some(0)`
    /// reorders at initialisation.
    pub reorder_heads_after: Option<usize>,
    /// Training samples used to score heads.
    pub calibration_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            lambda_task: 1.0,
            lambda_router: 0.5,
            window: 3,
            thresholds: ThresholdTable::split_at(0.8).expect("valid"),
            seed: 0,
            label_mode: LabelMode::Confidence,
            hardness_source: HardnessSource::Sampled,
            reorder_heads_after: Some(0),
            calibration_size: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, levels: usize, num_classes: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.window == 0 {
            return fail("window must be >= 1".into());
        }
        if !(self.lambda_task >= 0.0 && self.lambda_router >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning_rate must be positive and weight_decay non-negative".into());
        }
        if self.thresholds.levels() != levels {
            return fail(format!(
                "{} threshold levels for {levels} reduction factors",
                self.thresholds.levels()
            ));
        }
        if self.label_mode == LabelMode::Entropy {
            ThresholdTable::entropy(self.thresholds.intervals().to_vec(), num_classes)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.calibration_size == 0 && self.reorder_heads_after.is_some() {
            return fail("head reordering needs a calibration set".into());
        }
        Ok(())
    }

    /// Epochs `1..=W` skip the router loss; labels need `W` recorded
    /// epochs first. Per-step labels do not wait.
    pub fn router_active(&self, epoch: usize) -> bool {
        self.label_mode == LabelMode::Berxit || epoch > self.window
    }
}

/// Uniform choice among the factors whose label bit is set; the full
/// width when none is.
pub fn sample_reduction_factor<R: Rng + ?Sized>(label: &HardnessLabel, factors: &[f64], rng: &mut R) -> f64 {
    let ones: Vec<usize> = label.ones().collect();
    match ones.len() {
        0 => *factors.last().expect("non-empty factor set"),
        1 => factors[ones[0]],
        n => factors[ones[rng.random_range(0..n)]],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub task: f64,
    /// Zero when the router did not train in this step.
    pub router: f64,
    pub total: f64,
    pub router_trained: bool,
    /// Label each sample was routed by, in batch order.
    pub labels: Vec<HardnessLabel>,
    /// Factor each sample trained through, in batch order.
    pub factors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_task")]
    pub l_task: f64,
    #[serde(rename = "L_router")]
    pub l_router: f64,
    pub router_trained: bool,
    /// Label bit strings (level 1 first) and how many samples got each.
    pub label_histogram: BTreeMap<String, usize>,
}

pub fn write_logs<W: Write>(logs: &[EpochLog], out: &mut W) -> Result<()> {
    for l in logs {
        serde_json::to_writer(&mut *out, l)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Mutable training state for one run.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub history: ConfidenceHistory,
    factor_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    pad_to: usize,
    steps: usize,
}

/// Per-group forward results inside one step.
struct Group<'t> {
    members: Vec<usize>,
    r: f64,
    logits: Var<'t>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        let c = model.config();
        config.validate(c.num_levels(), c.num_classes)?;
        if let HardnessSource::Fixed(r) = config.hardness_source {
            c.level_of(r)?;
        }
        let history = match config.label_mode {
            LabelMode::Entropy => ConfidenceHistory::with_bound(config.window, (c.num_classes as f64).ln()),
            _ => ConfidenceHistory::new(config.window),
        };
        let optimizer = AdamW::new(model.store.len(), config.learning_rate, config.weight_decay);
        Ok(Self {
            pad_to: c.max_seq_len,
            factor_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5a5a_0001),
            shuffle_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xa5a5_0002),
            model,
            config,
            optimizer,
            history,
            steps: 0,
        })
    }

    /// Label that routes `sample` in `epoch` under a history-based mode.
    pub fn label_for(&self, sample_id: usize) -> HardnessLabel {
        self.history.label(sample_id, &self.config.thresholds)
    }

    fn record(&mut self, sample: &Sample, epoch: usize, probs: &[f64]) -> Result<()> {
        let value = match self.config.label_mode {
            LabelMode::Entropy => entropy(probs)?.max(0.0),
            _ => probs[sample.label].clamp(0.0, 1.0),
        };
        self.history.record(sample.id, epoch, value)
    }

    /// One optimisation step on `batch` in (1-based) `epoch`.
    pub fn train_step(&mut self, batch: &[&Sample], epoch: usize) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        self.steps += 1;
        let factors = self.model.config().reduction_factors.clone();
        let berxit = self.config.label_mode == LabelMode::Berxit;
        let router_on = self.config.router_active(epoch);

        let mut labels: Vec<HardnessLabel> = if berxit {
            Vec::new()
        } else {
            batch.iter().map(|s| self.label_for(s.id)).collect()
        };
        let chosen: Vec<f64> = if berxit {
            vec![f64::NAN; batch.len()]
        } else {
            labels
                .iter()
                .map(|l| sample_reduction_factor(l, &factors, &mut self.factor_rng))
                .collect()
        };

        // Fixed-width history values come from the pre-update weights.
        let mut probs_taken: Vec<Vec<f64>> = vec![Vec::new(); batch.len()];
        if let (false, HardnessSource::Fixed(r)) = (berxit, self.config.hardness_source) {
            for (i, s) in batch.iter().enumerate() {
                if chosen[i] != r {
                    probs_taken[i] = self.model.predict_at(&s.token_ids, r)?.probs;
                }
            }
        }

        let tape = Tape::new();
        let b = Bindings::new(&tape, &self.model.store, true);
        let enc = &self.model.encoder;
        let n = batch.len() as f64;

        let mut groups = Vec::new();
        // Router logits per group of samples that share a forward prefix.
        let mut router_parts: Vec<(Vec<usize>, Var<'_>)> = Vec::new();
        if berxit {
            // Every sub-network sees the whole batch.
            let seqs: Vec<&[usize]> = batch.iter().map(|s| s.token_ids.as_slice()).collect();
            let sb = SeqBatch::new(&seqs, Some(self.pad_to))?;
            let hidden = enc.encode_nonadaptive(&b, &sb)?;
            let cls = hidden.select_rows(&sb.cls_rows())?;
            router_parts.push(((0..batch.len()).collect(), self.model.router.forward(&b, &cls)?));
            for &r in &factors {
                let logits = enc.forward_from_hidden(&b, &hidden, &sb, r)?;
                groups.push(Group {
                    members: (0..batch.len()).collect(),
                    r,
                    logits,
                });
            }
        } else {
            for &r in &factors {
                let members: Vec<usize> = (0..batch.len()).filter(|&i| chosen[i] == r).collect();
                if members.is_empty() {
                    continue;
                }
                let seqs: Vec<&[usize]> = members.iter().map(|&i| batch[i].token_ids.as_slice()).collect();
                let sb = SeqBatch::new(&seqs, Some(self.pad_to))?;
                let parts = enc.forward_parts(&b, &sb, r)?;
                if router_on {
                    let cls = parts.hidden.select_rows(&sb.cls_rows())?;
                    router_parts.push((members.clone(), self.model.router.forward(&b, &cls)?));
                }
                groups.push(Group {
                    members,
                    r,
                    logits: parts.logits,
                });
            }
        }

        // Task loss and the per-sample probabilities it saw.
        let mut task: Option<Var<'_>> = None;
        let mut predictions = vec![Vec::new(); batch.len()];
        for g in &groups {
            let targets: Vec<usize> = g.members.iter().map(|&i| batch[i].label).collect();
            let ce = g.logits.cross_entropy(&targets)?;
            let weight = if berxit { 1.0 } else { g.members.len() as f64 / n };
            let term = ce.scale(weight);
            task = Some(match task {
                None => term,
                Some(t) => t.add(&term)?,
            });
            let probs = g.logits.value().softmax(1)?;
            for (row, &i) in g.members.iter().enumerate() {
                let p = probs.row(row);
                predictions[i].push(crate::router::route_index(p));
                if !berxit && g.r == chosen[i] && probs_taken[i].is_empty() {
                    probs_taken[i] = p.to_vec();
                }
            }
        }
        let task = task.expect("at least one group");

        if berxit {
            labels = batch
                .iter()
                .enumerate()
                .map(|(i, s)| berxit_label_from_predictions(&predictions[i], s.label))
                .collect();
        }

        // Mean BCE over all kept samples, assembled from per-group means.
        let mut total = task.scale(self.config.lambda_task);
        let mut router_value = 0.0;
        if router_on {
            let kept = labels.iter().filter(|l| !l.is_all_zero()).count();
            for (members, logits) in &router_parts {
                let group_labels: Vec<HardnessLabel> = members.iter().map(|&i| labels[i].clone()).collect();
                let k = group_labels.iter().filter(|l| !l.is_all_zero()).count();
                if k == 0 {
                    continue;
                }
                let term = router_loss(logits, &group_labels)?.scale(k as f64 / kept as f64);
                router_value += term.value().item()?;
                total = total.add(&term.scale(self.config.lambda_router))?;
            }
        }
        let task_value = task.value().item()?;
        let total_value = total.value().item()?;
        if !total_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: self.steps,
                detail: format!("L_task = {task_value}, L_router = {router_value}"),
            });
        }
        tape.backward(total)?;
        let grads = b.gradients();
        drop(b);
        drop(tape);
        self.optimizer.step(&mut self.model.store, &grads);

        if !berxit {
            for (i, s) in batch.iter().enumerate() {
                self.record(s, epoch, &probs_taken[i])?;
            }
        }

        Ok(StepLosses {
            task: task_value,
            router: router_value,
            total: total_value,
            router_trained: router_on,
            labels,
            factors: if berxit { vec![f64::NAN; batch.len()] } else { chosen },
        })
    }

    /// One pass over `train` in a freshly shuffled order.
    pub fn run_epoch(&mut self, train: &Dataset, epoch: usize) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut task_sum = 0.0;
        let mut router_sum = 0.0;
        let mut router_trained = false;
        let mut histogram = BTreeMap::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let out = self.train_step(&batch, epoch)?;
            let w = batch.len() as f64 / train.len() as f64;
            task_sum += w * out.task;
            router_sum += w * out.router;
            router_trained |= out.router_trained;
            for l in &out.labels {
                *histogram.entry(l.to_bit_string()).or_insert(0) += 1;
            }
        }
        Ok(EpochLog {
            epoch,
            l_task: task_sum,
            l_router: router_sum,
            router_trained,
            label_histogram: histogram,
        })
    }

    /// Scores heads on the first `calibration_size` training samples and
    /// reorders them, moving optimizer state along.
    pub fn reorder(&mut self, train: &Dataset) -> Result<Vec<Vec<usize>>> {
        let n = self.config.calibration_size.min(train.len());
        let seqs: Vec<&[usize]> = train.samples[..n].iter().map(|s| s.token_ids.as_slice()).collect();
        let scores = head_importance(&self.model, &seqs)?;
        reorder_heads(&mut self.model, &scores, Some(&mut self.optimizer))
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub history: ConfidenceHistory,
}

/// Full run: optional head reordering, then `epochs` epochs.
pub fn train(model: Model, train_set: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_set, config, |_, _| Ok(()))
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F>(model: Model, train_set: &Dataset, config: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&Trainer, &EpochLog) -> Result<()>,
{
    if train_set.is_empty() {
        return Err(invalid("empty training set"));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    if config.reorder_heads_after == Some(0) {
        trainer.reorder(train_set)?;
    }
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let log = trainer.run_epoch(train_set, epoch)?;
        if config.reorder_heads_after == Some(epoch) {
            trainer.reorder(train_set)?;
        }
        on_epoch(&trainer, &log)?;
        logs.push(log);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        logs,
        history: trainer.history,
    })
}

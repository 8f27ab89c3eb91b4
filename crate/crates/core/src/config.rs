//! Flat `key = value` run configuration.
//!
//! `#` starts a comment that runs to the end of the line. Lists are comma
//! separated; threshold tables are `lo:hi` pairs (level 1 first) and
//! reduction sets inside a sweep are `/`-separated factors joined by `;`.
//!
//! ```text
//! seed = 7
//! num_layers = 4
//! num_nonadaptive = 2
//! reduction_factors = 0.25, 1.0
//! thresholds = 0.8:1.0, 0.0:0.8
//! window = 3
//! synthetic.n_easy = 2000
//! sweep.thresholds = 0.5, 0.7, 0.9
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{generate_synthetic, load_jsonl, load_jsonl_with, Dataset, SyntheticSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::flops::FlopsOptions;
use crate::hardness::ThresholdTable;
use crate::training::{HardnessSource, LabelMode, TrainConfig};

/// Where training and evaluation data come from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    /// Used when no eval file is given.
    pub eval_fraction: f64,
    /// Used when no train file is given.
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            eval_path: None,
            eval_fraction: 0.2,
            synthetic: SyntheticSpec::new(2000, 2000, 16, 8),
        }
    }
}

/// Cells of a threshold sweep; every combination is trained once.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    /// Split points `x`: level 1 gets `[x, 1]`, the rest share `[0, x]`.
    pub thresholds: Vec<f64>,
    pub num_nonadaptive: Vec<usize>,
    pub windows: Vec<usize>,
    pub reduction_sets: Vec<Vec<f64>>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 0.7, 0.9],
            num_nonadaptive: vec![],
            windows: vec![],
            reduction_sets: vec![],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// `vocab_size` and `num_classes` are overwritten from the data.
    pub encoder: EncoderConfig,
    /// `None` means the longest sequence in the data plus CLS.
    pub max_seq_len: Option<usize>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sweep: SweepGrid,
    pub flops: FlopsOptions,
}

fn parse_list<T: FromStr>(v: &str, sep: char) -> std::result::Result<Vec<T>, String> {
    v.split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| format!("cannot parse {s:?}")))
        .collect()
}

fn parse_one<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_intervals(v: &str) -> std::result::Result<Vec<(f64, f64)>, String> {
    v.split(',')
        .map(|pair| {
            let (lo, hi) = pair
                .split_once(':')
                .ok_or_else(|| format!("expected lo:hi, got {:?}", pair.trim()))?;
            Ok((parse_one(lo.trim())?, parse_one(hi.trim())?))
        })
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut thresholds: Option<Vec<(f64, f64)>> = None;
        let mut split: Option<f64> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.into(),
                line: n + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            let result: std::result::Result<(), String> = (|| {
                let e = &mut c.encoder;
                let t = &mut c.train;
                match key {
                    "seed" => c.seed = parse_one(v)?,
                    "num_layers" => e.num_layers = parse_one(v)?,
                    "num_nonadaptive" => e.num_nonadaptive = parse_one(v)?,
                    "d_model" => e.d_model = parse_one(v)?,
                    "num_heads" => e.num_heads = parse_one(v)?,
                    "d_ffn" => e.d_ffn = parse_one(v)?,
                    "max_seq_len" => c.max_seq_len = Some(parse_one(v)?),
                    "reduction_factors" => e.reduction_factors = parse_list(v, ',')?,
                    "router_hidden" => e.router_hidden = parse_one(v)?,
                    "layer_norm_eps" => e.layer_norm_eps = parse_one(v)?,
                    "epochs" => t.epochs = parse_one(v)?,
                    "batch_size" => t.batch_size = parse_one(v)?,
                    "learning_rate" => t.learning_rate = parse_one(v)?,
                    "weight_decay" => t.weight_decay = parse_one(v)?,
                    "lambda_task" => t.lambda_task = parse_one(v)?,
                    "lambda_router" => t.lambda_router = parse_one(v)?,
                    "window" => t.window = parse_one(v)?,
                    "thresholds" => thresholds = Some(parse_intervals(v)?),
                    "threshold_split" => split = Some(parse_one(v)?),
                    "label_mode" => t.label_mode = LabelMode::from_str(v).map_err(|e| e.to_string())?,
                    "hardness_source" => {
                        t.hardness_source = match v {
                            "sampled" => HardnessSource::Sampled,
                            r => HardnessSource::Fixed(parse_one(r)?),
                        }
                    }
                    "reorder_heads_after" => {
                        t.reorder_heads_after = match v {
                            "none" => None,
                            n => Some(parse_one(n)?),
                        }
                    }
                    "calibration_size" => t.calibration_size = parse_one(v)?,
                    "data.train" => c.data.train_path = Some(v.into()),
                    "data.eval" => c.data.eval_path = Some(v.into()),
                    "data.eval_fraction" => c.data.eval_fraction = parse_one(v)?,
                    "synthetic.n_easy" => c.data.synthetic.n_easy = parse_one(v)?,
                    "synthetic.n_hard" => c.data.synthetic.n_hard = parse_one(v)?,
                    "synthetic.seq_len" => c.data.synthetic.seq_len = parse_one(v)?,
                    "synthetic.vocab" => c.data.synthetic.vocab = parse_one(v)?,
                    "sweep.thresholds" => c.sweep.thresholds = parse_list(v, ',')?,
                    "sweep.num_nonadaptive" => c.sweep.num_nonadaptive = parse_list(v, ',')?,
                    "sweep.window" => c.sweep.windows = parse_list(v, ',')?,
                    "sweep.reduction_sets" => {
                        c.sweep.reduction_sets = v
                            .split(';')
                            .map(|set| parse_list(set, '/'))
                            .collect::<std::result::Result<_, _>>()?
                    }
                    "flops.include_elementwise" => c.flops.include_elementwise = parse_one(v)?,
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            result.map_err(err)?;
        }
        let levels = c.encoder.reduction_factors.len();
        c.train.thresholds = match (thresholds, split) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("set either thresholds or threshold_split, not both".into()))
            }
            (Some(t), None) => threshold_table(t, c.train.label_mode)?,
            (None, Some(x)) => ThresholdTable::graded(x, levels).map_err(|e| Error::Config(e.to_string()))?,
            (None, None) if levels == 2 => c.train.thresholds,
            (None, None) => ThresholdTable::graded(0.8, levels).map_err(|e| Error::Config(e.to_string()))?,
        };
        c.train.seed = c.seed;
        Ok(c)
    }

    /// Training and evaluation sets: files when configured, otherwise the
    /// synthetic task split by `eval_fraction`.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match (&self.data.train_path, &self.data.eval_path) {
            (Some(train), Some(eval)) => {
                let train = load_jsonl(train)?;
                let eval = load_jsonl_with(eval, Some(&train.vocab), Some(train.num_classes))?;
                Ok((train, eval))
            }
            (Some(train), None) => load_jsonl(train)?.split(self.data.eval_fraction, self.seed),
            (None, Some(_)) => Err(Error::Config("data.eval needs data.train".into())),
            (None, None) => generate_synthetic(&self.data.synthetic, self.seed)?.split(self.data.eval_fraction, self.seed),
        }
    }

    /// Encoder config sized for `data`.
    pub fn encoder_for(&self, data: &[&Dataset]) -> Result<EncoderConfig> {
        let mut e = self.encoder.clone();
        let first = data.first().ok_or_else(|| Error::Config("no dataset".into()))?;
        e.vocab_size = first.vocab.len();
        e.num_classes = first.num_classes;
        let longest = data.iter().map(|d| d.max_len()).max().unwrap_or(0) + 1;
        e.max_seq_len = self.max_seq_len.unwrap_or(longest);
        e.validate()?;
        Ok(e)
    }
}

fn threshold_table(intervals: Vec<(f64, f64)>, mode: LabelMode) -> Result<ThresholdTable> {
    // Entropy bounds are checked against ln C once the data is known.
    let table = match mode {
        LabelMode::Entropy => ThresholdTable::entropy(intervals, usize::MAX),
        _ => ThresholdTable::confidence(intervals),
    };
    table.map_err(|e| Error::Config(e.to_string()))
}

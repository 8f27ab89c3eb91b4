//! Datasets: JSON-lines ingestion with whitespace tokenization, the
//! synthetic easy/hard task, and threshold sweeps.

mod synthetic;
pub mod sweep;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use synthetic::{generate_synthetic, SyntheticSpec};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<cls>", "<sep>"];

/// Whitespace vocabulary. Ids `0..4` are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect())
            .expect("specials are unique")
    }
}

impl Vocab {
    /// Rebuilds a vocabulary from its token list, which must start with
    /// the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(invalid("vocabulary must start with <pad> <unk> <cls> <sep>"));
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i).is_some() {
                return Err(invalid(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Self { tokens, lookup })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.lookup.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id of `word`, adding it if unseen.
    pub fn intern(&mut self, word: &str) -> usize {
        if let Some(id) = self.id(word) {
            return id;
        }
        self.tokens.push(word.to_string());
        self.lookup.insert(word.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Whitespace tokenization. With `grow`, unseen words are added;
    /// otherwise they map to `<unk>`.
    pub fn tokenize(&mut self, text: &str, grow: bool) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| if grow { self.intern(w) } else { self.id(w).unwrap_or(UNK_ID) })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(SPECIALS[UNK_ID]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub(crate) fn rebuild_lookup(&mut self) {
        self.lookup = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HardnessTag {
    Easy,
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable row index; keys confidence histories across epochs.
    pub id: usize,
    /// Token ids without the CLS token, which the encoder prepends.
    pub token_ids: Vec<usize>,
    pub label: usize,
    /// Known only for synthetic data.
    pub hardness: Option<HardnessTag>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub vocab: Vocab,
    pub num_classes: usize,
}

#[derive(Deserialize)]
struct JsonLine {
    text: String,
    #[serde(default)]
    text2: Option<String>,
    label: i64,
    #[serde(default)]
    hardness: Option<HardnessTag>,
}

#[derive(Serialize)]
struct JsonLineOut<'a> {
    text: &'a str,
    label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    hardness: Option<HardnessTag>,
}

/// Reads `{"text", "label"}` lines (optionally `"text2"` for sentence pairs,
/// joined with `<sep>`), building a fresh vocabulary. Sample ids are line
/// numbers counted from zero.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    load_jsonl_with(path, None, None)
}

/// Like [`load_jsonl`], but with a frozen vocabulary (unknown words map to
/// `<unk>`) and/or a fixed class count (larger labels are rejected).
pub fn load_jsonl_with(path: &Path, vocab: Option<&Vocab>, num_classes: Option<usize>) -> Result<Dataset> {
    let grow = vocab.is_none();
    let mut vocab = vocab.cloned().unwrap_or_default();
    let reader = BufReader::new(File::open(path)?);
    let shown = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: shown.clone(),
        line,
        msg,
    };
    let mut samples = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            return Err(parse_err(lineno, "blank line".into()));
        }
        let row: JsonLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if row.label < 0 {
            return Err(parse_err(lineno, format!("negative label {}", row.label)));
        }
        let label = row.label as usize;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(parse_err(lineno, format!("label {label} not among {c} classes")));
            }
        }
        let mut ids = vocab.tokenize(&row.text, grow);
        if let Some(t2) = &row.text2 {
            ids.push(SEP_ID);
            ids.extend(vocab.tokenize(t2, grow));
        }
        if ids.is_empty() {
            return Err(parse_err(lineno, "empty text".into()));
        }
        samples.push(Sample {
            id: n,
            token_ids: ids,
            label,
            hardness: row.hardness,
        });
    }
    if samples.is_empty() {
        return Err(invalid(format!("{shown}: no samples")));
    }
    let inferred = samples.iter().map(|s| s.label).max().unwrap() + 1;
    let num_classes = num_classes.unwrap_or(inferred.max(2));
    Ok(Dataset {
        samples,
        vocab,
        num_classes,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.samples.iter().map(|s| s.token_ids.len()).max().unwrap_or(0)
    }

    /// Writes the dataset in the format [`load_jsonl`] reads, including the
    /// hardness tag when known.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        for s in &self.samples {
            let text = self.vocab.detokenize(&s.token_ids);
            let row = JsonLineOut {
                text: &text,
                label: s.label,
                hardness: s.hardness,
            };
            serde_json::to_writer(&mut f, &row)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    /// Subset with re-numbered ids `0..n`, sharing the vocabulary.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples = indices
            .iter()
            .enumerate()
            .map(|(new_id, &i)| Sample {
                id: new_id,
                ..self.samples[i].clone()
            })
            .collect();
        Dataset {
            samples,
            vocab: self.vocab.clone(),
            num_classes: self.num_classes,
        }
    }

    /// Seeded split into `(train, eval)`; `eval_fraction` of the samples go
    /// to eval.
    pub fn split(&self, eval_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
            return Err(invalid(format!("eval fraction {eval_fraction} outside (0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_eval = ((self.len() as f64) * eval_fraction).round() as usize;
        if n_eval == 0 || n_eval == self.len() {
            return Err(invalid("split leaves one side empty"));
        }
        let (eval, train) = order.split_at(n_eval);
        let mut train = train.to_vec();
        let mut eval = eval.to_vec();
        train.sort_unstable();
        eval.sort_unstable();
        Ok((self.subset(&train), self.subset(&eval)))
    }
}

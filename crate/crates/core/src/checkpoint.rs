//! JSON checkpoints.
//!
//! ```text
//! {
//!   "format": "slimroute-checkpoint/1",
//!   "config": { ...EncoderConfig fields... },
//!   "seed": 7,
//!   "vocab": { "tokens": ["<pad>", "<unk>", "<cls>", "<sep>", ...] },
//!   "parameters": [ { "name": "embed.token", "shape": [12, 64], "data": [...] }, ... ]
//! }
//! ```
//!
//! Parameters appear in registration order and `data` is row-major.
//! Floats are written with shortest round-trip formatting, so saving the
//! same model twice yields identical bytes and loading restores every
//! value bitwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::encoder::EncoderConfig;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT: &str = "slimroute-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: EncoderConfig,
    seed: u64,
    vocab: Vocab,
    parameters: Vec<NamedTensor>,
}

/// A model together with the vocabulary and seed it was trained with.
pub struct Loaded {
    pub model: Model,
    pub vocab: Vocab,
    pub seed: u64,
}

pub fn to_bytes(model: &Model, vocab: &Vocab, seed: u64) -> Result<Vec<u8>> {
    let store = &model.store;
    let parameters = store
        .ids()
        .map(|id| NamedTensor {
            name: store.name(id).to_string(),
            shape: store.get(id).shape().to_vec(),
            data: store.get(id).data().to_vec(),
        })
        .collect();
    let ck = Checkpoint {
        format: FORMAT.into(),
        config: model.config().clone(),
        seed,
        vocab: vocab.clone(),
        parameters,
    };
    Ok(serde_json::to_vec(&ck)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Loaded> {
    let ck: Checkpoint = serde_json::from_slice(bytes)?;
    if ck.format != FORMAT {
        return Err(invalid(format!("unsupported checkpoint format {:?}", ck.format)));
    }
    let mut store = ParamStore::new();
    for p in ck.parameters {
        store.insert(p.name, Tensor::new(p.shape, p.data)?)?;
    }
    let mut vocab = ck.vocab;
    vocab.rebuild_lookup();
    Ok(Loaded {
        model: Model::attach(&ck.config, store)?,
        vocab,
        seed: ck.seed,
    })
}

pub fn save(path: &Path, model: &Model, vocab: &Vocab, seed: u64) -> Result<()> {
    fs::write(path, to_bytes(model, vocab, seed)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Loaded> {
    from_bytes(&fs::read(path)?)
}

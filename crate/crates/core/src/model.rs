//! Encoder and router sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig, SeqBatch};
use crate::error::Result;
use crate::numerics::{Bindings, ParamId, ParamStore, Tape, Tensor};
use crate::router::{route_index, RouterHead};

#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub router: RouterHead,
    pub store: ParamStore,
}

/// Output of one fixed-width forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

/// Output of a routed forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedPrediction {
    pub router_logits: Vec<f64>,
    pub level: usize,
    pub r: f64,
    pub prediction: Prediction,
}

impl Prediction {
    fn from_logits(logits: &Tensor) -> Result<Self> {
        let probs = logits.softmax(1)?.into_data();
        let logits = logits.data().to_vec();
        let predicted = argmax(&logits);
        Ok(Self {
            logits,
            probs,
            predicted,
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    route_index(v)
}

impl Model {
    /// Fresh parameters from `seed`. Encoder parameters are drawn before
    /// the router's.
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config, &mut store, &mut rng)?;
        let router = RouterHead::new(config, &mut store, &mut rng)?;
        Ok(Self {
            encoder,
            router,
            store,
        })
    }

    /// Wraps an existing store, e.g. one read from a checkpoint.
    pub fn attach(config: &EncoderConfig, store: ParamStore) -> Result<Self> {
        let encoder = Encoder::attach(config, &store)?;
        let router = RouterHead::attach(config, &store)?;
        Ok(Self {
            encoder,
            router,
            store,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn router_params(&self) -> [ParamId; 4] {
        self.router.param_ids()
    }

    /// Forward pass through the sub-network at factor `r`.
    pub fn predict_at(&self, tokens: &[usize], r: f64) -> Result<Prediction> {
        let tape = Tape::new();
        let b = Bindings::new(&tape, &self.store, false);
        let batch = SeqBatch::single(tokens)?;
        let logits = self.encoder.forward_adaptive(&b, &batch, r)?;
        Prediction::from_logits(&logits.value())
    }

    /// Router logits for one sequence.
    pub fn router_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let b = Bindings::new(&tape, &self.store, false);
        let batch = SeqBatch::single(tokens)?;
        let hidden = self.encoder.encode_nonadaptive(&b, &batch)?;
        let cls = hidden.select_rows(&batch.cls_rows())?;
        Ok(self.router.forward(&b, &cls)?.value().data().to_vec())
    }

    /// Runs the shared prefix once, lets the router pick a factor, then
    /// finishes the pass at that factor.
    pub fn predict_routed(&self, tokens: &[usize]) -> Result<RoutedPrediction> {
        let tape = Tape::new();
        let b = Bindings::new(&tape, &self.store, false);
        let batch = SeqBatch::single(tokens)?;
        let hidden = self.encoder.encode_nonadaptive(&b, &batch)?;
        let cls = hidden.select_rows(&batch.cls_rows())?;
        let router_logits = self.router.forward(&b, &cls)?.value().data().to_vec();
        let level = route_index(&router_logits);
        let r = self.config().reduction_factors[level];
        let logits = self.encoder.forward_from_hidden(&b, &hidden, &batch, r)?;
        Ok(RoutedPrediction {
            router_logits,
            level,
            r,
            prediction: Prediction::from_logits(&logits.value())?,
        })
    }
}

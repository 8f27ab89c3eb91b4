//! Transformer encoder with a full-width prefix and a prefix-sliceable
//! adaptive suffix.
//!
//! Layers `0..K` always run at `d_model`. Layers `K..L` run at width
//! `r * d_model` for a configured reduction factor `r`, reading only the
//! leading block of every weight matrix, the leading entries of every bias
//! and LayerNorm vector, and therefore only the first `r * n_heads` heads
//! (each head owns a contiguous column block of the Q/K/V projections).
//! A parameter-free pooler truncates the layer-`K` state to the leading
//! `r * d_model` features; an unpooler maps the narrow state back to
//! `d_model` using the leading `r * d_model` rows of one shared matrix, and
//! a single classifier reads the first (CLS) row.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CLS_ID;
use crate::error::{invalid, Error, Result};
use crate::numerics::{AttentionLayout, Bindings, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Total transformer layers `L`.
    pub num_layers: usize,
    /// Full-width layers `K` before the router.
    pub num_nonadaptive: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    /// Longest accepted sequence, counting the prepended CLS token.
    pub max_seq_len: usize,
    pub num_classes: usize,
    /// Strictly ascending, ending at 1.0.
    pub reduction_factors: Vec<f64>,
    /// Hidden width of the router MLP.
    pub router_hidden: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_nonadaptive: 2,
            d_model: 64,
            num_heads: 4,
            d_ffn: 256,
            vocab_size: 32,
            max_seq_len: 32,
            num_classes: 2,
            reduction_factors: vec![0.25, 1.0],
            router_hidden: 128,
            layer_norm_eps: 1e-5,
        }
    }
}

/// `r * n` when that is a positive integer.
fn scaled(r: f64, n: usize) -> Option<usize> {
    let x = r * n as f64;
    let k = x.round();
    ((x - k).abs() < 1e-9 && k >= 1.0).then_some(k as usize)
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers < 2 {
            return fail(format!("num_layers must be >= 2, got {}", self.num_layers));
        }
        if self.num_nonadaptive == 0 || self.num_nonadaptive >= self.num_layers {
            return fail(format!(
                "num_nonadaptive must be in 1..{}, got {}",
                self.num_layers, self.num_nonadaptive
            ));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.d_ffn == 0 || self.router_hidden == 0 {
            return fail("d_ffn and router_hidden must be positive".into());
        }
        if self.vocab_size <= CLS_ID {
            return fail(format!("vocab_size {} leaves no room for tokens", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must leave room for CLS plus one token".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2".into());
        }
        let rs = &self.reduction_factors;
        if rs.is_empty() || rs.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("reduction factors must be strictly ascending: {rs:?}"));
        }
        if *rs.last().unwrap() != 1.0 {
            return fail(format!("largest reduction factor must be 1.0: {rs:?}"));
        }
        for &r in rs {
            if !(r > 0.0 && r <= 1.0) {
                return fail(format!("reduction factor {r} outside (0, 1]"));
            }
            for (what, n) in [
                ("d_model", self.d_model),
                ("num_heads", self.num_heads),
                ("d_ffn", self.d_ffn),
            ] {
                if scaled(r, n).is_none() {
                    return fail(format!("{r} * {what} ({n}) is not a positive integer"));
                }
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn num_levels(&self) -> usize {
        self.reduction_factors.len()
    }

    /// Position of `r` in the reduction set.
    pub fn level_of(&self, r: f64) -> Result<usize> {
        self.reduction_factors
            .iter()
            .position(|&x| (x - r).abs() < 1e-12)
            .ok_or_else(|| invalid(format!("reduction factor {r} not in {:?}", self.reduction_factors)))
    }

    /// Model width `r * d_model` at factor `r`.
    pub fn width(&self, r: f64) -> Result<usize> {
        self.level_of(r)?;
        Ok(scaled(r, self.d_model).expect("validated"))
    }

    pub fn heads_at(&self, r: f64) -> Result<usize> {
        self.level_of(r)?;
        Ok(scaled(r, self.num_heads).expect("validated"))
    }

    pub fn ffn_width(&self, r: f64) -> Result<usize> {
        self.level_of(r)?;
        Ok(scaled(r, self.d_ffn).expect("validated"))
    }

    pub fn full_factor(&self) -> f64 {
        *self.reduction_factors.last().expect("validated")
    }
}

/// Parameter ids of one transformer layer.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub attn_norm_g: ParamId,
    pub attn_norm_b: ParamId,
    pub ffn_in_w: ParamId,
    pub ffn_in_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
    pub ffn_norm_g: ParamId,
    pub ffn_norm_b: ParamId,
}

impl LayerParams {
    pub fn all(&self) -> [ParamId; 16] {
        [
            self.query_w,
            self.query_b,
            self.key_w,
            self.key_b,
            self.value_w,
            self.value_b,
            self.out_w,
            self.out_b,
            self.attn_norm_g,
            self.attn_norm_b,
            self.ffn_in_w,
            self.ffn_in_b,
            self.ffn_out_w,
            self.ffn_out_b,
            self.ffn_norm_g,
            self.ffn_norm_b,
        ]
    }
}

/// A batch of CLS-prefixed sequences stacked row-wise, each padded to
/// `seq_len` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    ids: Vec<usize>,
    seq_len: usize,
    lengths: Vec<usize>,
}

impl SeqBatch {
    /// Prepends CLS to every sequence and pads to the longest one, or to
    /// `pad_to` when given.
    pub fn new(sequences: &[&[usize]], pad_to: Option<usize>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(invalid("empty batch"));
        }
        if sequences.iter().any(|s| s.is_empty()) {
            return Err(invalid("empty sequence"));
        }
        let longest = sequences.iter().map(|s| s.len() + 1).max().unwrap();
        let seq_len = match pad_to {
            Some(p) if p < longest => {
                return Err(invalid(format!("cannot pad length {longest} to {p}")))
            }
            Some(p) => p,
            None => longest,
        };
        let mut ids = Vec::with_capacity(seq_len * sequences.len());
        let mut lengths = Vec::with_capacity(sequences.len());
        for s in sequences {
            ids.push(CLS_ID);
            ids.extend_from_slice(s);
            ids.resize(ids.len() + seq_len - s.len() - 1, crate::data::PAD_ID);
            lengths.push(s.len() + 1);
        }
        Ok(Self {
            ids,
            seq_len,
            lengths,
        })
    }

    pub fn single(tokens: &[usize]) -> Result<Self> {
        Self::new(&[tokens], None)
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Stacked row index of every sequence's CLS position.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch_size()).map(|i| i * self.seq_len).collect()
    }

    fn layout(&self, head_dim: usize) -> AttentionLayout {
        AttentionLayout {
            segment_len: self.seq_len,
            valid_lens: self.lengths.clone(),
            head_dim,
        }
    }
}

/// Parameter layout and forward computation of the encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerParams>,
    pub unpool_w: ParamId,
    pub unpool_b: ParamId,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

fn linear_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

impl Encoder {
    /// Registers freshly initialised parameters in `store`.
    pub fn new<R: Rng + ?Sized>(
        config: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ffn;
        let token_embedding =
            store.insert("embed.token", Tensor::randn(&[config.vocab_size, d], 1.0, rng))?;
        let position_embedding =
            store.insert("embed.position", Tensor::randn(&[config.max_seq_len, d], 1.0, rng))?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let mut add = |suffix: &str, t: Tensor| store.insert(format!("layer.{i}.{suffix}"), t);
            layers.push(LayerParams {
                query_w: add("attn.query.weight", linear_init(d, d, rng))?,
                query_b: add("attn.query.bias", Tensor::zeros(&[d]))?,
                key_w: add("attn.key.weight", linear_init(d, d, rng))?,
                key_b: add("attn.key.bias", Tensor::zeros(&[d]))?,
                value_w: add("attn.value.weight", linear_init(d, d, rng))?,
                value_b: add("attn.value.bias", Tensor::zeros(&[d]))?,
                out_w: add("attn.out.weight", linear_init(d, d, rng))?,
                out_b: add("attn.out.bias", Tensor::zeros(&[d]))?,
                attn_norm_g: add("attn.norm.gamma", Tensor::full(&[d], 1.0))?,
                attn_norm_b: add("attn.norm.beta", Tensor::zeros(&[d]))?,
                ffn_in_w: add("ffn.in.weight", linear_init(d, f, rng))?,
                ffn_in_b: add("ffn.in.bias", Tensor::zeros(&[f]))?,
                ffn_out_w: add("ffn.out.weight", linear_init(f, d, rng))?,
                ffn_out_b: add("ffn.out.bias", Tensor::zeros(&[d]))?,
                ffn_norm_g: add("ffn.norm.gamma", Tensor::full(&[d], 1.0))?,
                ffn_norm_b: add("ffn.norm.beta", Tensor::zeros(&[d]))?,
            });
        }
        let unpool_w = store.insert("unpool.weight", linear_init(d, d, rng))?;
        let unpool_b = store.insert("unpool.bias", Tensor::zeros(&[d]))?;
        let classifier_w =
            store.insert("classifier.weight", linear_init(d, config.num_classes, rng))?;
        let classifier_b = store.insert("classifier.bias", Tensor::zeros(&[config.num_classes]))?;
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            unpool_w,
            unpool_b,
            classifier_w,
            classifier_b,
        })
    }

    /// Re-attaches to parameters already present in `store` (e.g. loaded
    /// from a checkpoint), checking every shape.
    pub fn attach(config: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ffn;
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| invalid(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "attach",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = |s: &str| format!("layer.{i}.{s}");
            layers.push(LayerParams {
                query_w: find(p("attn.query.weight"), &[d, d])?,
                query_b: find(p("attn.query.bias"), &[d])?,
                key_w: find(p("attn.key.weight"), &[d, d])?,
                key_b: find(p("attn.key.bias"), &[d])?,
                value_w: find(p("attn.value.weight"), &[d, d])?,
                value_b: find(p("attn.value.bias"), &[d])?,
                out_w: find(p("attn.out.weight"), &[d, d])?,
                out_b: find(p("attn.out.bias"), &[d])?,
                attn_norm_g: find(p("attn.norm.gamma"), &[d])?,
                attn_norm_b: find(p("attn.norm.beta"), &[d])?,
                ffn_in_w: find(p("ffn.in.weight"), &[d, f])?,
                ffn_in_b: find(p("ffn.in.bias"), &[f])?,
                ffn_out_w: find(p("ffn.out.weight"), &[f, d])?,
                ffn_out_b: find(p("ffn.out.bias"), &[d])?,
                ffn_norm_g: find(p("ffn.norm.gamma"), &[d])?,
                ffn_norm_b: find(p("ffn.norm.beta"), &[d])?,
            });
        }
        Ok(Self {
            config: config.clone(),
            token_embedding: find("embed.token".into(), &[config.vocab_size, d])?,
            position_embedding: find("embed.position".into(), &[config.max_seq_len, d])?,
            layers,
            unpool_w: find("unpool.weight".into(), &[d, d])?,
            unpool_b: find("unpool.bias".into(), &[d])?,
            classifier_w: find("classifier.weight".into(), &[d, config.num_classes])?,
            classifier_b: find("classifier.bias".into(), &[config.num_classes])?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Every parameter id owned by the encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            ids.extend(l.all());
        }
        ids.extend([self.unpool_w, self.unpool_b, self.classifier_w, self.classifier_b]);
        ids
    }

    /// Token plus learned position embeddings, `[batch * seq_len, d_model]`.
    pub fn embed<'t>(&self, b: &Bindings<'t, '_>, batch: &SeqBatch) -> Result<Var<'t>> {
        if batch.seq_len() > self.config.max_seq_len {
            return Err(invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len(),
                self.config.max_seq_len
            )));
        }
        if let Some(bad) = batch.ids().iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let positions: Vec<usize> = (0..batch.batch_size())
            .flat_map(|_| 0..batch.seq_len())
            .collect();
        let tok = b.param(self.token_embedding).select_rows(batch.ids())?;
        let pos = b.param(self.position_embedding).select_rows(&positions)?;
        tok.add(&pos)
    }

    fn check_width(x: &Var<'_>, width: usize, op: &'static str) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != width {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape,
                rhs: vec![0, width],
            });
        }
        Ok(())
    }

    /// Multi-head attention block at factor `r`: first `r * n_heads` heads,
    /// leading `r * d_model` block of `W_O`, residual and width-`r`
    /// LayerNorm.
    pub fn mha_forward<'t>(
        &self,
        b: &Bindings<'t, '_>,
        x: &Var<'t>,
        layer: usize,
        r: f64,
        batch: &SeqBatch,
    ) -> Result<Var<'t>> {
        self.mha_inner(b, x, layer, r, batch).map(|(out, _)| out)
    }

    /// Returns the block output and the concatenated per-head attention
    /// outputs (before `W_O`).
    pub(crate) fn mha_inner<'t>(
        &self,
        b: &Bindings<'t, '_>,
        x: &Var<'t>,
        layer: usize,
        r: f64,
        batch: &SeqBatch,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let w = self.config.width(r)?;
        Self::check_width(x, w, "mha_forward")?;
        let p = self.layer(layer)?;
        let q = linear(b, x, p.query_w, p.query_b, 0..w, 0..w)?;
        let k = linear(b, x, p.key_w, p.key_b, 0..w, 0..w)?;
        let v = linear(b, x, p.value_w, p.value_b, 0..w, 0..w)?;
        let heads = q.attention(&k, &v, &batch.layout(self.config.d_head()))?;
        let o = linear(b, &heads, p.out_w, p.out_b, 0..w, 0..w)?;
        let out = norm(b, &x.add(&o)?, p.attn_norm_g, p.attn_norm_b, w, self.config.layer_norm_eps)?;
        Ok((out, heads))
    }

    /// Feed-forward block at factor `r`.
    pub fn ffn_forward<'t>(
        &self,
        b: &Bindings<'t, '_>,
        x: &Var<'t>,
        layer: usize,
        r: f64,
    ) -> Result<Var<'t>> {
        let w = self.config.width(r)?;
        let f = self.config.ffn_width(r)?;
        Self::check_width(x, w, "ffn_forward")?;
        let p = self.layer(layer)?;
        let hidden = linear(b, x, p.ffn_in_w, p.ffn_in_b, 0..w, 0..f)?.gelu();
        let out = linear(b, &hidden, p.ffn_out_w, p.ffn_out_b, 0..f, 0..w)?;
        norm(b, &x.add(&out)?, p.ffn_norm_g, p.ffn_norm_b, w, self.config.layer_norm_eps)
    }

    fn layer(&self, i: usize) -> Result<&LayerParams> {
        self.layers
            .get(i)
            .ok_or_else(|| invalid(format!("layer {i} out of range")))
    }

    pub fn layer_forward<'t>(
        &self,
        b: &Bindings<'t, '_>,
        x: &Var<'t>,
        layer: usize,
        r: f64,
        batch: &SeqBatch,
    ) -> Result<Var<'t>> {
        let h = self.mha_forward(b, x, layer, r, batch)?;
        self.ffn_forward(b, &h, layer, r)
    }

    /// Output of layer `K` at full width.
    pub fn encode_nonadaptive<'t>(&self, b: &Bindings<'t, '_>, batch: &SeqBatch) -> Result<Var<'t>> {
        let full = self.config.full_factor();
        let mut h = self.embed(b, batch)?;
        for layer in 0..self.config.num_nonadaptive {
            h = self.layer_forward(b, &h, layer, full, batch)?;
        }
        Ok(h)
    }

    /// Keeps the leading `r * d_model` features. Adds no FLOPs.
    pub fn pool<'t>(&self, h: &Var<'t>, r: f64) -> Result<Var<'t>> {
        let w = self.config.width(r)?;
        Self::check_width(h, self.config.d_model, "pool")?;
        if w == self.config.d_model {
            return Ok(*h);
        }
        let rows = h.shape()[0];
        h.slice(0..rows, 0..w)
    }

    /// Runs the adaptive layers `K..L` at factor `r`.
    pub fn encode_adaptive<'t>(
        &self,
        b: &Bindings<'t, '_>,
        pooled: &Var<'t>,
        r: f64,
        batch: &SeqBatch,
    ) -> Result<Var<'t>> {
        let mut h = *pooled;
        for layer in self.config.num_nonadaptive..self.config.num_layers {
            h = self.layer_forward(b, &h, layer, r, batch)?;
        }
        Ok(h)
    }

    /// Affine map from width `r * d_model` back to `d_model`.
    pub fn unpool<'t>(&self, b: &Bindings<'t, '_>, h: &Var<'t>, r: f64) -> Result<Var<'t>> {
        let w = self.config.width(r)?;
        Self::check_width(h, w, "unpool")?;
        linear(b, h, self.unpool_w, self.unpool_b, 0..w, 0..self.config.d_model)
    }

    /// Shared classifier over the CLS rows of a full-width state.
    pub fn classify<'t>(&self, b: &Bindings<'t, '_>, h: &Var<'t>, batch: &SeqBatch) -> Result<Var<'t>> {
        Self::check_width(h, self.config.d_model, "classify")?;
        let cls = h.select_rows(&batch.cls_rows())?;
        let c = self.config.num_classes;
        linear(b, &cls, self.classifier_w, self.classifier_b, 0..self.config.d_model, 0..c)
    }

    /// `classify(unpool(adaptive(pool(nonadaptive(x), r), r), r))`, also
    /// returning the layer-`K` state the router reads.
    pub fn forward_parts<'t>(
        &self,
        b: &Bindings<'t, '_>,
        batch: &SeqBatch,
        r: f64,
    ) -> Result<ForwardParts<'t>> {
        self.config.level_of(r)?;
        let hidden = self.encode_nonadaptive(b, batch)?;
        let logits = self.forward_from_hidden(b, &hidden, batch, r)?;
        Ok(ForwardParts { hidden, logits })
    }

    pub fn forward_from_hidden<'t>(
        &self,
        b: &Bindings<'t, '_>,
        hidden: &Var<'t>,
        batch: &SeqBatch,
        r: f64,
    ) -> Result<Var<'t>> {
        let pooled = self.pool(hidden, r)?;
        let adapted = self.encode_adaptive(b, &pooled, r, batch)?;
        let restored = self.unpool(b, &adapted, r)?;
        self.classify(b, &restored, batch)
    }

    /// Logits `[batch, num_classes]` of the sub-network at factor `r`.
    pub fn forward_adaptive<'t>(&self, b: &Bindings<'t, '_>, batch: &SeqBatch, r: f64) -> Result<Var<'t>> {
        Ok(self.forward_parts(b, batch, r)?.logits)
    }

    /// LayerNorm slices are the leading entries of the single full-width
    /// gamma/beta pair, so there is nothing to initialise per factor. This
    /// checks that every norm parameter is one full-width vector.
    pub fn init_layernorm_slices(&self, store: &ParamStore) -> Result<()> {
        let d = self.config.d_model;
        for l in &self.layers {
            for id in [l.attn_norm_g, l.attn_norm_b, l.ffn_norm_g, l.ffn_norm_b] {
                if store.get(id).shape() != [d] {
                    return Err(invalid(format!(
                        "{} is not a single width-{d} vector",
                        store.name(id)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Index ranges of every parameter read by the sub-network at factor
    /// `r` (and by nothing wider), as `(param, rows, cols)`; vectors use a
    /// single row.
    pub fn prefix_regions(&self, r: f64) -> Result<Vec<(ParamId, Range<usize>, Range<usize>)>> {
        let c = &self.config;
        let d = c.d_model;
        let w = c.width(r)?;
        let f = c.ffn_width(r)?;
        let mut out = vec![
            (self.token_embedding, 0..c.vocab_size, 0..d),
            (self.position_embedding, 0..c.max_seq_len, 0..d),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let (w, f) = if i < c.num_nonadaptive { (d, c.d_ffn) } else { (w, f) };
            out.extend([
                (l.query_w, 0..w, 0..w),
                (l.query_b, 0..1, 0..w),
                (l.key_w, 0..w, 0..w),
                (l.key_b, 0..1, 0..w),
                (l.value_w, 0..w, 0..w),
                (l.value_b, 0..1, 0..w),
                (l.out_w, 0..w, 0..w),
                (l.out_b, 0..1, 0..w),
                (l.attn_norm_g, 0..1, 0..w),
                (l.attn_norm_b, 0..1, 0..w),
                (l.ffn_in_w, 0..w, 0..f),
                (l.ffn_in_b, 0..1, 0..f),
                (l.ffn_out_w, 0..f, 0..w),
                (l.ffn_out_b, 0..1, 0..w),
                (l.ffn_norm_g, 0..1, 0..w),
                (l.ffn_norm_b, 0..1, 0..w),
            ]);
        }
        out.extend([
            (self.unpool_w, 0..w, 0..d),
            (self.unpool_b, 0..1, 0..d),
            (self.classifier_w, 0..d, 0..c.num_classes),
            (self.classifier_b, 0..1, 0..c.num_classes),
        ]);
        Ok(out)
    }
}

pub struct ForwardParts<'t> {
    /// Layer-`K` output, `[batch * seq_len, d_model]`.
    pub hidden: Var<'t>,
    /// `[batch, num_classes]`.
    pub logits: Var<'t>,
}

/// `x * W[rows, cols] + b[cols]`, slicing only when the block is not the
/// whole parameter.
pub(crate) fn linear<'t>(
    b: &Bindings<'t, '_>,
    x: &Var<'t>,
    weight: ParamId,
    bias: ParamId,
    rows: Range<usize>,
    cols: Range<usize>,
) -> Result<Var<'t>> {
    let shape = b.store().get(weight).shape().to_vec();
    let w = b.param(weight);
    let w = if rows == (0..shape[0]) && cols == (0..shape[1]) {
        w
    } else {
        w.slice(rows, cols.clone())?
    };
    x.matmul(&w)?.add_bias(&vector_prefix(b, bias, cols.end)?)
}

fn vector_prefix<'t>(b: &Bindings<'t, '_>, id: ParamId, n: usize) -> Result<Var<'t>> {
    let v = b.param(id);
    if b.store().get(id).len() == n {
        Ok(v)
    } else {
        v.prefix(n)
    }
}

fn norm<'t>(
    b: &Bindings<'t, '_>,
    x: &Var<'t>,
    gamma: ParamId,
    beta: ParamId,
    width: usize,
    eps: f64,
) -> Result<Var<'t>> {
    x.layer_norm(&vector_prefix(b, gamma, width)?, &vector_prefix(b, beta, width)?, eps)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{counter, Tape};

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 3,
            num_nonadaptive: 1,
            d_model: 8,
            num_heads: 2,
            d_ffn: 32,
            vocab_size: 12,
            max_seq_len: 8,
            num_classes: 2,
            reduction_factors: vec![0.5, 1.0],
            router_hidden: 4,
            layer_norm_eps: 1e-5,
        }
    }

    fn build(config: &EncoderConfig, seed: u64) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (enc, store)
    }

    fn logits(enc: &Encoder, store: &ParamStore, tokens: &[usize], r: f64) -> Tensor {
        let tape = Tape::new();
        let b = Bindings::new(&tape, store, false);
        let batch = SeqBatch::single(tokens).unwrap();
        (*enc.forward_adaptive(&b, &batch, r).unwrap().value()).clone()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let mut c = small_config();
        c.num_nonadaptive = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.reduction_factors = vec![0.3, 1.0];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.reduction_factors = vec![0.5];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.d_model = 9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embed_adds_position_term_and_rejects_bad_input() {
        let c = small_config();
        let (enc, store) = build(&c, 1);
        let tape = Tape::new();
        let b = Bindings::new(&tape, &store, false);
        let batch = SeqBatch::single(&[5, 5]).unwrap();
        let x = enc.embed(&b, &batch).unwrap().value();
        assert_ne!(x.row(1), x.row(2));
        assert!(SeqBatch::single(&[]).is_err());
        let long = SeqBatch::single(&[5; 8]).unwrap();
        assert!(enc.embed(&b, &long).is_err());
        let oov = SeqBatch::single(&[12]).unwrap();
        assert!(enc.embed(&b, &oov).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let c = small_config();
        let (enc, store) = build(&c, 2);
        let a = logits(&enc, &store, &[4, 5, 6], 0.5);
        let b = logits(&enc, &store, &[4, 5, 6], 0.5);
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 2]);
    }

    #[test]
    fn half_width_runs_one_of_two_heads() {
        let c = small_config();
        let (enc, store) = build(&c, 3);
        let tape = Tape::new();
        let b = Bindings::new(&tape, &store, false);
        let batch = SeqBatch::single(&[4]).unwrap();
        let x = enc.pool(&enc.embed(&b, &batch).unwrap(), 0.5).unwrap();
        counter::reset();
        enc.mha_forward(&b, &x, 1, 0.5, &batch).unwrap();
        // l = 2, one head of width 4: scores + values = 2 * (2 * 2 * 4).
        assert_eq!(counter::snapshot().attention_macs, 32);
        assert_eq!(c.heads_at(0.5).unwrap(), 1);
    }

    #[test]
    fn ffn_half_width_mac_count() {
        let c = small_config();
        let (enc, store) = build(&c, 4);
        let tape = Tape::new();
        let b = Bindings::new(&tape, &store, false);
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        counter::reset();
        enc.ffn_forward(&b, &x, 1, 0.5).unwrap();
        assert_eq!(counter::snapshot().matmul_macs, 256);
        let x = tape.constant(Tensor::zeros(&[2, 8]));
        counter::reset();
        enc.ffn_forward(&b, &x, 1, 1.0).unwrap();
        assert_eq!(counter::snapshot().matmul_macs, 1024);
    }

    #[test]
    fn width_mismatch_rejected() {
        let c = small_config();
        let (enc, store) = build(&c, 5);
        let tape = Tape::new();
        let b = Bindings::new(&tape, &store, false);
        let batch = SeqBatch::single(&[4]).unwrap();
        let x = tape.constant(Tensor::zeros(&[2, 8]));
        assert!(enc.mha_forward(&b, &x, 1, 0.5, &batch).is_err());
        assert!(enc.ffn_forward(&b, &x, 1, 0.5).is_err());
        assert!(enc.unpool(&b, &x, 0.5).is_err());
    }

    #[test]
    fn pool_truncates_and_keeps_length() {
        let c = EncoderConfig {
            d_model: 64,
            num_heads: 4,
            d_ffn: 128,
            reduction_factors: vec![0.25, 1.0],
            ..small_config()
        };
        let (enc, store) = build(&c, 6);
        let tape = Tape::new();
        let b = Bindings::new(&tape, &store, false);
        let batch = SeqBatch::single(&[4, 5, 6]).unwrap();
        let h = enc.embed(&b, &batch).unwrap();
        assert_eq!(enc.pool(&h, 1.0).unwrap().id(), h.id());
        let p = enc.pool(&h, 0.25).unwrap().value();
        assert_eq!(p.shape(), &[4, 16]);
        let hv = h.value();
        for row in 0..4 {
            assert_eq!(p.row(row), &hv.row(row)[..16]);
        }
    }

    #[test]
    fn unpool_outputs_full_width_and_bias_on_zero_input() {
        let c = small_config();
        let (enc, mut store) = build(&c, 7);
        store.get_mut(enc.unpool_b).data_mut().copy_from_slice(&[1., 2., 3., 4., 5., 6., 7., 8.]);
        let tape = Tape::new();
        let b = Bindings::new(&tape, &store, false);
        for (r, w) in [(0.5, 4), (1.0, 8)] {
            let x = tape.constant(Tensor::zeros(&[3, w]));
            let y = enc.unpool(&b, &x, r).unwrap().value();
            assert_eq!(y.shape(), &[3, 8]);
            assert_eq!(y.row(2), &[1., 2., 3., 4., 5., 6., 7., 8.]);
        }
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let c = small_config();
        let (enc, mut store) = build(&c, 8);
        store.get_mut(enc.classifier_w).data_mut().fill(0.0);
        let l = logits(&enc, &store, &[4, 5], 1.0);
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_slices_are_shared() {
        let c = small_config();
        let (enc, store) = build(&c, 9);
        enc.init_layernorm_slices(&store).unwrap();
        let mut wider = c.clone();
        wider.reduction_factors = vec![0.5, 0.75, 1.0];
        wider.d_model = 8;
        wider.num_heads = 4;
        wider.d_ffn = 32;
        // 0.75 * 4 heads = 3, 0.75 * 8 = 6, 0.75 * 32 = 24.
        wider.validate().unwrap();
        let (_, store2) = build(&EncoderConfig { num_heads: 4, ..c.clone() }, 9);
        let (_, store3) = build(&wider, 9);
        assert_eq!(store2.num_scalars(), store3.num_scalars());
    }
}

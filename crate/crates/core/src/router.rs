//! Hardness predictor placed after layer `K`.
//!
//! A two-layer MLP (`d_model -> router_hidden`, GeLU, `-> M`) reads the
//! full-width CLS row of the layer-`K` state and emits one logit per
//! reduction factor. Training treats the logits as `M` independent sigmoid
//! outputs; inference takes the argmax.

use rand::Rng;

use crate::encoder::{linear, EncoderConfig};
use crate::error::{invalid, Error, Result};
use crate::hardness::HardnessLabel;
use crate::numerics::{Bindings, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct RouterHead {
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    d_model: usize,
    hidden: usize,
    levels: usize,
}

impl RouterHead {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let (d, h, m) = (config.d_model, config.router_hidden, config.num_levels());
        let scale = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            hidden_w: store.insert("router.hidden.weight", Tensor::randn(&[d, h], scale(d), rng))?,
            hidden_b: store.insert("router.hidden.bias", Tensor::zeros(&[h]))?,
            out_w: store.insert("router.out.weight", Tensor::randn(&[h, m], scale(h), rng))?,
            out_b: store.insert("router.out.bias", Tensor::zeros(&[m]))?,
            d_model: d,
            hidden: h,
            levels: m,
        })
    }

    pub fn attach(config: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        let (d, h, m) = (config.d_model, config.router_hidden, config.num_levels());
        let find = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(name)
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
        Ok(Self {
            hidden_w: find("router.hidden.weight", &[d, h])?,
            hidden_b: find("router.hidden.bias", &[h])?,
            out_w: find("router.out.weight", &[h, m])?,
            out_b: find("router.out.bias", &[m])?,
            d_model: d,
            hidden: h,
            levels: m,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.hidden_w, self.hidden_b, self.out_w, self.out_b]
    }

    pub fn num_params(&self) -> usize {
        self.d_model * self.hidden + self.hidden + self.hidden * self.levels + self.levels
    }

    /// Logits `[n, M]` for `n` CLS rows of width `d_model`.
    pub fn forward<'t>(&self, b: &Bindings<'t, '_>, cls: &Var<'t>) -> Result<Var<'t>> {
        let shape = cls.shape();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "router_forward",
                lhs: shape,
                rhs: vec![0, self.d_model],
            });
        }
        let h = linear(b, cls, self.hidden_w, self.hidden_b, 0..self.d_model, 0..self.hidden)?.gelu();
        linear(b, &h, self.out_w, self.out_b, 0..self.hidden, 0..self.levels)
    }
}

/// Mean sigmoid BCE over the samples whose label has at least one bit set.
/// When every label is all-zero the loss is a constant zero that carries no
/// gradient.
pub fn router_loss<'t>(logits: &Var<'t>, labels: &[HardnessLabel]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(invalid(format!(
            "router logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let m = shape[1];
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_all_zero()).collect();
    if keep.is_empty() {
        return Ok(logits.tape().constant(Tensor::scalar(0.0)));
    }
    let mut targets = Vec::with_capacity(keep.len() * m);
    for &i in &keep {
        if labels[i].len() != m {
            return Err(invalid(format!("label of length {} for {m} router outputs", labels[i].len())));
        }
        targets.extend(labels[i].as_targets());
    }
    let targets = Tensor::new(vec![keep.len(), m], targets)?;
    let kept = if keep.len() == labels.len() {
        *logits
    } else {
        logits.select_rows(&keep)?
    };
    kept.binary_cross_entropy(&targets)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn route_index(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Reduction factor picked by the router logits.
pub fn route(logits: &[f64], factors: &[f64]) -> Result<f64> {
    if logits.len() != factors.len() || logits.is_empty() {
        return Err(invalid(format!(
            "{} router logits for {} reduction factors",
            logits.len(),
            factors.len()
        )));
    }
    Ok(factors[route_index(logits)])
}

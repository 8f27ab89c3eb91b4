//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! Every layer in the encoder and router is assembled from the primitives on
//! [`Var`]. A [`Tape`] records each primitive as it runs; [`Tape::backward`]
//! replays the records in reverse and leaves gradients on every leaf that
//! asked for one.
//!
//! All arithmetic is 64-bit. The matmul and attention primitives report
//! their multiply-accumulate counts to [`counter`], which the FLOPs tests use
//! as an independent check on the static formulas in [`crate::flops`].

pub mod counter;
mod params;
mod tape;
mod tensor;

pub use params::{Bindings, ParamId, ParamStore};
pub use tape::{AttentionLayout, Tape, Var};
pub use tensor::Tensor;

/// Exact-erf GeLU, `0.5 x (1 + erf(x / sqrt 2))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `x * ln x` with the `0 ln 0 = 0` limit.
pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

#[cfg(test)]
mod tests;

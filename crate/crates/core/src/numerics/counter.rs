//! Thread-local operation counters fed by the forward passes of the
//! matmul, attention and bias primitives.
//!
//! Backward passes are not counted.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Multiply-accumulates performed by dense matrix products.
    pub matmul_macs: u64,
    /// Multiply-accumulates performed inside attention (scores and values).
    pub attention_macs: u64,
    /// Scalar additions performed by bias broadcasts.
    pub bias_adds: u64,
}

impl OpCounts {
    /// FLOPs under the one-MAC-is-two-FLOPs convention.
    pub fn flops(&self) -> u64 {
        2 * (self.matmul_macs + self.attention_macs) + self.bias_adds
    }
}

thread_local! {
    static COUNTS: Cell<OpCounts> = Cell::new(OpCounts::default());
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| c.get())
}

pub(crate) fn add_matmul(macs: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.matmul_macs += macs;
        c.set(v);
    });
}

pub(crate) fn add_attention(macs: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.attention_macs += macs;
        c.set(v);
    });
}

pub(crate) fn add_bias(adds: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.bias_adds += adds;
        c.set(v);
    });
}

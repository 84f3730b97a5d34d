//! Process-wide record of softmax normalization.
//!
//! Every softmax evaluated by the attention kernels reports `|Σ_k A_k − 1|`
//! here, so a harness can assert the normalization invariant over every
//! forward pass it triggered without threading state through the kernels.

use core::sync::atomic::{AtomicU64, Ordering};

static WORST_BITS: AtomicU64 = AtomicU64::new(0);
static CALLS: AtomicU64 = AtomicU64::new(0);

pub(crate) fn record(error: f64) {
    // Non-negative f64 values order the same as their bit patterns.
    let e = if error.is_nan() {
        f64::INFINITY
    } else {
        error.abs()
    };
    WORST_BITS.fetch_max(e.to_bits(), Ordering::Relaxed);
    CALLS.fetch_add(1, Ordering::Relaxed);
}

/// Largest `|Σ_k A_k − 1|` seen by any softmax since start or [`reset`].
pub fn worst_normalization_error() -> f64 {
    f64::from_bits(WORST_BITS.load(Ordering::Relaxed))
}

/// Number of softmax evaluations recorded.
pub fn softmax_calls() -> u64 {
    CALLS.load(Ordering::Relaxed)
}

pub fn reset() {
    WORST_BITS.store(0, Ordering::Relaxed);
    CALLS.store(0, Ordering::Relaxed);
}

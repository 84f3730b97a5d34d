//! Slice-level kernels shared by the attention modules.
//!
//! Forward kernels charge an [`OpCount`] using the multiply-accumulate
//! convention: every product that is accumulated costs one multiply and one add.

use crate::complexity::OpCount;

/// `out += m · v` for a row-major `rows × cols` matrix.
pub(crate) fn matvec_acc(
    m: &[f64],
    rows: usize,
    cols: usize,
    v: &[f64],
    out: &mut [f64],
    ops: &mut OpCount,
) {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (row, o) in m.chunks_exact(cols).zip(out.iter_mut()) {
        *o += dot(row, v);
    }
    ops.mac((rows * cols) as u64);
}

/// `out += mᵀ · g` for a row-major `rows × cols` matrix.
pub(crate) fn matvec_t_acc(m: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(g.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for (row, &gi) in m.chunks_exact(cols).zip(g) {
        if gi == 0.0 {
            continue;
        }
        axpy(gi, row, out);
    }
}

/// `gm += a · bᵀ`.
pub(crate) fn outer_acc(gm: &mut [f64], a: &[f64], b: &[f64]) {
    debug_assert_eq!(gm.len(), a.len() * b.len());
    for (row, &ai) in gm.chunks_exact_mut(b.len()).zip(a) {
        if ai == 0.0 {
            continue;
        }
        axpy(ai, b, row);
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax: the maximum logit is subtracted before `exp`.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    let err = v.iter().sum::<f64>() - 1.0;
    crate::monitor::record(err);
    debug_assert!(
        !sum.is_finite() || err.abs() <= 1e-12,
        "softmax lost normalization"
    );
}

/// Gradient of the logits given softmax output `a` and its upstream `ga`.
pub(crate) fn softmax_backward(a: &[f64], ga: &[f64], out: &mut [f64]) {
    let inner = dot(a, ga);
    for ((o, &ai), &gi) in out.iter_mut().zip(a).zip(ga) {
        *o = ai * (gi - inner);
    }
}

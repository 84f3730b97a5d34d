//! Named flat views over learnable parameters.
//!
//! Gradients are returned in the same struct type as the parameters they
//! belong to, so a single [`ParamSet`] implementation serves both the
//! optimizer and the finite-difference oracle.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// A collection of named parameter groups, each a flat `f64` slice.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

/// `prefix.name`, or `name` when the prefix is empty.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// Owned copy of every group, in visiting order.
pub fn collect<P: ParamSet + ?Sized>(p: &P) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, v| {
        out.push((String::from(name), v.to_vec()))
    });
    out
}

pub fn count<P: ParamSet + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, v| n += v.len());
    n
}

/// Copy of `p` with every group set to zero, used as a gradient accumulator.
pub fn zeros_like<P: ParamSet + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, v| v.fill(0.0));
    z
}

/// `target += alpha · source`, group by group. Both sets must have the same layout.
pub fn axpy<P: ParamSet + ?Sized, Q: ParamSet + ?Sized>(alpha: f64, source: &Q, target: &mut P) {
    let src = collect(source);
    let mut groups = src.iter();
    target.visit_mut("", &mut |name, v| {
        let (src_name, s) = groups.next().expect("parameter layouts differ");
        debug_assert_eq!(src_name, name);
        for (t, x) in v.iter_mut().zip(s) {
            *t += alpha * x;
        }
    });
}

/// One plain gradient-descent step.
pub fn sgd_step<P: ParamSet + ?Sized, Q: ParamSet + ?Sized>(
    params: &mut P,
    grads: &Q,
    learning_rate: f64,
) {
    axpy(-learning_rate, grads, params);
}

/// Largest absolute value over all groups.
pub fn max_abs<P: ParamSet + ?Sized>(p: &P) -> f64 {
    let mut m: f64 = 0.0;
    p.visit("", &mut |_, v| {
        for x in v {
            m = m.max(x.abs());
        }
    });
    m
}

impl ParamSet for Vec<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(prefix, self)
    }
}

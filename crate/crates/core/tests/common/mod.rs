//! Literal, deliberately naive transcriptions of the attention formulas. They
//! share no code with the crate beyond the parameter containers.
#![allow(dead_code)]

use stdeform_core::deform::StDeformParams;
use stdeform_core::dense::DenseAttnParams;
use stdeform_core::interp::Point3;
use stdeform_core::{ClipFeatureMap, GridDims};

pub fn row(data: &[f64], cols: usize, r: usize) -> &[f64] {
    &data[r * cols..(r + 1) * cols]
}

pub fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `rows × cols` block of `data` starting at row `r0`, applied to `v`.
pub fn apply(data: &[f64], cols: usize, r0: usize, rows: usize, v: &[f64]) -> Vec<f64> {
    (r0..r0 + rows)
        .map(|r| dotp(row(data, cols, r), v))
        .collect()
}

pub fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `W_m · agg` summed over heads, with `output` stored `[M, C, C_v]`.
fn combine_heads(output: &[f64], c: usize, cv: usize, aggs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for (m, agg) in aggs.iter().enumerate() {
        let wm = &output[m * c * cv..(m + 1) * c * cv];
        for (i, o) in out.iter_mut().enumerate() {
            *o += dotp(row(wm, cv, i), agg);
        }
    }
    out
}

/// Dense multi-head attention evaluated term by term. Returns the output and
/// the per-head weights.
pub fn dense_oracle(
    p: &DenseAttnParams,
    z: &[f64],
    keys: &[Vec<f64>],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (m_heads, c) = (p.heads(), p.model_dim());
    let cv = c / m_heads;
    let mut aggs = Vec::new();
    let mut weights = Vec::new();
    for m in 0..m_heads {
        let q = apply(p.query.data(), c, m * cv, cv, z);
        let logits: Vec<f64> = keys
            .iter()
            .map(|x| dotp(&q, &apply(p.key.data(), c, m * cv, cv, x)) / (cv as f64).sqrt())
            .collect();
        let a = softmax(&logits);
        let mut agg = vec![0.0; cv];
        for (x, w) in keys.iter().zip(&a) {
            for (g, v) in agg.iter_mut().zip(apply(p.value.data(), c, m * cv, cv, x)) {
                *g += w * v;
            }
        }
        aggs.push(agg);
        weights.push(a);
    }
    (combine_heads(p.output.data(), c, cv, &aggs), weights)
}

/// Trilinear sample with zero padding, written corner by corner.
pub fn trilinear(map: &ClipFeatureMap, p: Point3) -> Vec<f64> {
    let d = map.dims();
    let c = map.channels();
    let (x0, y0, t0) = (p.x.floor(), p.y.floor(), p.t.floor());
    let mut out = vec![0.0; c];
    for dt in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let (cx, cy, ct) = (x0 + dx as f64, y0 + dy as f64, t0 + dt as f64);
                let w =
                    (1.0 - (p.x - cx).abs()) * (1.0 - (p.y - cy).abs()) * (1.0 - (p.t - ct).abs());
                let inside = cx >= 0.0
                    && cy >= 0.0
                    && ct >= 0.0
                    && (cx as usize) < d.w
                    && (cy as usize) < d.h
                    && (ct as usize) < d.t;
                if inside {
                    let idx = ((ct as usize * d.h + cy as usize) * d.w + cx as usize) * c;
                    for (o, v) in out.iter_mut().zip(&map.data()[idx..idx + c]) {
                        *o += w * v;
                    }
                }
            }
        }
    }
    out
}

/// Deformable attention evaluated term by term: sample the raw features at
/// every predicted point, then project.
pub fn deform_oracle(
    p: &StDeformParams,
    z: &[f64],
    pq: Point3,
    map: &ClipFeatureMap,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (m_heads, c, k_pts) = (p.heads(), p.model_dim(), p.points());
    let cv = c / m_heads;
    let mut aggs = Vec::new();
    let mut weights = Vec::new();
    for m in 0..m_heads {
        let logits: Vec<f64> = (0..k_pts)
            .map(|k| {
                dotp(row(p.attn_weight.data(), c, m * k_pts + k), z)
                    + p.attn_bias.data()[m * k_pts + k]
            })
            .collect();
        let a = softmax(&logits);
        let mut agg = vec![0.0; cv];
        for (k, w) in a.iter().enumerate() {
            let off = |axis: usize| {
                let r = (m * k_pts + k) * 3 + axis;
                dotp(row(p.offset_weight.data(), c, r), z) + p.offset_bias.data()[r]
            };
            let s = trilinear(
                map,
                Point3::new(pq.x + off(0), pq.y + off(1), pq.t + off(2)),
            );
            for (g, v) in agg.iter_mut().zip(apply(p.value.data(), c, m * cv, cv, &s)) {
                *g += w * v;
            }
        }
        aggs.push(agg);
        weights.push(a);
    }
    (combine_heads(p.output.data(), c, cv, &aggs), weights)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn cells_of(map: &ClipFeatureMap) -> Vec<Vec<f64>> {
    map.cells().map(|c| c.to_vec()).collect()
}

pub fn all_grids(max_t: usize, max_h: usize, max_w: usize) -> Vec<GridDims> {
    let mut v = Vec::new();
    for t in 1..=max_t {
        for h in 1..=max_h {
            for w in 1..=max_w {
                v.push(GridDims::new(t, h, w));
            }
        }
    }
    v
}

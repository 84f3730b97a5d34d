//! Spatio-temporal deformable attention.
//!
//! Each query attends to `K` sampled points per head instead of every cell:
//!
//! ```text
//! out = Σ_m W_m Σ_k A_mqk · W'_m x(p_q + Δp_mqk)
//! ```
//!
//! The offsets `Δp_mqk` and the logits of `A_mqk` are linear projections of
//! the query feature `z_q`; `A` is normalized per head by a softmax. Offsets are
//! in absolute grid units and `x(·)` is the zero-padded trilinear sampler of
//! [`crate::interp`].
//!
//! Since sampling is linear, the value projection `W'_m` is applied once to
//! the whole map and the projected map is sampled. This is the amortized form
//! that the op counts in [`crate::complexity`] describe.

use alloc::vec;
use alloc::vec::Vec;

use crate::complexity::OpCount;
use crate::dense::{attn_logits, check_heads, DenseAttnParams};
use crate::error::{Error, Result};
use crate::interp::{corner_weights, sample_strided, sample_strided_backward, Point3};
use crate::linalg::{
    axpy, dot, matvec_acc, matvec_t_acc, outer_acc, softmax_backward, softmax_in_place,
};
use crate::params::{join, ParamSet};
use crate::tensor::{ClipFeatureMap, GridDims, SeededRng, Tensor};

/// How the offset head is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum InitMode {
    /// Zero offset weights, biases on a fixed 3-d star ([`star_offsets`]).
    #[default]
    Pattern,
    /// Offset weights from `N(0, 0.01²)`, biases on the star pattern.
    Random,
}

/// Learnable weights of one deformable attention module.
///
/// Row layouts: `value` is `[M·C_v, C]` (the `W'_m` stacked by head), `output`
/// is `[M, C, C_v]`, `offset_weight` is `[3MK, C]` with row `(m·K + k)·3 + axis`
/// and axis order `(x, y, t)`, `attn_weight` is `[MK, C]` with row `m·K + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StDeformParams {
    heads: usize,
    model_dim: usize,
    points: usize,
    pub value: Tensor,
    pub output: Tensor,
    pub offset_weight: Tensor,
    pub offset_bias: Tensor,
    pub attn_weight: Tensor,
    pub attn_bias: Tensor,
}

impl StDeformParams {
    pub fn zeros(heads: usize, model_dim: usize, points: usize) -> Result<Self> {
        check_heads(heads, model_dim)?;
        if points == 0 {
            return Err(Error::param(
                "deformable attention needs at least one sampling point",
            ));
        }
        let (c, mk) = (model_dim, heads * points);
        Ok(StDeformParams {
            heads,
            model_dim,
            points,
            value: Tensor::zeros(&[c, c])?,
            output: Tensor::zeros(&[heads, c, c / heads])?,
            offset_weight: Tensor::zeros(&[3 * mk, c])?,
            offset_bias: Tensor::zeros(&[3 * mk])?,
            attn_weight: Tensor::zeros(&[mk, c])?,
            attn_bias: Tensor::zeros(&[mk])?,
        })
    }

    /// Default initialization: projections from `N(0, 1/C)`, offsets on the
    /// star pattern, zero weight head (uniform `1/K`).
    pub fn init(
        heads: usize,
        model_dim: usize,
        points: usize,
        mode: InitMode,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut p = Self::zeros(heads, model_dim, points)?;
        let std = 1.0 / libm::sqrt(model_dim as f64);
        for x in p.value.data_mut().iter_mut().chain(p.output.data_mut()) {
            *x = std * rng.normal();
        }
        for (chunk, off) in p
            .offset_bias
            .data_mut()
            .chunks_exact_mut(3)
            .zip(star_offsets(heads, points))
        {
            chunk.copy_from_slice(&off.to_array());
        }
        if mode == InitMode::Random {
            for x in p.offset_weight.data_mut() {
                *x = 0.01 * rng.normal();
            }
        }
        Ok(p)
    }

    /// Every group drawn from `N(0, std²)`, used by gradient checks.
    pub fn random(
        heads: usize,
        model_dim: usize,
        points: usize,
        rng: &mut SeededRng,
        std: f64,
    ) -> Result<Self> {
        let mut p = Self::zeros(heads, model_dim, points)?;
        p.visit_mut("", &mut |_, v| {
            for x in v.iter_mut() {
                *x = std * rng.normal();
            }
        });
        Ok(p)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Sampling points per head, `K`.
    pub fn points(&self) -> usize {
        self.points
    }

    fn output_head(&self, m: usize) -> &[f64] {
        let n = self.model_dim * self.head_dim();
        &self.output.data()[m * n..(m + 1) * n]
    }
}

impl ParamSet for StDeformParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "value"), self.value.data());
        f(&join(prefix, "output"), self.output.data());
        f(&join(prefix, "offset_weight"), self.offset_weight.data());
        f(&join(prefix, "offset_bias"), self.offset_bias.data());
        f(&join(prefix, "attn_weight"), self.attn_weight.data());
        f(&join(prefix, "attn_bias"), self.attn_bias.data());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "value"), self.value.data_mut());
        f(&join(prefix, "output"), self.output.data_mut());
        f(
            &join(prefix, "offset_weight"),
            self.offset_weight.data_mut(),
        );
        f(&join(prefix, "offset_bias"), self.offset_bias.data_mut());
        f(&join(prefix, "attn_weight"), self.attn_weight.data_mut());
        f(&join(prefix, "attn_bias"), self.attn_bias.data_mut());
    }
}

const STAR_DIRECTIONS: [[f64; 3]; 14] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
    [1.0, 1.0, 1.0],
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
];
const STAR_RADII: [f64; 4] = [1.0, 2.0, 1.5, 0.5];

/// Deterministic initial offsets: the 6 axis directions followed by the 8
/// diagonals, cycled per head, with Chebyshev radius from `{1, 2, 1.5, 0.5}`
/// growing every 14 points. Returned flat, index `m·K + k`.
pub fn star_offsets(heads: usize, points: usize) -> Vec<Point3> {
    let mut out = Vec::with_capacity(heads * points);
    for m in 0..heads {
        for k in 0..points {
            let d = STAR_DIRECTIONS[(k + 2 * m) % STAR_DIRECTIONS.len()];
            let r = STAR_RADII[(k / STAR_DIRECTIONS.len()) % STAR_RADII.len()];
            out.push(Point3::new(r * d[0], r * d[1], r * d[2]));
        }
    }
    out
}

/// Offsets and normalized weights used by one query, index `m·K + k`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplingPlan {
    pub heads: usize,
    pub points: usize,
    pub offsets: Vec<Point3>,
    pub weights: Vec<f64>,
}

impl SamplingPlan {
    pub fn offset(&self, m: usize, k: usize) -> Point3 {
        self.offsets[m * self.points + k]
    }

    pub fn weight(&self, m: usize, k: usize) -> f64 {
        self.weights[m * self.points + k]
    }

    pub fn head_weights(&self, m: usize) -> &[f64] {
        &self.weights[m * self.points..(m + 1) * self.points]
    }

    /// Largest `|Σ_k A[m][k] − 1|` over heads.
    pub fn normalization_error(&self) -> f64 {
        (0..self.heads)
            .map(|m| (self.head_weights(m).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn check_query(params: &StDeformParams, z_q: &[f64]) -> Result<()> {
    if z_q.len() != params.model_dim {
        return Err(Error::dim(&[params.model_dim], &[z_q.len()]));
    }
    Ok(())
}

fn offsets_into(params: &StDeformParams, z_q: &[f64], ops: &mut OpCount) -> Vec<f64> {
    let mut raw = params.offset_bias.data().to_vec();
    let rows = 3 * params.heads * params.points;
    matvec_acc(
        params.offset_weight.data(),
        rows,
        params.model_dim,
        z_q,
        &mut raw,
        ops,
    );
    ops.adds += rows as u64;
    raw
}

fn weights_into(params: &StDeformParams, z_q: &[f64], ops: &mut OpCount) -> Vec<f64> {
    let mut a = params.attn_bias.data().to_vec();
    let rows = params.heads * params.points;
    matvec_acc(
        params.attn_weight.data(),
        rows,
        params.model_dim,
        z_q,
        &mut a,
        ops,
    );
    ops.adds += rows as u64;
    for head in a.chunks_exact_mut(params.points) {
        softmax_in_place(head);
    }
    a
}

/// Sampling offsets `Δp_mqk = W_off z_q + b_off`, unclamped, index `m·K + k`.
pub fn predict_offsets(params: &StDeformParams, z_q: &[f64]) -> Result<Vec<Point3>> {
    check_query(params, z_q)?;
    let raw = offsets_into(params, z_q, &mut OpCount::default());
    Ok(raw
        .chunks_exact(3)
        .map(|c| Point3::new(c[0], c[1], c[2]))
        .collect())
}

/// Per-head softmax of `W_A z_q + b_A`, index `m·K + k`.
pub fn predict_weights(params: &StDeformParams, z_q: &[f64]) -> Result<Vec<f64>> {
    check_query(params, z_q)?;
    Ok(weights_into(params, z_q, &mut OpCount::default()))
}

/// `W'_m x` at every cell, laid out like the map (`[cells, M·C_v]`).
fn project_values(params: &StDeformParams, map: &ClipFeatureMap, ops: &mut OpCount) -> Vec<f64> {
    let c = params.model_dim;
    let mut out = vec![0.0; map.num_cells() * c];
    for (x, v) in map.cells().zip(out.chunks_exact_mut(c)) {
        matvec_acc(params.value.data(), c, c, x, v, ops);
    }
    out
}

struct QueryTrace {
    plan: SamplingPlan,
    locations: Vec<Point3>,
    samples: Vec<f64>,
    agg: Vec<f64>,
    out: Vec<f64>,
}

fn forward_query(
    params: &StDeformParams,
    z_q: &[f64],
    p_q: Point3,
    dims: GridDims,
    values: &[f64],
    ops: &mut OpCount,
) -> QueryTrace {
    let (c, heads, k_pts, cv) = (
        params.model_dim,
        params.heads,
        params.points,
        params.head_dim(),
    );
    let raw = offsets_into(params, z_q, ops);
    let weights = weights_into(params, z_q, ops);
    let offsets: Vec<Point3> = raw
        .chunks_exact(3)
        .map(|o| Point3::new(o[0], o[1], o[2]))
        .collect();
    let locations: Vec<Point3> = offsets.iter().map(|&o| p_q + o).collect();
    ops.adds += 3 * (heads * k_pts) as u64;
    let mut samples = vec![0.0; heads * k_pts * cv];
    let mut agg = vec![0.0; c];
    for m in 0..heads {
        for k in 0..k_pts {
            let i = m * k_pts + k;
            let s = &mut samples[i * cv..(i + 1) * cv];
            sample_strided(values, dims, c, m * cv, locations[i], s, ops);
            axpy(weights[i], s, &mut agg[m * cv..(m + 1) * cv]);
        }
    }
    ops.mac((heads * k_pts * cv) as u64);
    let mut out = vec![0.0; c];
    for m in 0..heads {
        matvec_acc(
            params.output_head(m),
            c,
            cv,
            &agg[m * cv..(m + 1) * cv],
            &mut out,
            ops,
        );
    }
    QueryTrace {
        plan: SamplingPlan {
            heads,
            points: k_pts,
            offsets,
            weights,
        },
        locations,
        samples,
        agg,
        out,
    }
}

fn validate<Q: AsRef<[f64]>>(
    params: &StDeformParams,
    queries: &[Q],
    refs: &[Point3],
    map: &ClipFeatureMap,
) -> Result<()> {
    if map.channels() != params.model_dim {
        return Err(Error::dim(&[params.model_dim], &[map.channels()]));
    }
    if queries.len() != refs.len() {
        return Err(Error::dim(&[queries.len()], &[refs.len()]));
    }
    for z in queries {
        check_query(params, z.as_ref())?;
    }
    Ok(())
}

/// Outputs and sampling plans of a batch of queries over one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformBatch {
    pub outputs: Vec<Vec<f64>>,
    pub plans: Vec<SamplingPlan>,
}

/// Deformable attention for many queries over one map. The value projection
/// is applied once to every cell of `map`; `ops` is charged accordingly.
pub fn forward_batch<Q: AsRef<[f64]>>(
    params: &StDeformParams,
    queries: &[Q],
    refs: &[Point3],
    map: &ClipFeatureMap,
    ops: &mut OpCount,
) -> Result<DeformBatch> {
    validate(params, queries, refs, map)?;
    let values = project_values(params, map, ops);
    let mut batch = DeformBatch {
        outputs: Vec::with_capacity(queries.len()),
        plans: Vec::with_capacity(queries.len()),
    };
    for (z, &p) in queries.iter().zip(refs) {
        let trace = forward_query(params, z.as_ref(), p, map.dims(), &values, ops);
        batch.outputs.push(trace.out);
        batch.plans.push(trace.plan);
    }
    Ok(batch)
}

/// Gradients of `Σ_q upstream_q · out_q` for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformGrads {
    pub queries: Vec<Vec<f64>>,
    pub refs: Vec<Point3>,
    /// Dense gradient with respect to the feature map.
    pub map: ClipFeatureMap,
    pub params: StDeformParams,
    /// Cells whose gradient may be nonzero, sorted and deduplicated.
    pub touched: Vec<usize>,
}

pub fn backward_batch<Q: AsRef<[f64]>, U: AsRef<[f64]>>(
    params: &StDeformParams,
    queries: &[Q],
    refs: &[Point3],
    map: &ClipFeatureMap,
    upstream: &[U],
) -> Result<DeformGrads> {
    validate(params, queries, refs, map)?;
    if upstream.len() != queries.len() {
        return Err(Error::dim(&[queries.len()], &[upstream.len()]));
    }
    let (c, heads, k_pts, cv) = (
        params.model_dim,
        params.heads,
        params.points,
        params.head_dim(),
    );
    let dims = map.dims();
    let mut scratch = OpCount::default();
    let values = project_values(params, map, &mut scratch);
    let mut g_values = vec![0.0; values.len()];
    let mut touched = Vec::new();
    let mut grads = DeformGrads {
        queries: Vec::with_capacity(queries.len()),
        refs: Vec::with_capacity(queries.len()),
        map: ClipFeatureMap::zeros(dims, c)?,
        params: StDeformParams::zeros(heads, c, k_pts)?,
        touched: Vec::new(),
    };
    for ((z, &p_q), g) in queries.iter().zip(refs).zip(upstream) {
        let (z, g) = (z.as_ref(), g.as_ref());
        if g.len() != c {
            return Err(Error::dim(&[c], &[g.len()]));
        }
        let trace = forward_query(params, z, p_q, dims, &values, &mut scratch);
        let mut g_agg = vec![0.0; c];
        for m in 0..heads {
            let gw = &mut grads.params.output.data_mut()[m * c * cv..(m + 1) * c * cv];
            outer_acc(gw, g, &trace.agg[m * cv..(m + 1) * cv]);
            matvec_t_acc(
                params.output_head(m),
                c,
                cv,
                g,
                &mut g_agg[m * cv..(m + 1) * cv],
            );
        }
        let mut g_weights = vec![0.0; heads * k_pts];
        let mut g_offsets = vec![0.0; 3 * heads * k_pts];
        let mut g_ref = [0.0; 3];
        let mut g_sample = vec![0.0; cv];
        for m in 0..heads {
            let ga = &g_agg[m * cv..(m + 1) * cv];
            for k in 0..k_pts {
                let i = m * k_pts + k;
                g_weights[i] = dot(ga, &trace.samples[i * cv..(i + 1) * cv]);
                let a = trace.plan.weights[i];
                for (gs, x) in g_sample.iter_mut().zip(ga) {
                    *gs = a * x;
                }
                let gp = sample_strided_backward(
                    &values,
                    dims,
                    c,
                    m * cv,
                    trace.locations[i],
                    &g_sample,
                    &mut g_values,
                    &mut touched,
                );
                let gp = gp.to_array();
                g_offsets[3 * i..3 * i + 3].copy_from_slice(&gp);
                for (r, d) in g_ref.iter_mut().zip(gp) {
                    *r += d;
                }
            }
        }
        let mut g_logits = vec![0.0; heads * k_pts];
        for m in 0..heads {
            let r = m * k_pts..(m + 1) * k_pts;
            softmax_backward(
                &trace.plan.weights[r.clone()],
                &g_weights[r.clone()],
                &mut g_logits[r],
            );
        }
        let mut gz = vec![0.0; c];
        outer_acc(grads.params.attn_weight.data_mut(), &g_logits, z);
        axpy(1.0, &g_logits, grads.params.attn_bias.data_mut());
        matvec_t_acc(
            params.attn_weight.data(),
            heads * k_pts,
            c,
            &g_logits,
            &mut gz,
        );
        outer_acc(grads.params.offset_weight.data_mut(), &g_offsets, z);
        axpy(1.0, &g_offsets, grads.params.offset_bias.data_mut());
        matvec_t_acc(
            params.offset_weight.data(),
            3 * heads * k_pts,
            c,
            &g_offsets,
            &mut gz,
        );
        grads.queries.push(gz);
        grads.refs.push(Point3::from_array(g_ref));
    }
    touched.sort_unstable();
    touched.dedup();
    for &cell in &touched {
        let gv = &g_values[cell * c..(cell + 1) * c];
        let x = map.cell(cell);
        outer_acc(grads.params.value.data_mut(), gv, x);
        matvec_t_acc(params.value.data(), c, c, gv, grads.map.cell_mut(cell));
    }
    grads.touched = touched;
    Ok(grads)
}

/// Result of a single deformable attention query.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformOutput {
    pub output: Vec<f64>,
    pub plan: SamplingPlan,
    /// Distinct in-grid cells read by the sampler, sorted.
    pub cells_read: Vec<usize>,
}

/// Deformable attention of one query `z_q` anchored at `p_q`.
pub fn stdeform_attn(
    params: &StDeformParams,
    z_q: &[f64],
    p_q: Point3,
    map: &ClipFeatureMap,
) -> Result<DeformOutput> {
    let mut batch = forward_batch(params, &[z_q], &[p_q], map, &mut OpCount::default())?;
    let plan = batch.plans.pop().unwrap();
    let mut cells_read: Vec<usize> = plan
        .offsets
        .iter()
        .flat_map(|&o| corner_weights(map.dims(), p_q + o).map(|(cell, _)| cell))
        .collect();
    cells_read.sort_unstable();
    cells_read.dedup();
    Ok(DeformOutput {
        output: batch.outputs.pop().unwrap(),
        plan,
        cells_read,
    })
}

/// Gradients of `upstream · stdeform_attn(...)` for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleQueryGrads {
    pub z_q: Vec<f64>,
    pub p_q: Point3,
    /// `(cell, gradient)` for every touched cell.
    pub map: Vec<(usize, Vec<f64>)>,
    pub params: StDeformParams,
}

pub fn stdeform_attn_backward(
    params: &StDeformParams,
    z_q: &[f64],
    p_q: Point3,
    map: &ClipFeatureMap,
    upstream: &[f64],
) -> Result<SingleQueryGrads> {
    let mut g = backward_batch(params, &[z_q], &[p_q], map, &[upstream])?;
    let sparse = g
        .touched
        .iter()
        .map(|&cell| (cell, g.map.cell(cell).to_vec()))
        .collect();
    Ok(SingleQueryGrads {
        z_q: g.queries.pop().unwrap(),
        p_q: g.refs.pop().unwrap(),
        map: sparse,
        params: g.params,
    })
}

/// Builds deformable parameters with `K = HWT` that reproduce dense attention
/// for `(z_q, keys = every cell of x)`, and evaluates them.
///
/// Head projections `W_m`, `W'_m` are shared with `dense`. The offset head has
/// zero weights and biases `cell_k − p_q`, so the `k`-th point of every head
/// lands on lattice cell `k`. The weight head has zero weights and biases equal
/// to the dense logits, so its softmax reproduces the dense weights.
pub fn dense_equivalence_construct(
    x: &ClipFeatureMap,
    dense: &DenseAttnParams,
    z_q: &[f64],
    p_q: Point3,
    points: usize,
) -> Result<(StDeformParams, DeformOutput)> {
    let dims = x.dims();
    if points != dims.cells() {
        return Err(Error::param(alloc::format!(
            "dense equivalence needs K = HWT = {}, got K = {points}",
            dims.cells()
        )));
    }
    if x.channels() != dense.model_dim() {
        return Err(Error::dim(&[dense.model_dim()], &[x.channels()]));
    }
    let (heads, c) = (dense.heads(), dense.model_dim());
    let mut p = StDeformParams::zeros(heads, c, points)?;
    p.value.data_mut().copy_from_slice(dense.value.data());
    p.output.data_mut().copy_from_slice(dense.output.data());
    for k in 0..points {
        let (t, y, xx) = dims.unflatten(k)?;
        let offset = Point3::at_cell(t, y, xx) - p_q;
        let logits = attn_logits(dense, z_q, x.cell(k))?;
        for m in 0..heads {
            let i = m * points + k;
            p.offset_bias.data_mut()[3 * i..3 * i + 3].copy_from_slice(&offset.to_array());
            p.attn_bias.data_mut()[i] = logits[m];
        }
    }
    let out = stdeform_attn(&p, z_q, p_q, x)?;
    Ok((p, out))
}

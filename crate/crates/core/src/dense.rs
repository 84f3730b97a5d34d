//! Reference multi-head attention.
//!
//! For a query `z_q` and keys `x_k`:
//!
//! ```text
//! out = Σ_m W_m Σ_k A_mqk · W'_m x_k
//! A_mqk = softmax_k( (U_m z_q)·(V_m x_k) / √C_v )
//! ```
//!
//! Positional embeddings are expected to be already added by the caller.

use alloc::vec;
use alloc::vec::Vec;

use crate::complexity::OpCount;
use crate::error::{Error, Result};
use crate::linalg::{
    axpy, dot, matvec_acc, matvec_t_acc, outer_acc, softmax_backward, softmax_in_place,
};
use crate::params::{join, ParamSet};
use crate::tensor::{SeededRng, Tensor};

/// Learnable weights of dense multi-head attention.
///
/// `query`, `key` and `value` stack `U_m`, `V_m` and `W'_m` head by head into
/// `[M·C_v, C]`; `output` stores `W_m` as `[M, C, C_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAttnParams {
    heads: usize,
    model_dim: usize,
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

impl DenseAttnParams {
    pub fn zeros(heads: usize, model_dim: usize) -> Result<Self> {
        check_heads(heads, model_dim)?;
        let c = model_dim;
        Ok(DenseAttnParams {
            heads,
            model_dim,
            query: Tensor::zeros(&[c, c])?,
            key: Tensor::zeros(&[c, c])?,
            value: Tensor::zeros(&[c, c])?,
            output: Tensor::zeros(&[heads, c, c / heads])?,
        })
    }

    /// Every matrix drawn from `N(0, std²)`.
    pub fn random(heads: usize, model_dim: usize, rng: &mut SeededRng, std: f64) -> Result<Self> {
        let mut p = Self::zeros(heads, model_dim)?;
        p.visit_mut("", &mut |_, v| {
            for x in v.iter_mut() {
                *x = std * rng.normal();
            }
        });
        Ok(p)
    }

    /// Builds parameters from per-head matrices `U_m, V_m, W'_m` (`[C_v, C]`)
    /// and `W_m` (`[C, C_v]`).
    pub fn from_heads(
        u: &[Tensor],
        v: &[Tensor],
        w_value: &[Tensor],
        w_out: &[Tensor],
    ) -> Result<Self> {
        let heads = u.len();
        let model_dim = u
            .first()
            .ok_or_else(|| Error::param("at least one head"))?
            .shape()[1];
        let mut p = Self::zeros(heads, model_dim)?;
        let cv = p.head_dim();
        if v.len() != heads || w_value.len() != heads || w_out.len() != heads {
            return Err(Error::param("every matrix list needs one entry per head"));
        }
        for m in 0..heads {
            for (src, dst) in [
                (&u[m], &mut p.query),
                (&v[m], &mut p.key),
                (&w_value[m], &mut p.value),
            ] {
                if src.shape() != [cv, model_dim] {
                    return Err(Error::dim(&[cv, model_dim], src.shape()));
                }
                dst.data_mut()[m * cv * model_dim..(m + 1) * cv * model_dim]
                    .copy_from_slice(src.data());
            }
            if w_out[m].shape() != [model_dim, cv] {
                return Err(Error::dim(&[model_dim, cv], w_out[m].shape()));
            }
            p.output.data_mut()[m * model_dim * cv..(m + 1) * model_dim * cv]
                .copy_from_slice(w_out[m].data());
        }
        Ok(p)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    /// `C_v = C / M`.
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// `W_m` as a row-major `[C, C_v]` slice.
    pub fn output_head(&self, m: usize) -> &[f64] {
        let n = self.model_dim * self.head_dim();
        &self.output.data()[m * n..(m + 1) * n]
    }

    fn scale(&self) -> f64 {
        1.0 / libm::sqrt(self.head_dim() as f64)
    }
}

pub(crate) fn check_heads(heads: usize, model_dim: usize) -> Result<()> {
    if heads == 0 || model_dim == 0 || !model_dim.is_multiple_of(heads) {
        return Err(Error::param(
            "model dimension must be a positive multiple of the head count",
        ));
    }
    Ok(())
}

impl ParamSet for DenseAttnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "query"), self.query.data());
        f(&join(prefix, "key"), self.key.data());
        f(&join(prefix, "value"), self.value.data());
        f(&join(prefix, "output"), self.output.data());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "query"), self.query.data_mut());
        f(&join(prefix, "key"), self.key.data_mut());
        f(&join(prefix, "value"), self.value.data_mut());
        f(&join(prefix, "output"), self.output.data_mut());
    }
}

/// Normalized attention weights `A[m][k]` for one query.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttnWeights {
    heads: usize,
    keys: usize,
    data: Vec<f64>,
}

impl AttnWeights {
    pub fn new(heads: usize, keys: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), heads * keys);
        AttnWeights { heads, keys, data }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn head(&self, m: usize) -> &[f64] {
        &self.data[m * self.keys..(m + 1) * self.keys]
    }

    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.data[m * self.keys + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Largest `|Σ_k A[m][k] − 1|` over heads.
    pub fn normalization_error(&self) -> f64 {
        (0..self.heads)
            .map(|m| (self.head(m).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over heads of `N_k · max_k |A[m][k] − 1/N_k|`.
    pub fn scaled_uniform_deviation(&self) -> f64 {
        let n = self.keys as f64;
        let total: f64 = (0..self.heads)
            .map(|m| {
                n * self
                    .head(m)
                    .iter()
                    .map(|a| (a - 1.0 / n).abs())
                    .fold(0.0, f64::max)
            })
            .sum();
        total / self.heads as f64
    }
}

fn check_vec(v: &[f64], c: usize) -> Result<()> {
    if v.len() != c {
        return Err(Error::dim(&[c], &[v.len()]));
    }
    Ok(())
}

/// Per-head logits `(U_m z_q)·(V_m x_k) / √C_v`.
pub fn attn_logits(params: &DenseAttnParams, z_q: &[f64], x_k: &[f64]) -> Result<Vec<f64>> {
    let c = params.model_dim;
    check_vec(z_q, c)?;
    check_vec(x_k, c)?;
    let cv = params.head_dim();
    let mut ops = OpCount::default();
    let mut qh = vec![0.0; c];
    let mut kh = vec![0.0; c];
    matvec_acc(params.query.data(), c, c, z_q, &mut qh, &mut ops);
    matvec_acc(params.key.data(), c, c, x_k, &mut kh, &mut ops);
    Ok(qh
        .chunks_exact(cv)
        .zip(kh.chunks_exact(cv))
        .map(|(q, k)| dot(q, k) * params.scale())
        .collect())
}

/// Outputs and weights of a batch of queries against a shared key set.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutput {
    pub outputs: Vec<Vec<f64>>,
    pub weights: Vec<AttnWeights>,
}

/// Gradients of `Σ_q upstream_q · out_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub queries: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub params: DenseAttnParams,
}

struct Projected {
    keys: Vec<f64>,
    values: Vec<f64>,
}

fn validate<Q: AsRef<[f64]>, K: AsRef<[f64]>>(
    params: &DenseAttnParams,
    queries: &[Q],
    keys: &[K],
) -> Result<()> {
    if keys.is_empty() {
        return Err(Error::param("attention needs at least one key"));
    }
    for v in queries
        .iter()
        .map(AsRef::as_ref)
        .chain(keys.iter().map(AsRef::as_ref))
    {
        check_vec(v, params.model_dim)?;
    }
    Ok(())
}

fn project_keys<K: AsRef<[f64]>>(
    params: &DenseAttnParams,
    keys: &[K],
    ops: &mut OpCount,
) -> Projected {
    let c = params.model_dim;
    let mut out = Projected {
        keys: vec![0.0; keys.len() * c],
        values: vec![0.0; keys.len() * c],
    };
    for ((x, kh), vh) in keys
        .iter()
        .zip(out.keys.chunks_exact_mut(c))
        .zip(out.values.chunks_exact_mut(c))
    {
        matvec_acc(params.key.data(), c, c, x.as_ref(), kh, ops);
        matvec_acc(params.value.data(), c, c, x.as_ref(), vh, ops);
    }
    out
}

/// Per-query intermediate values kept for the backward pass.
struct QueryState {
    qh: Vec<f64>,
    weights: Vec<f64>,
    agg: Vec<f64>,
    out: Vec<f64>,
}

fn forward_query(
    params: &DenseAttnParams,
    z: &[f64],
    proj: &Projected,
    n_k: usize,
    ops: &mut OpCount,
) -> QueryState {
    let (c, m_heads, cv) = (params.model_dim, params.heads, params.head_dim());
    let scale = params.scale();
    let mut qh = vec![0.0; c];
    matvec_acc(params.query.data(), c, c, z, &mut qh, ops);
    let mut weights = vec![0.0; m_heads * n_k];
    for m in 0..m_heads {
        let q = &qh[m * cv..(m + 1) * cv];
        let logits = &mut weights[m * n_k..(m + 1) * n_k];
        for (k, l) in logits.iter_mut().enumerate() {
            *l = dot(q, &proj.keys[k * c + m * cv..k * c + (m + 1) * cv]) * scale;
        }
        softmax_in_place(logits);
    }
    ops.mac((2 * m_heads * n_k * cv) as u64);
    let mut agg = vec![0.0; c];
    for m in 0..m_heads {
        let a = &mut agg[m * cv..(m + 1) * cv];
        for k in 0..n_k {
            axpy(
                weights[m * n_k + k],
                &proj.values[k * c + m * cv..k * c + (m + 1) * cv],
                a,
            );
        }
    }
    let mut out = vec![0.0; c];
    for m in 0..m_heads {
        matvec_acc(
            params.output_head(m),
            c,
            cv,
            &agg[m * cv..(m + 1) * cv],
            &mut out,
            ops,
        );
    }
    QueryState {
        qh,
        weights,
        agg,
        out,
    }
}

/// Dense attention for a batch of queries sharing one key set. Key and value
/// projections are computed once per key; `ops` is charged for every
/// multiply-accumulate executed.
pub fn forward_batch<Q: AsRef<[f64]>, K: AsRef<[f64]>>(
    params: &DenseAttnParams,
    queries: &[Q],
    keys: &[K],
    ops: &mut OpCount,
) -> Result<DenseOutput> {
    validate(params, queries, keys)?;
    let proj = project_keys(params, keys, ops);
    let mut outputs = Vec::with_capacity(queries.len());
    let mut weights = Vec::with_capacity(queries.len());
    for z in queries {
        let s = forward_query(params, z.as_ref(), &proj, keys.len(), ops);
        outputs.push(s.out);
        weights.push(AttnWeights::new(params.heads, keys.len(), s.weights));
    }
    Ok(DenseOutput { outputs, weights })
}

/// Backward of [`forward_batch`] for the scalar `Σ_q upstream[q] · out_q`.
pub fn backward_batch<Q: AsRef<[f64]>, K: AsRef<[f64]>, U: AsRef<[f64]>>(
    params: &DenseAttnParams,
    queries: &[Q],
    keys: &[K],
    upstream: &[U],
) -> Result<DenseGrads> {
    validate(params, queries, keys)?;
    if upstream.len() != queries.len() {
        return Err(Error::dim(&[queries.len()], &[upstream.len()]));
    }
    let (c, m_heads, cv, n_k) = (
        params.model_dim,
        params.heads,
        params.head_dim(),
        keys.len(),
    );
    let scale = params.scale();
    let mut scratch = OpCount::default();
    let proj = project_keys(params, keys, &mut scratch);
    let mut grads = DenseGrads {
        queries: Vec::with_capacity(queries.len()),
        keys: vec![vec![0.0; c]; n_k],
        params: DenseAttnParams::zeros(m_heads, c)?,
    };
    let mut g_kh = vec![0.0; n_k * c];
    let mut g_vh = vec![0.0; n_k * c];
    for (z, g) in queries.iter().zip(upstream) {
        let (z, g) = (z.as_ref(), g.as_ref());
        check_vec(g, c)?;
        let s = forward_query(params, z, &proj, n_k, &mut scratch);
        let mut g_agg = vec![0.0; c];
        for m in 0..m_heads {
            let gw = &mut grads.params.output.data_mut()[m * c * cv..(m + 1) * c * cv];
            outer_acc(gw, g, &s.agg[m * cv..(m + 1) * cv]);
            matvec_t_acc(
                params.output_head(m),
                c,
                cv,
                g,
                &mut g_agg[m * cv..(m + 1) * cv],
            );
        }
        let mut g_qh = vec![0.0; c];
        let mut g_weights = vec![0.0; n_k];
        let mut g_logits = vec![0.0; n_k];
        for m in 0..m_heads {
            let ga = &g_agg[m * cv..(m + 1) * cv];
            let a = &s.weights[m * n_k..(m + 1) * n_k];
            for k in 0..n_k {
                let range = k * c + m * cv..k * c + (m + 1) * cv;
                g_weights[k] = dot(ga, &proj.values[range.clone()]);
                axpy(a[k], ga, &mut g_vh[range]);
            }
            softmax_backward(a, &g_weights, &mut g_logits);
            let q = &s.qh[m * cv..(m + 1) * cv];
            for k in 0..n_k {
                let range = k * c + m * cv..k * c + (m + 1) * cv;
                let gl = g_logits[k] * scale;
                axpy(
                    gl,
                    &proj.keys[range.clone()],
                    &mut g_qh[m * cv..(m + 1) * cv],
                );
                axpy(gl, q, &mut g_kh[range]);
            }
        }
        outer_acc(grads.params.query.data_mut(), &g_qh, z);
        let mut gz = vec![0.0; c];
        matvec_t_acc(params.query.data(), c, c, &g_qh, &mut gz);
        grads.queries.push(gz);
    }
    for (k, x) in keys.iter().enumerate() {
        let x = x.as_ref();
        let gk = &g_kh[k * c..(k + 1) * c];
        let gv = &g_vh[k * c..(k + 1) * c];
        outer_acc(grads.params.key.data_mut(), gk, x);
        outer_acc(grads.params.value.data_mut(), gv, x);
        matvec_t_acc(params.key.data(), c, c, gk, &mut grads.keys[k]);
        matvec_t_acc(params.value.data(), c, c, gv, &mut grads.keys[k]);
    }
    Ok(grads)
}

/// Multi-head attention of one query over `keys`. Returns the output vector
/// and the attention weights.
pub fn multi_head_attn<K: AsRef<[f64]>>(
    params: &DenseAttnParams,
    z_q: &[f64],
    keys: &[K],
) -> Result<(Vec<f64>, AttnWeights)> {
    let mut out = forward_batch(params, &[z_q], keys, &mut OpCount::default())?;
    Ok((out.outputs.pop().unwrap(), out.weights.pop().unwrap()))
}

/// Gradients of a single query's attention output.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleQueryGrads {
    pub z_q: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub params: DenseAttnParams,
}

pub fn multi_head_attn_backward<K: AsRef<[f64]>>(
    params: &DenseAttnParams,
    z_q: &[f64],
    keys: &[K],
    upstream: &[f64],
) -> Result<SingleQueryGrads> {
    let mut g = backward_batch(params, &[z_q], keys, &[upstream])?;
    Ok(SingleQueryGrads {
        z_q: g.queries.pop().unwrap(),
        keys: g.keys,
        params: g.params,
    })
}

/// Averaged deviation statistics from [`uniformity_at_init`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UniformityStat {
    pub num_keys: usize,
    pub trials: usize,
    /// Mean of `N_k · max_k |A_k − 1/N_k|`.
    pub scaled_deviation: f64,
    /// Mean of `max_k |A_k − 1/N_k|`.
    pub max_deviation: f64,
}

/// Monte-Carlo estimate of how far initial attention weights are from uniform.
///
/// Each trial draws a projected query `U_m z_q` and `num_keys` projected keys
/// `V_m x_k` with i.i.d. `N(0, 1)` components of length `head_dim`, applies the
/// scaled dot-product softmax, and records the deviation from `1/N_k`. With
/// `zero_logits` the logits are forced to zero.
pub fn uniformity_at_init(
    num_keys: usize,
    head_dim: usize,
    trials: usize,
    rng: &mut SeededRng,
    zero_logits: bool,
) -> Result<UniformityStat> {
    if num_keys < 2 || trials == 0 || head_dim == 0 {
        return Err(Error::param(
            "need at least 2 keys, 1 trial and a positive head dimension",
        ));
    }
    let scale = 1.0 / libm::sqrt(head_dim as f64);
    let n = num_keys as f64;
    let (mut scaled, mut raw) = (0.0, 0.0);
    let mut logits = vec![0.0; num_keys];
    let mut key = vec![0.0; head_dim];
    for _ in 0..trials {
        let q = rng.normal_vec(head_dim, 0.0, 1.0);
        for l in logits.iter_mut() {
            for x in key.iter_mut() {
                *x = rng.normal();
            }
            *l = if zero_logits {
                0.0
            } else {
                dot(&q, &key) * scale
            };
        }
        softmax_in_place(&mut logits);
        let dev = logits
            .iter()
            .map(|a| (a - 1.0 / n).abs())
            .fold(0.0, f64::max);
        raw += dev;
        scaled += n * dev;
    }
    Ok(UniformityStat {
        num_keys,
        trials,
        scaled_deviation: scaled / trials as f64,
        max_deviation: raw / trials as f64,
    })
}

//! Toy deformable transformer layers.
//!
//! Encoder: every cell of the clip feature map is a query anchored at its own
//! lattice position. Its query feature is the cell feature plus a fixed 3-d
//! sinusoidal encoding; the keys are sampled from the (unencoded) map. Layers
//! are post-norm residual blocks: `LN(x + attn)`, then `LN(h + ffn(h))`.
//!
//! Decoder: dense self-attention among object queries, a linear + sigmoid head
//! that places one reference point per query inside the grid, deformable
//! cross-attention into the encoder memory at that point, then the
//! feed-forward block. Only the cross-attention is deformable.
//!
//! Backward passes recompute each layer's intermediates from its input.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::complexity::OpCount;
use crate::deform::{self, InitMode, SamplingPlan, StDeformParams};
use crate::dense::{self, AttnWeights, DenseAttnParams};
use crate::error::{Error, Result};
use crate::interp::Point3;
use crate::linalg::{axpy, dot, matvec_acc, matvec_t_acc, outer_acc};
use crate::params::{join, ParamSet};
use crate::tensor::{ClipFeatureMap, GridDims, SeededRng, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Elementwise nonlinearity of the feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    /// tanh approximation of GELU.
    #[default]
    Gelu,
    Silu,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::tanh(GELU_K * (x + GELU_C * x * x * x))),
            Activation::Silu => x * sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_K * (x + GELU_C * x * x * x);
                let th = libm::tanh(u);
                let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Affine map `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Result<Self> {
        Ok(Linear {
            weight: Tensor::zeros(&[out_dim, in_dim])?,
            bias: Tensor::zeros(&[out_dim])?,
        })
    }

    /// Weights from `N(0, 1/in)`, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Linear {
            weight: rng.randn(&[out_dim, in_dim], 0.0, 1.0 / libm::sqrt(in_dim as f64))?,
            bias: Tensor::zeros(&[out_dim])?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.data().to_vec();
        matvec_acc(
            self.weight.data(),
            self.out_dim(),
            self.in_dim(),
            x,
            &mut y,
            &mut OpCount::default(),
        );
        y
    }

    /// Accumulates parameter gradients into `grads`, returns the input gradient.
    pub fn backward(&self, x: &[f64], g: &[f64], grads: &mut Linear) -> Vec<f64> {
        outer_acc(grads.weight.data_mut(), g, x);
        axpy(1.0, g, grads.bias.data_mut());
        let mut gx = vec![0.0; self.in_dim()];
        matvec_t_acc(
            self.weight.data(),
            self.out_dim(),
            self.in_dim(),
            g,
            &mut gx,
        );
        gx
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), self.weight.data());
        f(&join(prefix, "bias"), self.bias.data());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.weight.data_mut());
        f(&join(prefix, "bias"), self.bias.data_mut());
    }
}

/// Per-vector layer normalization with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Tensor::full(&[dim], 1.0)?,
            beta: Tensor::zeros(&[dim])?,
        })
    }

    fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (xhat, _) = Self::normalize(x);
        xhat.iter()
            .zip(self.gamma.data())
            .zip(self.beta.data())
            .map(|((h, g), b)| g * h + b)
            .collect()
    }

    pub fn backward(&self, x: &[f64], g: &[f64], grads: &mut LayerNorm) -> Vec<f64> {
        let (xhat, inv_std) = Self::normalize(x);
        let n = x.len() as f64;
        let g_hat: Vec<f64> = g
            .iter()
            .zip(self.gamma.data())
            .map(|(a, b)| a * b)
            .collect();
        for ((gg, gb), (gi, h)) in grads
            .gamma
            .data_mut()
            .iter_mut()
            .zip(grads.beta.data_mut().iter_mut())
            .zip(g.iter().zip(&xhat))
        {
            *gg += gi * h;
            *gb += gi;
        }
        let mean_g = g_hat.iter().sum::<f64>() / n;
        let mean_gh = dot(&g_hat, &xhat) / n;
        g_hat
            .iter()
            .zip(&xhat)
            .map(|(gh, h)| inv_std * (gh - mean_g - h * mean_gh))
            .collect()
    }
}

impl ParamSet for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "gamma"), self.gamma.data());
        f(&join(prefix, "beta"), self.beta.data());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "gamma"), self.gamma.data_mut());
        f(&join(prefix, "beta"), self.beta.data_mut());
    }
}

/// Two linear maps with an elementwise nonlinearity in between.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn init(
        dim: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::init(hidden, dim, rng)?,
            fc2: Linear::init(dim, hidden, rng)?,
            activation,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self
            .fc1
            .forward(x)
            .into_iter()
            .map(|v| self.activation.apply(v))
            .collect();
        self.fc2.forward(&h)
    }

    pub fn backward(&self, x: &[f64], g: &[f64], grads: &mut FeedForward) -> Vec<f64> {
        let pre = self.fc1.forward(x);
        let h: Vec<f64> = pre.iter().map(|&v| self.activation.apply(v)).collect();
        let gh = self.fc2.backward(&h, g, &mut grads.fc2);
        let gpre: Vec<f64> = gh
            .iter()
            .zip(&pre)
            .map(|(g, &p)| g * self.activation.derivative(p))
            .collect();
        self.fc1.backward(x, &gpre, &mut grads.fc1)
    }
}

impl ParamSet for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Fixed sinusoidal encoding of `(x, y, t)` with `C/3` channels per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding3D {
    encoding: ClipFeatureMap,
}

impl PositionalEncoding3D {
    pub fn new(dims: GridDims, channels: usize) -> Result<Self> {
        let t = positional_encoding(dims.t, dims.h, dims.w, channels)?;
        Ok(PositionalEncoding3D {
            encoding: ClipFeatureMap::new(t)?,
        })
    }

    pub fn map(&self) -> &ClipFeatureMap {
        &self.encoding
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        self.encoding.cell(index)
    }
}

/// `[T, H, W, C]` tensor of fixed sinusoids. Channels are three blocks of
/// `C/3` (horizontal, vertical, temporal); within a block, pair `i` holds
/// `sin(pos·ω_i), cos(pos·ω_i)` with `ω_i = 10000^(−2i/(C/3))`.
pub fn positional_encoding(t: usize, h: usize, w: usize, channels: usize) -> Result<Tensor> {
    if channels == 0 || !channels.is_multiple_of(6) {
        return Err(Error::param(format!(
            "positional encoding needs C divisible by 3 with C/3 even, got C = {channels}"
        )));
    }
    let block = channels / 3;
    let freqs: Vec<f64> = (0..block / 2)
        .map(|i| libm::pow(10000.0, -((2 * i) as f64) / block as f64))
        .collect();
    let mut out = Tensor::zeros(&[t, h, w, channels])?;
    let data = out.data_mut();
    let mut cell = 0;
    for ti in 0..t {
        for yi in 0..h {
            for xi in 0..w {
                let v = &mut data[cell * channels..(cell + 1) * channels];
                for (b, pos) in [xi, yi, ti].into_iter().enumerate() {
                    for (i, f) in freqs.iter().enumerate() {
                        let angle = pos as f64 * f;
                        v[b * block + 2 * i] = libm::sin(angle);
                        v[b * block + 2 * i + 1] = libm::cos(angle);
                    }
                }
                cell += 1;
            }
        }
    }
    Ok(out)
}

/// 1×1 projection of a `[T, H, W, C_in]` volume with `proj: [C, C_in]`.
pub fn channel_project(features: &Tensor, proj: &Tensor) -> Result<ClipFeatureMap> {
    if features.rank() != 4 || proj.rank() != 2 || proj.shape()[1] != features.shape()[3] {
        return Err(Error::Dimension {
            expected: proj.shape().to_vec(),
            actual: features.shape().to_vec(),
        });
    }
    let s = features.shape();
    let (c_out, c_in) = (proj.shape()[0], proj.shape()[1]);
    let dims = GridDims::new(s[0], s[1], s[2]);
    let mut out = vec![0.0; dims.cells() * c_out];
    for (x, y) in features
        .data()
        .chunks_exact(c_in)
        .zip(out.chunks_exact_mut(c_out))
    {
        matvec_acc(proj.data(), c_out, c_in, x, y, &mut OpCount::default());
    }
    ClipFeatureMap::from_data(dims, c_out, out)
}

/// Lattice coordinate of every cell, in flattened order.
pub fn cell_points(dims: GridDims) -> Vec<Point3> {
    (0..dims.cells())
        .map(|i| {
            let (t, y, x) = dims.unflatten(i).expect("in range");
            Point3::at_cell(t, y, x)
        })
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Deformable self-attention block plus feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: StDeformParams,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

/// Output of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub map: ClipFeatureMap,
    pub plans: Vec<SamplingPlan>,
    pub ops: OpCount,
}

struct EncoderTrace {
    queries: Vec<Vec<f64>>,
    refs: Vec<Point3>,
    resid1: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    resid2: Vec<Vec<f64>>,
    plans: Vec<SamplingPlan>,
    ops: OpCount,
}

impl EncoderLayer {
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let c = cfg.channels;
        Ok(EncoderLayer {
            attn: StDeformParams::init(cfg.heads, c, cfg.points, cfg.init, rng)?,
            norm1: LayerNorm::new(c)?,
            ffn: FeedForward::init(c, cfg.ffn_hidden, cfg.activation, rng)?,
            norm2: LayerNorm::new(c)?,
        })
    }

    fn trace(
        &self,
        x: &ClipFeatureMap,
        pos: Option<&PositionalEncoding3D>,
    ) -> Result<EncoderTrace> {
        if let Some(p) = pos {
            if p.map().dims() != x.dims() || p.map().channels() != x.channels() {
                return Err(Error::dim(
                    &[x.dims().t, x.dims().h, x.dims().w, x.channels()],
                    p.map().values().shape(),
                ));
            }
        }
        let queries: Vec<Vec<f64>> = match pos {
            Some(p) => x
                .cells()
                .enumerate()
                .map(|(i, v)| add(v, p.cell(i)))
                .collect(),
            None => x.cells().map(<[f64]>::to_vec).collect(),
        };
        let refs = cell_points(x.dims());
        let mut ops = OpCount::default();
        let attn = deform::forward_batch(&self.attn, &queries, &refs, x, &mut ops)?;
        let resid1: Vec<Vec<f64>> = x
            .cells()
            .zip(&attn.outputs)
            .map(|(v, a)| add(v, a))
            .collect();
        let hidden: Vec<Vec<f64>> = resid1.iter().map(|r| self.norm1.forward(r)).collect();
        let resid2 = hidden
            .iter()
            .map(|h| add(h, &self.ffn.forward(h)))
            .collect();
        Ok(EncoderTrace {
            queries,
            refs,
            resid1,
            hidden,
            resid2,
            plans: attn.plans,
            ops,
        })
    }

    pub fn forward(
        &self,
        x: &ClipFeatureMap,
        pos: Option<&PositionalEncoding3D>,
    ) -> Result<EncoderOutput> {
        let tr = self.trace(x, pos)?;
        let data = tr
            .resid2
            .iter()
            .flat_map(|r| self.norm2.forward(r))
            .collect();
        Ok(EncoderOutput {
            map: ClipFeatureMap::from_data(x.dims(), x.channels(), data)?,
            plans: tr.plans,
            ops: tr.ops,
        })
    }

    /// Returns the gradient with respect to `x` and the parameter gradients.
    pub fn backward(
        &self,
        x: &ClipFeatureMap,
        pos: Option<&PositionalEncoding3D>,
        g_out: &ClipFeatureMap,
    ) -> Result<(ClipFeatureMap, EncoderLayer)> {
        let tr = self.trace(x, pos)?;
        let mut grads = crate::params::zeros_like(self);
        let mut g_x = ClipFeatureMap::zeros(x.dims(), x.channels())?;
        let mut g_attn = Vec::with_capacity(x.num_cells());
        for (i, g) in g_out.cells().enumerate() {
            let g_r2 = self.norm2.backward(&tr.resid2[i], g, &mut grads.norm2);
            let g_h = add(
                &g_r2,
                &self.ffn.backward(&tr.hidden[i], &g_r2, &mut grads.ffn),
            );
            let g_r1 = self.norm1.backward(&tr.resid1[i], &g_h, &mut grads.norm1);
            axpy(1.0, &g_r1, g_x.cell_mut(i));
            g_attn.push(g_r1);
        }
        let ga = deform::backward_batch(&self.attn, &tr.queries, &tr.refs, x, &g_attn)?;
        grads.attn = ga.params;
        for (i, gz) in ga.queries.iter().enumerate() {
            axpy(1.0, gz, g_x.cell_mut(i));
        }
        axpy(1.0, ga.map.data(), g_x.data_mut());
        Ok((g_x, grads))
    }
}

impl ParamSet for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

/// Runs one encoder layer; every cell is a query anchored at itself.
pub fn encoder_forward(
    layer: &EncoderLayer,
    features: &ClipFeatureMap,
    pos: &PositionalEncoding3D,
) -> Result<ClipFeatureMap> {
    Ok(layer.forward(features, Some(pos))?.map)
}

/// Learned object query embeddings, `[N, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectQuerySet {
    pub embeddings: Tensor,
}

impl ObjectQuerySet {
    pub fn init(count: usize, channels: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(ObjectQuerySet {
            embeddings: rng.randn(&[count, channels], 0.0, 1.0)?,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.embeddings
            .data()
            .chunks_exact(self.embeddings.shape()[1])
            .map(<[f64]>::to_vec)
            .collect()
    }
}

impl ParamSet for ObjectQuerySet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(prefix, self.embeddings.data())
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(prefix, self.embeddings.data_mut())
    }
}

/// Dense self-attention, reference head, deformable cross-attention and
/// feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: DenseAttnParams,
    pub norm1: LayerNorm,
    pub reference: Linear,
    pub cross_attn: StDeformParams,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// Output of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub embeddings: Vec<Vec<f64>>,
    pub reference_points: Vec<Point3>,
    pub self_weights: Vec<AttnWeights>,
    pub plans: Vec<SamplingPlan>,
    pub ops: OpCount,
}

struct DecoderTrace {
    resid1: Vec<Vec<f64>>,
    s1: Vec<Vec<f64>>,
    ref_logits: Vec<Vec<f64>>,
    refs: Vec<Point3>,
    resid2: Vec<Vec<f64>>,
    s2: Vec<Vec<f64>>,
    resid3: Vec<Vec<f64>>,
    self_weights: Vec<AttnWeights>,
    plans: Vec<SamplingPlan>,
    ops: OpCount,
}

/// Scale from the unit cube to `[0, W−1]×[0, H−1]×[0, T−1]`.
fn reference_scale(dims: GridDims) -> [f64; 3] {
    [
        (dims.w - 1) as f64,
        (dims.h - 1) as f64,
        (dims.t - 1) as f64,
    ]
}

impl DecoderLayer {
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let c = cfg.channels;
        Ok(DecoderLayer {
            self_attn: DenseAttnParams::random(cfg.heads, c, rng, 1.0 / libm::sqrt(c as f64))?,
            norm1: LayerNorm::new(c)?,
            reference: Linear::init(3, c, rng)?,
            cross_attn: StDeformParams::init(cfg.heads, c, cfg.points, cfg.init, rng)?,
            norm2: LayerNorm::new(c)?,
            ffn: FeedForward::init(c, cfg.ffn_hidden, cfg.activation, rng)?,
            norm3: LayerNorm::new(c)?,
        })
    }

    fn trace<Q: AsRef<[f64]>>(
        &self,
        queries: &[Q],
        memory: &ClipFeatureMap,
    ) -> Result<DecoderTrace> {
        if queries.is_empty() {
            return Err(Error::param("decoder needs at least one object query"));
        }
        let mut ops = OpCount::default();
        let sa = dense::forward_batch(&self.self_attn, queries, queries, &mut ops)?;
        let resid1: Vec<Vec<f64>> = queries
            .iter()
            .zip(&sa.outputs)
            .map(|(q, a)| add(q.as_ref(), a))
            .collect();
        let s1: Vec<Vec<f64>> = resid1.iter().map(|r| self.norm1.forward(r)).collect();
        let scale = reference_scale(memory.dims());
        let ref_logits: Vec<Vec<f64>> = s1.iter().map(|s| self.reference.forward(s)).collect();
        let refs: Vec<Point3> = ref_logits
            .iter()
            .map(|l| {
                Point3::new(
                    sigmoid(l[0]) * scale[0],
                    sigmoid(l[1]) * scale[1],
                    sigmoid(l[2]) * scale[2],
                )
            })
            .collect();
        let ca = deform::forward_batch(&self.cross_attn, &s1, &refs, memory, &mut ops)?;
        let resid2: Vec<Vec<f64>> = s1.iter().zip(&ca.outputs).map(|(s, a)| add(s, a)).collect();
        let s2: Vec<Vec<f64>> = resid2.iter().map(|r| self.norm2.forward(r)).collect();
        let resid3 = s2.iter().map(|s| add(s, &self.ffn.forward(s))).collect();
        Ok(DecoderTrace {
            resid1,
            s1,
            ref_logits,
            refs,
            resid2,
            s2,
            resid3,
            self_weights: sa.weights,
            plans: ca.plans,
            ops,
        })
    }

    pub fn forward<Q: AsRef<[f64]>>(
        &self,
        queries: &[Q],
        memory: &ClipFeatureMap,
    ) -> Result<DecoderOutput> {
        let tr = self.trace(queries, memory)?;
        Ok(DecoderOutput {
            embeddings: tr.resid3.iter().map(|r| self.norm3.forward(r)).collect(),
            reference_points: tr.refs,
            self_weights: tr.self_weights,
            plans: tr.plans,
            ops: tr.ops,
        })
    }

    /// Returns gradients with respect to the queries, the memory map and the
    /// layer parameters.
    pub fn backward<Q: AsRef<[f64]>, G: AsRef<[f64]>>(
        &self,
        queries: &[Q],
        memory: &ClipFeatureMap,
        g_out: &[G],
    ) -> Result<(Vec<Vec<f64>>, ClipFeatureMap, DecoderLayer)> {
        let tr = self.trace(queries, memory)?;
        if g_out.len() != queries.len() {
            return Err(Error::dim(&[queries.len()], &[g_out.len()]));
        }
        let mut grads = crate::params::zeros_like(self);
        let mut g_s1 = Vec::with_capacity(queries.len());
        let mut g_cross = Vec::with_capacity(queries.len());
        for (i, g) in g_out.iter().enumerate() {
            let g_r3 = self
                .norm3
                .backward(&tr.resid3[i], g.as_ref(), &mut grads.norm3);
            let g_s2 = add(&g_r3, &self.ffn.backward(&tr.s2[i], &g_r3, &mut grads.ffn));
            let g_r2 = self.norm2.backward(&tr.resid2[i], &g_s2, &mut grads.norm2);
            g_s1.push(g_r2.clone());
            g_cross.push(g_r2);
        }
        let gc = deform::backward_batch(&self.cross_attn, &tr.s1, &tr.refs, memory, &g_cross)?;
        grads.cross_attn = gc.params;
        let scale = reference_scale(memory.dims());
        let mut g_sa = Vec::with_capacity(queries.len());
        for i in 0..queries.len() {
            axpy(1.0, &gc.queries[i], &mut g_s1[i]);
            let g_ref = gc.refs[i].to_array();
            let g_logit: Vec<f64> = (0..3)
                .map(|j| {
                    let s = sigmoid(tr.ref_logits[i][j]);
                    g_ref[j] * scale[j] * s * (1.0 - s)
                })
                .collect();
            let g_from_ref = self
                .reference
                .backward(&tr.s1[i], &g_logit, &mut grads.reference);
            axpy(1.0, &g_from_ref, &mut g_s1[i]);
            g_sa.push(
                self.norm1
                    .backward(&tr.resid1[i], &g_s1[i], &mut grads.norm1),
            );
        }
        let gs = dense::backward_batch(&self.self_attn, queries, queries, &g_sa)?;
        grads.self_attn = gs.params;
        let g_queries = g_sa
            .iter()
            .zip(gs.queries.iter().zip(&gs.keys))
            .map(|(r, (q, k))| {
                r.iter()
                    .zip(q)
                    .zip(k)
                    .map(|((a, b), c)| a + b + c)
                    .collect()
            })
            .collect();
        Ok((g_queries, gc.map, grads))
    }
}

impl ParamSet for DecoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.reference.visit(&join(prefix, "reference"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.norm3.visit(&join(prefix, "norm3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.reference.visit_mut(&join(prefix, "reference"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
    }
}

/// Runs one decoder layer; returns the output embeddings and the reference
/// points used for cross-attention.
pub fn decoder_forward(
    layer: &DecoderLayer,
    queries: &ObjectQuerySet,
    memory: &ClipFeatureMap,
) -> Result<(Vec<Vec<f64>>, Vec<Point3>)> {
    let out = layer.forward(&queries.rows(), memory)?;
    Ok((out.embeddings, out.reference_points))
}

/// Model shape and initialization settings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub grid: GridDims,
    /// Channels of the raw clip features before the 1×1 projection.
    pub input_channels: usize,
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub num_queries: usize,
    pub ffn_hidden: usize,
    pub activation: Activation,
    pub init: InitMode,
    /// Add the positional encoding to the queries of every encoder layer
    /// rather than only the first.
    pub readd_pos: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: `C = 24, M = 2, K = 4`, 2 encoder and 2 decoder layers.
    pub fn desk() -> Self {
        ModelConfig {
            grid: GridDims::new(2, 4, 4),
            input_channels: 24,
            channels: 24,
            heads: 2,
            points: 4,
            layers_enc: 2,
            layers_dec: 2,
            num_queries: 4,
            ffn_hidden: 96,
            activation: Activation::Gelu,
            init: InitMode::Pattern,
            readd_pos: true,
        }
    }

    /// `M = 8, K = 32, C = 384` on a tiny grid.
    pub fn paper() -> Self {
        ModelConfig {
            grid: GridDims::new(2, 2, 2),
            input_channels: 384,
            channels: 384,
            heads: 8,
            points: 32,
            ffn_hidden: 4 * 384,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if self.grid.cells() == 0 {
            return Err(Error::param("grid extents must be positive"));
        }
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "channels {c} not divisible by heads {}",
                self.heads
            )));
        }
        if !c.is_multiple_of(6) {
            return Err(Error::param(format!(
                "channels {c} must be divisible by 3 with C/3 even"
            )));
        }
        if self.points == 0
            || self.num_queries == 0
            || self.ffn_hidden == 0
            || self.input_channels == 0
        {
            return Err(Error::param(
                "points, num_queries, ffn_hidden and input channels must be positive",
            ));
        }
        Ok(())
    }
}

/// Input projection, encoder stack, decoder stack and object queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub input_proj: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub queries: ObjectQuerySet,
}

/// Everything a full forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub embeddings: Vec<Vec<f64>>,
    /// Reference points of the last decoder layer.
    pub reference_points: Vec<Point3>,
    pub memory: ClipFeatureMap,
    /// Sampling plans per encoder layer, one per cell.
    pub encoder_plans: Vec<Vec<SamplingPlan>>,
    /// Sampling plans per decoder layer, one per object query.
    pub decoder_plans: Vec<Vec<SamplingPlan>>,
    /// Reference points per decoder layer.
    pub decoder_refs: Vec<Vec<Point3>>,
    pub self_weights: Vec<Vec<AttnWeights>>,
    pub encoder_ops: OpCount,
    pub decoder_ops: OpCount,
}

struct ModelTrace {
    projected: ClipFeatureMap,
    enc_inputs: Vec<ClipFeatureMap>,
    memory: ClipFeatureMap,
    dec_inputs: Vec<Vec<Vec<f64>>>,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let input_proj = rng.randn(
            &[config.channels, config.input_channels],
            0.0,
            1.0 / libm::sqrt(config.input_channels as f64),
        )?;
        let encoder = (0..config.layers_enc)
            .map(|_| EncoderLayer::init(&config, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..config.layers_dec)
            .map(|_| DecoderLayer::init(&config, rng))
            .collect::<Result<_>>()?;
        let queries = ObjectQuerySet::init(config.num_queries, config.channels, rng)?;
        Ok(Model {
            config,
            input_proj,
            encoder,
            decoder,
            queries,
        })
    }

    fn check_features(&self, features: &ClipFeatureMap) -> Result<()> {
        if features.dims() != self.config.grid || features.channels() != self.config.input_channels
        {
            let g = self.config.grid;
            return Err(Error::dim(
                &[g.t, g.h, g.w, self.config.input_channels],
                features.values().shape(),
            ));
        }
        Ok(())
    }

    fn layer_pos<'a>(
        &self,
        layer: usize,
        pos: &'a PositionalEncoding3D,
    ) -> Option<&'a PositionalEncoding3D> {
        (self.config.readd_pos || layer == 0).then_some(pos)
    }

    pub fn forward(&self, features: &ClipFeatureMap) -> Result<ModelOutput> {
        self.check_features(features)?;
        let pos = PositionalEncoding3D::new(self.config.grid, self.config.channels)?;
        let mut x = channel_project(features.values(), &self.input_proj)?;
        let mut out = ModelOutput {
            embeddings: Vec::new(),
            reference_points: Vec::new(),
            memory: x.clone(),
            encoder_plans: Vec::new(),
            decoder_plans: Vec::new(),
            decoder_refs: Vec::new(),
            self_weights: Vec::new(),
            encoder_ops: OpCount::default(),
            decoder_ops: OpCount::default(),
        };
        for (l, layer) in self.encoder.iter().enumerate() {
            let e = layer.forward(&x, self.layer_pos(l, &pos))?;
            out.encoder_plans.push(e.plans);
            out.encoder_ops += e.ops;
            x = e.map;
        }
        let mut q = self.queries.rows();
        for layer in &self.decoder {
            let d = layer.forward(&q, &x)?;
            out.decoder_plans.push(d.plans);
            out.decoder_refs.push(d.reference_points.clone());
            out.self_weights.push(d.self_weights);
            out.decoder_ops += d.ops;
            out.reference_points = d.reference_points;
            q = d.embeddings;
        }
        out.embeddings = q;
        out.memory = x;
        Ok(out)
    }

    fn trace(&self, features: &ClipFeatureMap, pos: &PositionalEncoding3D) -> Result<ModelTrace> {
        let projected = channel_project(features.values(), &self.input_proj)?;
        let mut enc_inputs = Vec::with_capacity(self.encoder.len());
        let mut x = projected.clone();
        for (l, layer) in self.encoder.iter().enumerate() {
            let next = layer.forward(&x, self.layer_pos(l, pos))?.map;
            enc_inputs.push(core::mem::replace(&mut x, next));
        }
        let mut dec_inputs = Vec::with_capacity(self.decoder.len());
        let mut q = self.queries.rows();
        for layer in &self.decoder {
            let next = layer.forward(&q, &x)?.embeddings;
            dec_inputs.push(core::mem::replace(&mut q, next));
        }
        Ok(ModelTrace {
            projected,
            enc_inputs,
            memory: x,
            dec_inputs,
        })
    }

    /// Gradients of `Σ_i upstream[i] · embeddings[i]` with respect to every
    /// parameter and to the raw input features.
    pub fn backward<G: AsRef<[f64]>>(
        &self,
        features: &ClipFeatureMap,
        upstream: &[G],
    ) -> Result<(Model, ClipFeatureMap)> {
        self.check_features(features)?;
        if upstream.len() != self.queries.len() {
            return Err(Error::dim(&[self.queries.len()], &[upstream.len()]));
        }
        let pos = PositionalEncoding3D::new(self.config.grid, self.config.channels)?;
        let tr = self.trace(features, &pos)?;
        let mut grads = crate::params::zeros_like(self);
        let mut g_q: Vec<Vec<f64>> = upstream.iter().map(|g| g.as_ref().to_vec()).collect();
        let mut g_mem = ClipFeatureMap::zeros(tr.memory.dims(), tr.memory.channels())?;
        for (l, layer) in self.decoder.iter().enumerate().rev() {
            let (gq, gm, gl) = layer.backward(&tr.dec_inputs[l], &tr.memory, &g_q)?;
            axpy(1.0, gm.data(), g_mem.data_mut());
            grads.decoder[l] = gl;
            g_q = gq;
        }
        for (dst, g) in grads
            .queries
            .embeddings
            .data_mut()
            .chunks_exact_mut(self.config.channels)
            .zip(&g_q)
        {
            dst.copy_from_slice(g);
        }
        let mut g_x = g_mem;
        for (l, layer) in self.encoder.iter().enumerate().rev() {
            let (gx, gl) = layer.backward(&tr.enc_inputs[l], self.layer_pos(l, &pos), &g_x)?;
            grads.encoder[l] = gl;
            g_x = gx;
        }
        let (c, c_in) = (self.config.channels, self.config.input_channels);
        let mut g_features = ClipFeatureMap::zeros(features.dims(), c_in)?;
        for (i, g) in g_x.cells().enumerate() {
            outer_acc(grads.input_proj.data_mut(), g, features.cell(i));
            matvec_t_acc(self.input_proj.data(), c, c_in, g, g_features.cell_mut(i));
        }
        debug_assert_eq!(tr.projected.dims(), features.dims());
        Ok((grads, g_features))
    }
}

impl ParamSet for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "input_proj"), self.input_proj.data());
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("dec{i}")), f);
        }
        self.queries.visit(&join(prefix, "queries"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "input_proj"), self.input_proj.data_mut());
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("dec{i}")), f);
        }
        self.queries.visit_mut(&join(prefix, "queries"), f);
    }
}

impl ParamSet for ClipFeatureMap {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(prefix, self.data())
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(prefix, self.data_mut())
    }
}

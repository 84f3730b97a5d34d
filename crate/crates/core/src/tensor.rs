//! Dense row-major arrays, clip feature maps and the seeded generator used for
//! every random initialization in the crate.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::complexity::OpCount;
use crate::error::{Error, Result};
use crate::linalg;

/// Row-major array of `f64` with rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim(&[len], &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        check_shape(shape)?;
        let len = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    /// Rank-1 tensor holding `values`.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len().max(1)],
            data: if values.is_empty() {
                vec![0.0]
            } else {
                values.to_vec()
            },
        }
    }

    /// Row-major matrix from nested rows. All rows must have equal length.
    pub fn matrix<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(&[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    /// Samples every element from `N(mean, std²)` with a fresh generator seeded by `seed`.
    pub fn randn(shape: &[usize], seed: RngSeed, mean: f64, std: f64) -> Result<Self> {
        SeededRng::new(seed).randn(shape, mean, std)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, e)| i >= e) {
            return Err(Error::Index {
                index: index.to_vec(),
                extents: self.shape.clone(),
            });
        }
        Ok(index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| acc * extent + i))
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::dim(&[self.data.len()], &[len]));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
        return Err(Error::param("tensor shape must have 1-4 extents, all >= 1"));
    }
    Ok(())
}

/// Matrix–vector product of a `[r, c]` matrix and a `[c]` vector.
pub fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 || v.rank() != 1 || m.shape[1] != v.shape[0] {
        return Err(Error::Dimension {
            expected: m.shape.clone(),
            actual: v.shape.clone(),
        });
    }
    let (rows, cols) = (m.shape[0], m.shape[1]);
    let mut out = vec![0.0; rows];
    linalg::matvec_acc(
        &m.data,
        rows,
        cols,
        &v.data,
        &mut out,
        &mut OpCount::default(),
    );
    Tensor::new(&[rows], out)
}

/// Seed for [`SeededRng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Derives an independent seed for a sub-stream, e.g. one per instance.
    pub fn derive(self, stream: u64) -> RngSeed {
        // splitmix64 finalizer
        let mut z = self.0 ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RngSeed(z ^ (z >> 31))
    }
}

/// ChaCha8 stream. Identical seeds and call sequences give bit-identical draws
/// on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: RngSeed) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed.0),
        }
    }

    /// One draw from `N(0, 1)`.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let unit = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * unit
    }

    pub fn normal_vec(&mut self, len: usize, mean: f64, std: f64) -> Vec<f64> {
        (0..len).map(|_| mean + std * self.normal()).collect()
    }

    pub fn uniform_vec(&mut self, len: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..len).map(|_| self.uniform(lo, hi)).collect()
    }

    pub fn randn(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
        if !(std >= 0.0) {
            return Err(Error::param("standard deviation must be >= 0"));
        }
        check_shape(shape)?;
        let len = shape.iter().product();
        Tensor::new(shape, self.normal_vec(len, mean, std))
    }
}

/// Extents of a `[T, H, W]` spatio-temporal lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        GridDims { t, h, w }
    }

    /// Number of lattice cells `T·H·W`, i.e. the key count of dense attention.
    pub const fn cells(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn flatten(&self, t: usize, y: usize, x: usize) -> Result<usize> {
        if t >= self.t || y >= self.h || x >= self.w {
            return Err(Error::Index {
                index: vec![t, y, x],
                extents: vec![self.t, self.h, self.w],
            });
        }
        Ok((t * self.h + y) * self.w + x)
    }

    pub fn unflatten(&self, index: usize) -> Result<(usize, usize, usize)> {
        if index >= self.cells() {
            return Err(Error::Index {
                index: vec![index],
                extents: vec![self.cells()],
            });
        }
        let x = index % self.w;
        let y = (index / self.w) % self.h;
        let t = index / (self.w * self.h);
        Ok((t, y, x))
    }
}

/// Feature volume laid out `[T, H, W, C]` with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatureMap {
    dims: GridDims,
    channels: usize,
    values: Tensor,
}

impl ClipFeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::param(
                "clip feature map needs a rank-4 [T, H, W, C] tensor",
            ));
        }
        let s = values.shape();
        Ok(ClipFeatureMap {
            dims: GridDims::new(s[0], s[1], s[2]),
            channels: s[3],
            values,
        })
    }

    pub fn zeros(dims: GridDims, channels: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[dims.t, dims.h, dims.w, channels])?)
    }

    pub fn from_data(dims: GridDims, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(&[dims.t, dims.h, dims.w, channels], data)?)
    }

    pub fn from_fn(
        dims: GridDims,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.cells() * channels);
        for t in 0..dims.t {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    for c in 0..channels {
                        data.push(f(t, y, x, c));
                    }
                }
            }
        }
        Self::from_data(dims, channels, data)
    }

    pub fn randn(dims: GridDims, channels: usize, rng: &mut SeededRng, std: f64) -> Result<Self> {
        Self::new(rng.randn(&[dims.t, dims.h, dims.w, channels], 0.0, std)?)
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Flattened key count `N_k = T·H·W`.
    pub fn num_cells(&self) -> usize {
        self.dims.cells()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.values.data_mut()
    }

    pub fn feature(&self, t: usize, y: usize, x: usize) -> Result<&[f64]> {
        let cell = self.dims.flatten(t, y, x)?;
        Ok(self.cell(cell))
    }

    /// Feature vector at a flattened cell index. Panics if out of range.
    pub fn cell(&self, index: usize) -> &[f64] {
        &self.values.data()[index * self.channels..(index + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, index: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.values.data_mut()[index * c..(index + 1) * c]
    }

    /// All cell vectors in flattened order.
    pub fn cells(&self) -> core::slice::ChunksExact<'_, f64> {
        self.values.data().chunks_exact(self.channels)
    }
}

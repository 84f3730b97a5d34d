//! Trilinear sampling of a clip feature map at fractional `(x, y, t)`
//! coordinates, with zero padding outside the lattice.
//!
//! A point `p` touches the 8 lattice corners `⌊p⌋` / `⌊p⌋ + 1` per axis. Each
//! corner contributes its feature vector scaled by the product of the per-axis
//! linear weights; corners outside the grid contribute the zero vector.

use alloc::vec;
use alloc::vec::Vec;

use crate::complexity::OpCount;
use crate::error::{Error, Result};
use crate::tensor::{ClipFeatureMap, GridDims};

/// Fractional spatio-temporal coordinate in grid units. Any real value is a
/// legal sampling location.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        t: 0.0,
    };

    pub const fn new(x: f64, y: f64, t: f64) -> Self {
        Point3 { x, y, t }
    }

    /// Lattice point of a cell given as `(t, y, x)` indices.
    pub fn at_cell(t: usize, y: usize, x: usize) -> Self {
        Point3::new(x as f64, y as f64, t as f64)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.t]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }

    /// Distance to the nearest lattice plane along any axis.
    pub fn lattice_clearance(self) -> f64 {
        self.to_array()
            .iter()
            .map(|v| {
                let f = v - libm::floor(*v);
                f.min(1.0 - f)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

impl core::ops::Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.t + o.t)
    }
}

impl core::ops::Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.t - o.t)
    }
}

/// Boundary handling for samples near or outside the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaddingPolicy {
    /// Out-of-grid corners read the zero vector.
    #[default]
    ZeroOutside,
}

/// One of the 8 interpolation corners of a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    /// Flattened cell index, `None` when the corner lies outside the grid.
    pub cell: Option<usize>,
    /// Trilinear weight `wx·wy·wt`.
    pub weight: f64,
    /// Partial derivatives of `weight` with respect to `(x, y, t)`.
    pub dweight: [f64; 3],
}

/// Per-axis lower index, and the weights of the lower and upper neighbours.
fn axis(v: f64, extent: usize) -> ([Option<usize>; 2], [f64; 2]) {
    let lo = libm::floor(v);
    let frac = v - lo;
    let idx = |i: f64| {
        if i >= 0.0 && i < extent as f64 {
            Some(i as usize)
        } else {
            None
        }
    };
    ([idx(lo), idx(lo + 1.0)], [1.0 - frac, frac])
}

/// The 8 corners of `p` in the order `(t, y, x)` lower/upper, x fastest.
pub fn corners(dims: GridDims, p: Point3) -> [Corner; 8] {
    let (ix, wx) = axis(p.x, dims.w);
    let (iy, wy) = axis(p.y, dims.h);
    let (it, wt) = axis(p.t, dims.t);
    const SIGN: [f64; 2] = [-1.0, 1.0];
    let mut out = [Corner {
        cell: None,
        weight: 0.0,
        dweight: [0.0; 3],
    }; 8];
    for (n, corner) in out.iter_mut().enumerate() {
        let (a, b, c) = ((n >> 2) & 1, (n >> 1) & 1, n & 1);
        let cell = match (it[a], iy[b], ix[c]) {
            (Some(t), Some(y), Some(x)) => Some((t * dims.h + y) * dims.w + x),
            _ => None,
        };
        *corner = Corner {
            cell,
            weight: wt[a] * wy[b] * wx[c],
            dweight: [
                SIGN[c] * wt[a] * wy[b],
                SIGN[b] * wt[a] * wx[c],
                SIGN[a] * wy[b] * wx[c],
            ],
        };
    }
    out
}

/// In-grid `(cell, weight)` pairs for `p`, skipping zero-padded corners.
pub fn corner_weights(dims: GridDims, p: Point3) -> impl Iterator<Item = (usize, f64)> {
    corners(dims, p)
        .into_iter()
        .filter_map(|c| c.cell.map(|cell| (cell, c.weight)))
}

/// Interpolated feature vector `x(p)`.
pub fn sample(grid: &ClipFeatureMap, p: Point3) -> Vec<f64> {
    let c = grid.channels();
    let mut out = vec![0.0; c];
    sample_strided(
        grid.data(),
        grid.dims(),
        c,
        0,
        p,
        &mut out,
        &mut OpCount::default(),
    );
    out
}

/// Sparse gradient of `upstream · sample(grid, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    /// `(cell, upstream · corner weight)` for every in-grid corner with nonzero weight.
    pub grid: Vec<(usize, Vec<f64>)>,
    pub point: Point3,
}

pub fn sample_backward(grid: &ClipFeatureMap, p: Point3, upstream: &[f64]) -> Result<SampleGrad> {
    let c = grid.channels();
    if upstream.len() != c {
        return Err(Error::dim(&[c], &[upstream.len()]));
    }
    let mut cells = Vec::new();
    let mut gp = [0.0; 3];
    for corner in corners(grid.dims(), p) {
        let Some(cell) = corner.cell else { continue };
        let value = grid.cell(cell);
        let proj: f64 = value.iter().zip(upstream).map(|(v, u)| v * u).sum();
        for (g, d) in gp.iter_mut().zip(corner.dweight) {
            *g += d * proj;
        }
        if corner.weight != 0.0 {
            cells.push((cell, upstream.iter().map(|u| u * corner.weight).collect()));
        }
    }
    Ok(SampleGrad {
        grid: cells,
        point: Point3::from_array(gp),
    })
}

/// Samples channels `offset..offset + out.len()` of a map whose cells are
/// `stride` values apart. Every one of the 8 corners is charged `out.len()`
/// multiply-adds and one read, padded corners included.
pub(crate) fn sample_strided(
    data: &[f64],
    dims: GridDims,
    stride: usize,
    offset: usize,
    p: Point3,
    out: &mut [f64],
    ops: &mut OpCount,
) {
    let width = out.len();
    for corner in corners(dims, p) {
        if let Some(cell) = corner.cell {
            let base = cell * stride + offset;
            for (o, v) in out.iter_mut().zip(&data[base..base + width]) {
                *o += corner.weight * v;
            }
        }
    }
    ops.mac(8 * width as u64);
    ops.interpolation_reads += 8;
}

/// Backward of [`sample_strided`]: accumulates `upstream · weight` into
/// `grad_data` and returns the gradient with respect to `p`. Touched cells are
/// appended to `touched`.
pub(crate) fn sample_strided_backward(
    data: &[f64],
    dims: GridDims,
    stride: usize,
    offset: usize,
    p: Point3,
    upstream: &[f64],
    grad_data: &mut [f64],
    touched: &mut Vec<usize>,
) -> Point3 {
    let width = upstream.len();
    let mut gp = [0.0; 3];
    for corner in corners(dims, p) {
        let Some(cell) = corner.cell else { continue };
        let base = cell * stride + offset;
        let proj: f64 = data[base..base + width]
            .iter()
            .zip(upstream)
            .map(|(v, u)| v * u)
            .sum();
        for (g, d) in gp.iter_mut().zip(corner.dweight) {
            *g += d * proj;
        }
        for (g, u) in grad_data[base..base + width].iter_mut().zip(upstream) {
            *g += corner.weight * u;
        }
        touched.push(cell);
    }
    Point3::from_array(gp)
}

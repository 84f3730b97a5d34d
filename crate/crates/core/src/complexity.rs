//! Exact operation counts for both attention paths and log-log scaling fits.
//!
//! Counting conventions, shared by the analytic formulas and the instrumented
//! kernels:
//!
//! - every accumulated product (matrix–vector rows, dot products, weighted
//!   sums, interpolation taps) costs one multiply and one add;
//! - bias additions and reference-point additions cost one add each;
//! - softmax (max, `exp`, normalization) and the `1/√C_v` logit scale are not
//!   counted;
//! - trilinear sampling always processes 8 corners; zero-padded corners are
//!   charged like in-grid ones and count as interpolation reads.

use alloc::vec::Vec;

use crate::deform::{self, InitMode, StDeformParams};
use crate::dense::{self, DenseAttnParams};
use crate::error::{Error, Result};
use crate::interp::Point3;
use crate::tensor::{ClipFeatureMap, GridDims, RngSeed, SeededRng};

/// Tally of scalar work done by a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OpCount {
    pub multiplies: u64,
    pub adds: u64,
    pub interpolation_reads: u64,
}

impl OpCount {
    /// Charges `n` multiply-accumulates.
    #[inline]
    pub fn mac(&mut self, n: u64) {
        self.multiplies += n;
        self.adds += n;
    }
}

impl core::ops::Add for OpCount {
    type Output = OpCount;
    fn add(self, o: OpCount) -> OpCount {
        OpCount {
            multiplies: self.multiplies + o.multiplies,
            adds: self.adds + o.adds,
            interpolation_reads: self.interpolation_reads + o.interpolation_reads,
        }
    }
}

impl core::ops::AddAssign for OpCount {
    fn add_assign(&mut self, o: OpCount) {
        *self = *self + o;
    }
}

fn head_dim(c: u64, m: u64) -> Result<u64> {
    if c == 0 || m == 0 || !c.is_multiple_of(m) {
        return Err(Error::param(
            "channel count must be a positive multiple of the head count",
        ));
    }
    Ok(c / m)
}

/// Dense multi-head attention for `n_q` queries over `n_k` keys:
///
/// ```text
/// n_q·C²            query projections U
/// + 2·n_k·C²        key and value projections V, W', once per key
/// + M·n_q·n_k·C_v   logits
/// + M·n_q·n_k·C_v   weighted sums
/// + n_q·C²          output projections W
/// ```
///
/// Adds equal multiplies.
pub fn dense_attn_cost(n_q: u64, n_k: u64, c: u64, m: u64) -> Result<OpCount> {
    if n_q == 0 || n_k == 0 {
        return Err(Error::param("query and key counts must be positive"));
    }
    let cv = head_dim(c, m)?;
    let mult = n_q * c * c + 2 * n_k * c * c + 2 * m * n_q * n_k * cv + n_q * c * c;
    Ok(OpCount {
        multiplies: mult,
        adds: mult,
        interpolation_reads: 0,
    })
}

/// Deformable attention for `n_q` queries whose value projection is amortized
/// over `n_q` cells (the encoder case, `N_q = HWT`).
pub fn stdeform_cost(n_q: u64, c: u64, m: u64, k: u64) -> Result<OpCount> {
    stdeform_cost_with_values(n_q, n_q, c, m, k)
}

/// Deformable attention for `n_q` queries over a map of `n_cells` cells:
///
/// ```text
/// n_cells·C²          value projections W'
/// + n_q·(3MK + MK)·C  offset and weight heads
/// + n_q·M·K·8·C_v     trilinear sampling
/// + n_q·M·K·C_v       attention weighting
/// + n_q·C²            output projections W
/// ```
///
/// Adds are the multiplies plus `n_q·(4MK + 3MK)` bias and reference-point
/// additions. Interpolation reads are `8·n_q·M·K`.
pub fn stdeform_cost_with_values(
    n_q: u64,
    n_cells: u64,
    c: u64,
    m: u64,
    k: u64,
) -> Result<OpCount> {
    if n_q == 0 || n_cells == 0 || k == 0 {
        return Err(Error::param(
            "query, cell and point counts must be positive",
        ));
    }
    let cv = head_dim(c, m)?;
    let mk = m * k;
    let mult = n_cells * c * c + n_q * 4 * mk * c + n_q * mk * 8 * cv + n_q * mk * cv + n_q * c * c;
    Ok(OpCount {
        multiplies: mult,
        adds: mult + n_q * 7 * mk,
        interpolation_reads: 8 * n_q * mk,
    })
}

/// Which attention path an encoder measurement exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AttnPath {
    Dense,
    Deformable,
}

impl AttnPath {
    pub fn name(self) -> &'static str {
        match self {
            AttnPath::Dense => "dense",
            AttnPath::Deformable => "deformable",
        }
    }
}

/// Shape of the attention sub-layer being measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostConfig {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
}

impl CostConfig {
    /// Encoder self-attention cost over `cells` cells, `N_q = N_k = cells`.
    pub fn analytic(&self, path: AttnPath, cells: usize) -> Result<OpCount> {
        let (n, c, m, k) = (
            cells as u64,
            self.channels as u64,
            self.heads as u64,
            self.points as u64,
        );
        match path {
            AttnPath::Dense => dense_attn_cost(n, n, c, m),
            AttnPath::Deformable => stdeform_cost(n, c, m, k),
        }
    }
}

/// One measured grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScalingPoint {
    pub cells: u64,
    pub multiplies: u64,
    pub adds: u64,
    pub interp_reads: u64,
}

/// Multiply counts over a grid sweep and their log-log fit.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScalingReport {
    pub path: AttnPath,
    pub points: Vec<ScalingPoint>,
    /// Least-squares slope of `ln(multiplies)` against `ln(cells)`.
    pub slope: f64,
    /// Root-mean-square residual of that fit.
    pub residual: f64,
}

/// Least-squares line through `(ln x, ln y)`; returns `(slope, rms residual)`.
pub fn fit_loglog(samples: &[(f64, f64)]) -> Result<(f64, f64)> {
    if samples.len() < 2 || samples.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::param(
            "log-log fit needs two or more positive samples",
        ));
    }
    let n = samples.len() as f64;
    let logs: Vec<(f64, f64)> = samples
        .iter()
        .map(|&(x, y)| (libm::log(x), libm::log(y)))
        .collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::param("log-log fit needs distinct abscissae"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = logs
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum();
    Ok((slope, libm::sqrt(sse / n)))
}

/// One instrumented encoder self-attention pass: every cell is a query
/// anchored at itself, and every cell is a key (dense) or a sampling source
/// (deformable). Features are drawn from `N(0, 1)`.
pub fn measure_grid(
    config: &CostConfig,
    path: AttnPath,
    grid: GridDims,
    seed: RngSeed,
) -> Result<OpCount> {
    let mut rng = SeededRng::new(seed);
    let c = config.channels;
    let map = ClipFeatureMap::randn(grid, c, &mut rng, 1.0)?;
    let cells: Vec<&[f64]> = map.cells().collect();
    let mut ops = OpCount::default();
    match path {
        AttnPath::Dense => {
            let std = 1.0 / libm::sqrt(c as f64);
            let params = DenseAttnParams::random(config.heads, c, &mut rng, std)?;
            dense::forward_batch(&params, &cells, &cells, &mut ops)?;
        }
        AttnPath::Deformable => {
            let params =
                StDeformParams::init(config.heads, c, config.points, InitMode::Random, &mut rng)?;
            let refs: Vec<Point3> = (0..grid.cells())
                .map(|i| {
                    let (t, y, x) = grid.unflatten(i).expect("cell index in range");
                    Point3::at_cell(t, y, x)
                })
                .collect();
            deform::forward_batch(&params, &cells, &refs, &map, &mut ops)?;
        }
    }
    Ok(ops)
}

/// Runs [`measure_grid`] over a sweep of at least 4 strictly growing grids and
/// fits the log-log slope of the multiply counts.
pub fn measure_encoder(
    config: &CostConfig,
    path: AttnPath,
    grids: &[GridDims],
    seed: RngSeed,
) -> Result<ScalingReport> {
    if grids.len() < 4 {
        return Err(Error::param("scaling sweep needs at least 4 grid sizes"));
    }
    if grids.windows(2).any(|w| w[1].cells() <= w[0].cells()) {
        return Err(Error::param("grid sizes must be strictly increasing"));
    }
    let mut points = Vec::with_capacity(grids.len());
    for (i, &g) in grids.iter().enumerate() {
        let ops = measure_grid(config, path, g, seed.derive(i as u64))?;
        points.push(ScalingPoint {
            cells: g.cells() as u64,
            multiplies: ops.multiplies,
            adds: ops.adds,
            interp_reads: ops.interpolation_reads,
        });
    }
    let samples: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.cells as f64, p.multiplies as f64))
        .collect();
    let (slope, residual) = fit_loglog(&samples)?;
    Ok(ScalingReport {
        path,
        points,
        slope,
        residual,
    })
}

/// Cubic grids `n×n×n` for each side length.
pub fn cubic_grids(sides: &[usize]) -> Vec<GridDims> {
    sides.iter().map(|&n| GridDims::new(n, n, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_element_dense_count() {
        assert_eq!(dense_attn_cost(1, 1, 1, 1).unwrap().multiplies, 6);
        assert!(dense_attn_cost(1, 1, 3, 2).is_err());
    }

    #[test]
    fn single_element_deform_count() {
        // 1 (values) + 4 (heads) + 8 (taps) + 1 (weighting) + 1 (output)
        let c = stdeform_cost(1, 1, 1, 1).unwrap();
        assert_eq!(c.multiplies, 15);
        assert_eq!(c.adds, 15 + 7);
        assert_eq!(c.interpolation_reads, 8);
    }

    #[test]
    fn additive_composition() {
        let a = OpCount {
            multiplies: 3,
            adds: 4,
            interpolation_reads: 1,
        };
        let mut b = a;
        b += a;
        assert_eq!(b, a + a);
        assert_eq!(b.multiplies, 6);
    }

    #[test]
    fn fit_recovers_exact_power_law() {
        let s: Vec<(f64, f64)> = [2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&x| (x, 3.0 * x * x))
            .collect();
        let (slope, res) = fit_loglog(&s).unwrap();
        assert!((slope - 2.0).abs() < 1e-12 && res < 1e-12);
    }

    #[test]
    fn sweep_validation() {
        let cfg = CostConfig {
            channels: 2,
            heads: 1,
            points: 2,
        };
        let g = cubic_grids(&[1, 2, 3]);
        assert!(measure_encoder(&cfg, AttnPath::Dense, &g, RngSeed(0)).is_err());
        let g = cubic_grids(&[1, 3, 2, 4]);
        assert!(measure_encoder(&cfg, AttnPath::Dense, &g, RngSeed(0)).is_err());
    }
}

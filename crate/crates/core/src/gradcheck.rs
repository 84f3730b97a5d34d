//! Central finite-difference oracle for the hand-written backward passes.
//!
//! The oracle only ever evaluates forward functions. Relative error per
//! coordinate is `|a − n| / max(|a|, |n|, 1e-8)` for analytic `a` and numeric
//! `n`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::blocks::{Model, ModelConfig};
use crate::deform::{self, InitMode, StDeformParams};
use crate::dense::{self, DenseAttnParams};
use crate::error::{Error, Result};
use crate::interp::{self, Point3};
use crate::linalg::dot;
use crate::params::{collect, join, ParamSet};
use crate::tensor::{ClipFeatureMap, GridDims, RngSeed, SeededRng, Tensor};

/// Minimum distance of any sampled point from a lattice plane.
pub const LATTICE_CLEARANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Pass iff the maximum relative error is at most this.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

/// Comparison of one parameter group or input.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradReport {
    pub group: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `g[i] = (f(θ + h·e_i) − f(θ − h·e_i)) / 2h`.
pub fn central_diff(mut f: impl FnMut(&Tensor) -> f64, theta: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    let mut probe = theta.clone();
    let mut grad = Tensor::zeros(theta.shape())?;
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric {
                group: "theta".to_string(),
                coordinate: i,
            });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

fn perturb<P: ParamSet>(p: &mut P, group: &str, index: usize, value: f64) -> f64 {
    let mut old = f64::NAN;
    p.visit_mut("", &mut |name, v| {
        if name == group {
            old = v[index];
            v[index] = value;
        }
    });
    old
}

/// Compares `backward(instance)` against central differences of
/// `forward(instance)`, one report per group that `backward` returns.
pub fn check<P, G, F, B>(
    instance: &P,
    forward: F,
    backward: B,
    config: &GradCheckConfig,
) -> Result<Vec<GradReport>>
where
    P: ParamSet + Clone,
    G: ParamSet,
    F: Fn(&P) -> f64,
    B: Fn(&P) -> G,
{
    let a = forward(instance);
    let b = forward(instance);
    if a.to_bits() != b.to_bits() {
        return Err(Error::Contract(
            "forward pass is not deterministic".to_string(),
        ));
    }
    let analytic = collect(&backward(instance));
    let mut work = instance.clone();
    let h = config.step;
    let mut reports = Vec::with_capacity(analytic.len());
    for (group, grad) in analytic {
        let mut report = GradReport {
            group: group.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            pass: true,
        };
        for (i, &a) in grad.iter().enumerate() {
            let orig = perturb(&mut work, &group, i, f64::NAN);
            if orig.is_nan() {
                return Err(Error::Contract(alloc::format!(
                    "backward returned unknown group `{group}`"
                )));
            }
            perturb(&mut work, &group, i, orig + h);
            let plus = forward(&work);
            perturb(&mut work, &group, i, orig - h);
            let minus = forward(&work);
            perturb(&mut work, &group, i, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric {
                    group,
                    coordinate: i,
                });
            }
            let n = (plus - minus) / (2.0 * h);
            let rel = relative_error(a, n);
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = i;
            }
        }
        report.pass = report.max_rel_error <= config.tolerance;
        reports.push(report);
    }
    Ok(reports)
}

/// A random instance of one module with a scalar loss and its gradient.
pub trait Problem: ParamSet + Clone {
    fn loss(&self) -> f64;
    fn gradient(&self) -> Self;
}

pub fn check_problem<P: Problem>(p: &P, config: &GradCheckConfig) -> Result<Vec<GradReport>> {
    check(p, P::loss, P::gradient, config)
}

/// `upstream · sample(grid, point)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpProblem {
    pub grid: ClipFeatureMap,
    pub point: Vec<f64>,
    pub upstream: Vec<f64>,
}

impl InterpProblem {
    pub fn random(seed: RngSeed) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let dims = GridDims::new(2, 2, 2);
        let grid = ClipFeatureMap::randn(dims, 3, &mut rng, 1.0)?;
        let upstream = rng.normal_vec(3, 0.0, 1.0);
        loop {
            let p = Point3::new(
                rng.uniform(-0.8, 1.8),
                rng.uniform(-0.8, 1.8),
                rng.uniform(-0.8, 1.8),
            );
            if p.lattice_clearance() >= LATTICE_CLEARANCE {
                return Ok(InterpProblem {
                    grid,
                    point: p.to_array().to_vec(),
                    upstream,
                });
            }
        }
    }

    fn p(&self) -> Point3 {
        Point3::new(self.point[0], self.point[1], self.point[2])
    }
}

impl ParamSet for InterpProblem {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "grid"), self.grid.data());
        f(&join(prefix, "point"), &self.point);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "grid"), self.grid.data_mut());
        f(&join(prefix, "point"), &mut self.point);
    }
}

impl Problem for InterpProblem {
    fn loss(&self) -> f64 {
        dot(&self.upstream, &interp::sample(&self.grid, self.p()))
    }

    fn gradient(&self) -> Self {
        let g =
            interp::sample_backward(&self.grid, self.p(), &self.upstream).expect("valid instance");
        let mut out = self.clone();
        out.grid.data_mut().fill(0.0);
        for (cell, v) in g.grid {
            for (d, x) in out.grid.cell_mut(cell).iter_mut().zip(v) {
                *d += x;
            }
        }
        out.point = g.point.to_array().to_vec();
        out
    }
}

/// `upstream · multi_head_attn(params, z_q, keys)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseProblem {
    pub params: DenseAttnParams,
    pub z_q: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub upstream: Vec<f64>,
}

impl DenseProblem {
    pub fn random(seed: RngSeed, heads: usize, channels: usize, num_keys: usize) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let params =
            DenseAttnParams::random(heads, channels, &mut rng, 1.0 / libm::sqrt(channels as f64))?;
        Ok(DenseProblem {
            params,
            z_q: rng.normal_vec(channels, 0.0, 1.0),
            keys: (0..num_keys)
                .map(|_| rng.normal_vec(channels, 0.0, 1.0))
                .collect(),
            upstream: rng.normal_vec(channels, 0.0, 1.0),
        })
    }
}

impl ParamSet for DenseProblem {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.params.visit(&join(prefix, "params"), f);
        f(&join(prefix, "z_q"), &self.z_q);
        for (i, k) in self.keys.iter().enumerate() {
            f(&join(prefix, &alloc::format!("key{i}")), k);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.params.visit_mut(&join(prefix, "params"), f);
        f(&join(prefix, "z_q"), &mut self.z_q);
        for (i, k) in self.keys.iter_mut().enumerate() {
            f(&join(prefix, &alloc::format!("key{i}")), k);
        }
    }
}

impl Problem for DenseProblem {
    fn loss(&self) -> f64 {
        let (out, _) =
            dense::multi_head_attn(&self.params, &self.z_q, &self.keys).expect("valid instance");
        dot(&self.upstream, &out)
    }

    fn gradient(&self) -> Self {
        let g =
            dense::multi_head_attn_backward(&self.params, &self.z_q, &self.keys, &self.upstream)
                .expect("valid instance");
        DenseProblem {
            params: g.params,
            z_q: g.z_q,
            keys: g.keys,
            upstream: self.upstream.clone(),
        }
    }
}

/// `upstream · stdeform_attn(params, z_q, p_q, map)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformProblem {
    pub params: StDeformParams,
    pub z_q: Vec<f64>,
    pub p_q: Vec<f64>,
    pub map: ClipFeatureMap,
    pub upstream: Vec<f64>,
}

impl DeformProblem {
    /// Random instance on a `2×3×3` grid whose sampled points all keep
    /// [`LATTICE_CLEARANCE`] from lattice planes. Draws are repeated until
    /// that holds.
    pub fn random(seed: RngSeed, heads: usize, channels: usize, points: usize) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let dims = GridDims::new(2, 3, 3);
        loop {
            let mut params = StDeformParams::random(
                heads,
                channels,
                points,
                &mut rng,
                1.0 / libm::sqrt(channels as f64),
            )?;
            let off_std = 0.3 / libm::sqrt(channels as f64);
            for x in params.offset_weight.data_mut() {
                *x = off_std * rng.normal();
            }
            for x in params.offset_bias.data_mut() {
                *x = rng.uniform(-1.5, 1.5);
            }
            let z_q = rng.normal_vec(channels, 0.0, 1.0);
            let p_q = Point3::new(
                rng.uniform(0.0, 2.0),
                rng.uniform(0.0, 2.0),
                rng.uniform(0.0, 1.0),
            );
            let offsets = deform::predict_offsets(&params, &z_q)?;
            if offsets
                .iter()
                .all(|&o| (p_q + o).lattice_clearance() >= LATTICE_CLEARANCE)
            {
                return Ok(DeformProblem {
                    params,
                    z_q,
                    p_q: p_q.to_array().to_vec(),
                    map: ClipFeatureMap::randn(dims, channels, &mut rng, 1.0)?,
                    upstream: rng.normal_vec(channels, 0.0, 1.0),
                });
            }
        }
    }

    fn p(&self) -> Point3 {
        Point3::new(self.p_q[0], self.p_q[1], self.p_q[2])
    }
}

impl ParamSet for DeformProblem {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.params.visit(&join(prefix, "params"), f);
        f(&join(prefix, "z_q"), &self.z_q);
        f(&join(prefix, "p_q"), &self.p_q);
        f(&join(prefix, "map"), self.map.data());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.params.visit_mut(&join(prefix, "params"), f);
        f(&join(prefix, "z_q"), &mut self.z_q);
        f(&join(prefix, "p_q"), &mut self.p_q);
        f(&join(prefix, "map"), self.map.data_mut());
    }
}

impl Problem for DeformProblem {
    fn loss(&self) -> f64 {
        let out = deform::stdeform_attn(&self.params, &self.z_q, self.p(), &self.map)
            .expect("valid instance");
        dot(&self.upstream, &out.output)
    }

    fn gradient(&self) -> Self {
        let g = deform::stdeform_attn_backward(
            &self.params,
            &self.z_q,
            self.p(),
            &self.map,
            &self.upstream,
        )
        .expect("valid instance");
        let mut map =
            ClipFeatureMap::zeros(self.map.dims(), self.map.channels()).expect("valid dims");
        for (cell, v) in g.map {
            map.cell_mut(cell).copy_from_slice(&v);
        }
        DeformProblem {
            params: g.params,
            z_q: g.z_q,
            p_q: g.p_q.to_array().to_vec(),
            map,
            upstream: self.upstream.clone(),
        }
    }
}

/// Linear readout of the decoder output embeddings of a one-encoder,
/// one-decoder model, differentiated with respect to every parameter and the
/// raw input features.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedProblem {
    pub model: Model,
    pub features: ClipFeatureMap,
    /// Fixed linear readout over the decoder embeddings; not a parameter.
    pub readout: Vec<Vec<f64>>,
}

/// Loss readout for [`ComposedProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// Plain sum of every embedding coordinate.
    Sum,
    /// Seeded `N(0, 1)` weight per embedding coordinate.
    Random,
}

impl ComposedProblem {
    /// `2×2×2` grid, `C = 6`, `M = 1`, `K = 2`, `N = 4`. Every parameter is
    /// randomized (layer-norm scales around 1), the loss is a seeded random
    /// readout of the embeddings, and draws are repeated until all
    /// sampled points keep [`LATTICE_CLEARANCE`] from lattice planes.
    pub fn random(seed: RngSeed) -> Result<Self> {
        Self::with_readout(seed, 4, Readout::Random)
    }

    /// Same construction with `num_queries` object queries and a chosen readout.
    pub fn with_readout(seed: RngSeed, num_queries: usize, readout: Readout) -> Result<Self> {
        let mut cfg = ModelConfig::desk();
        cfg.grid = GridDims::new(2, 2, 2);
        cfg.input_channels = 6;
        cfg.channels = 6;
        cfg.heads = 1;
        cfg.points = 2;
        cfg.layers_enc = 1;
        cfg.layers_dec = 1;
        cfg.num_queries = num_queries;
        cfg.ffn_hidden = 12;
        cfg.init = InitMode::Random;
        let mut rng = SeededRng::new(seed);
        loop {
            let mut model = Model::init(cfg.clone(), &mut rng)?;
            let (c, hidden) = (cfg.channels as f64, cfg.ffn_hidden as f64);
            model.visit_mut("", &mut |name, v| {
                let (center, std) = if name.ends_with("gamma") {
                    (1.0, 0.3)
                } else if name.ends_with("offset_bias") {
                    (0.0, 0.25)
                } else if name.ends_with("offset_weight") {
                    (0.0, 0.05)
                } else if name.ends_with("fc2.weight") {
                    (0.0, 1.0 / libm::sqrt(hidden))
                } else {
                    (0.0, 1.0 / libm::sqrt(c))
                };
                for x in v.iter_mut() {
                    *x = center + std * rng.normal();
                }
            });
            let features = ClipFeatureMap::randn(cfg.grid, cfg.input_channels, &mut rng, 1.0)?;
            let readout = (0..cfg.num_queries)
                .map(|_| match readout {
                    Readout::Sum => vec![1.0; cfg.channels],
                    Readout::Random => rng.normal_vec(cfg.channels, 0.0, 1.0),
                })
                .collect();
            let p = ComposedProblem {
                model,
                features,
                readout,
            };
            if p.min_clearance()? >= LATTICE_CLEARANCE {
                return Ok(p);
            }
        }
    }

    /// Smallest lattice clearance over every point sampled in a forward pass.
    pub fn min_clearance(&self) -> Result<f64> {
        let out = self.model.forward(&self.features)?;
        let grid = self.model.config.grid;
        let cells = crate::blocks::cell_points(grid);
        let mut worst = f64::INFINITY;
        for plans in &out.encoder_plans {
            for (plan, &r) in plans.iter().zip(&cells) {
                for &o in &plan.offsets {
                    worst = worst.min((r + o).lattice_clearance());
                }
            }
        }
        for (plans, refs) in out.decoder_plans.iter().zip(&out.decoder_refs) {
            for (plan, &r) in plans.iter().zip(refs) {
                for &o in &plan.offsets {
                    worst = worst.min((r + o).lattice_clearance());
                }
            }
        }
        Ok(worst)
    }
}

impl ParamSet for ComposedProblem {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.model.visit(&join(prefix, "model"), f);
        self.features.visit(&join(prefix, "features"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.model.visit_mut(&join(prefix, "model"), f);
        self.features.visit_mut(&join(prefix, "features"), f);
    }
}

impl Problem for ComposedProblem {
    fn loss(&self) -> f64 {
        let out = self.model.forward(&self.features).expect("valid instance");
        out.embeddings
            .iter()
            .flatten()
            .zip(self.readout.iter().flatten())
            .map(|(e, r)| e * r)
            .sum()
    }

    fn gradient(&self) -> Self {
        let (model, features) = self
            .model
            .backward(&self.features, &self.readout)
            .expect("valid instance");
        ComposedProblem {
            model,
            features,
            readout: self.readout.clone(),
        }
    }
}

/// Modules with a hand-written backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Module {
    Interp,
    Dense,
    Stdeform,
    Composed,
}

impl Module {
    pub const ALL: [Module; 4] = [
        Module::Interp,
        Module::Dense,
        Module::Stdeform,
        Module::Composed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Interp => "interp",
            Module::Dense => "dense",
            Module::Stdeform => "stdeform",
            Module::Composed => "composed",
        }
    }
}

/// Reports for one seeded instance of a module.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InstanceReport {
    pub module: Module,
    pub instance: usize,
    pub seed: u64,
    pub reports: Vec<GradReport>,
}

impl InstanceReport {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }

    pub fn worst(&self) -> Option<&GradReport> {
        self.reports
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Checks one seeded instance. Instance shapes cycle through
/// `M ∈ {1, 2}`, `C ∈ {2, 4, 8}`, `N_k ∈ {1, 3, 8}` (dense) and
/// `M ∈ {1, 2}`, `C ∈ {2, 4}`, `K ∈ {1, 3, 4}` (deformable).
pub fn check_instance(
    module: Module,
    index: usize,
    seed: RngSeed,
    config: &GradCheckConfig,
) -> Result<InstanceReport> {
    let s = seed.derive(index as u64);
    let reports = match module {
        Module::Interp => check_problem(&InterpProblem::random(s)?, config)?,
        Module::Dense => {
            let heads = 1 + index % 2;
            let channels = [2, 4, 8][(index / 2) % 3];
            let keys = [1, 3, 8][index % 3];
            check_problem(&DenseProblem::random(s, heads, channels, keys)?, config)?
        }
        Module::Stdeform => {
            let heads = 1 + index % 2;
            let channels = [2, 4][(index / 2) % 2];
            let points = [1, 3, 4][index % 3];
            check_problem(&DeformProblem::random(s, heads, channels, points)?, config)?
        }
        Module::Composed => check_problem(&ComposedProblem::random(s)?, config)?,
    };
    Ok(InstanceReport {
        module,
        instance: index,
        seed: s.0,
        reports,
    })
}

pub fn run_module(
    module: Module,
    seed: RngSeed,
    instances: usize,
    config: &GradCheckConfig,
) -> Result<Vec<InstanceReport>> {
    (0..instances)
        .map(|i| check_instance(module, i, seed, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::vector(&[1.0, 2.0]);
        let g = central_diff(|t| t.data().iter().map(|x| x * x).sum(), &theta, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = central_diff(|_| 3.0, &Tensor::vector(&[0.1, 0.2, 0.3]), 1e-5).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sine_matches_cosine() {
        let g = central_diff(|t| libm::sin(t.data()[0]), &Tensor::vector(&[0.3]), 1e-5).unwrap();
        assert!((g.data()[0] - libm::cos(0.3)).abs() < 1e-9);
    }

    #[test]
    fn non_finite_evaluation_names_coordinate() {
        let err = central_diff(
            |t| if t.data()[1] > 2.0 { f64::NAN } else { 0.0 },
            &Tensor::vector(&[0.0, 2.0]),
            1e-5,
        )
        .unwrap_err();
        assert_eq!(
            err,
            Error::Numeric {
                group: "theta".to_string(),
                coordinate: 1
            }
        );
    }

    #[test]
    fn nondeterministic_forward_is_a_contract_error() {
        let calls = core::cell::Cell::new(0u32);
        let err = check(
            &vec![1.0],
            |_: &Vec<f64>| {
                calls.set(calls.get() + 1);
                calls.get() as f64
            },
            |p: &Vec<f64>| p.clone(),
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}

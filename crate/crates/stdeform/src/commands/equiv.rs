//! Deformable attention with one sampling point per cell against dense attention.

use serde::Serialize;
use stdeform_core::deform::dense_equivalence_construct;
use stdeform_core::dense::{multi_head_attn, DenseAttnParams};
use stdeform_core::interp::Point3;
use stdeform_core::{ClipFeatureMap, GridDims, RngSeed, SeededRng};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{csv_table, CsvTable, Report};

pub const TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct EquivArgs {
    pub channels: Option<usize>,
    pub heads: Option<Vec<usize>>,
    pub max_t: usize,
    pub max_h: usize,
    pub max_w: usize,
    /// Sampling points per head; must equal `T·H·W` of every grid.
    pub points: Option<usize>,
    /// Perturbs the copied attention logits after construction.
    pub corrupt_weights: bool,
}

impl Default for EquivArgs {
    fn default() -> Self {
        EquivArgs {
            channels: None,
            heads: None,
            max_t: 3,
            max_h: 4,
            max_w: 4,
            points: None,
            corrupt_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivCase {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub heads: usize,
    pub points: usize,
    pub seed: u64,
    /// Largest output difference against dense attention.
    pub max_abs_diff: f64,
    /// Largest attention-weight difference against dense attention.
    pub max_weight_diff: f64,
    pub normalization_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivReport {
    pub tolerance: f64,
    pub channels: usize,
    pub corrupt_weights: bool,
    pub max_abs_diff: f64,
    pub passed: bool,
    pub cases: Vec<EquivCase>,
}

impl Report for EquivReport {
    fn passed(&self) -> bool {
        self.passed
    }

    fn csv(&self) -> CliResult<Vec<CsvTable>> {
        Ok(vec![csv_table(None, &self.cases)?])
    }
}

/// Grids to sweep: the config grid if the file names any extent, otherwise
/// every grid up to the maxima.
fn grids(cfg: &RunConfig, args: &EquivArgs) -> Vec<GridDims> {
    if ["t", "h", "w"].iter().any(|k| cfg.is_set(k)) {
        return vec![cfg.model.grid];
    }
    let mut v = Vec::new();
    for t in 1..=args.max_t {
        for h in 1..=args.max_h {
            for w in 1..=args.max_w {
                v.push(GridDims::new(t, h, w));
            }
        }
    }
    v
}

pub fn run(cfg: &RunConfig, args: &EquivArgs) -> CliResult<EquivReport> {
    let channels = cfg.pick(args.channels, "c", 4);
    let heads = match (&args.heads, cfg.is_set("heads")) {
        (Some(h), _) => h.clone(),
        (None, true) => vec![cfg.model.heads],
        (None, false) => vec![1, 2],
    };
    let grids = grids(cfg, args);
    if grids.is_empty() || heads.is_empty() {
        return Err(CliError::config("empty equivalence sweep"));
    }
    let points = args
        .points
        .or_else(|| cfg.is_set("points").then_some(cfg.model.points));
    if let Some(k) = points {
        if let Some(g) = grids.iter().find(|g| g.cells() != k) {
            return Err(CliError::config(format!(
                "equivalence needs K = HWT; K = {k} but grid {}x{}x{} has {} cells",
                g.t,
                g.h,
                g.w,
                g.cells()
            )));
        }
    }
    if let Some(&m) = heads
        .iter()
        .find(|&&m| m == 0 || !channels.is_multiple_of(m))
    {
        return Err(CliError::config(format!(
            "channels {channels} not divisible by heads {m}"
        )));
    }
    let base = RngSeed(cfg.seed);
    let mut cases = Vec::new();
    for dims in &grids {
        for &m in &heads {
            let seed = base.derive(cases.len() as u64);
            cases.push(run_case(*dims, m, channels, seed, args.corrupt_weights)?);
        }
    }
    let max_abs_diff = cases.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max);
    Ok(EquivReport {
        tolerance: TOLERANCE,
        channels,
        corrupt_weights: args.corrupt_weights,
        max_abs_diff,
        passed: cases.iter().all(|c| c.pass),
        cases,
    })
}

fn run_case(
    dims: GridDims,
    heads: usize,
    channels: usize,
    seed: RngSeed,
    corrupt: bool,
) -> CliResult<EquivCase> {
    let mut rng = SeededRng::new(seed);
    let x = ClipFeatureMap::randn(dims, channels, &mut rng, 1.0)?;
    let dense = DenseAttnParams::random(heads, channels, &mut rng, 1.0 / (channels as f64).sqrt())?;
    let z = rng.normal_vec(channels, 0.0, 1.0);
    let pq = Point3::new(
        rng.uniform(0.0, (dims.w - 1) as f64),
        rng.uniform(0.0, (dims.h - 1) as f64),
        rng.uniform(0.0, (dims.t - 1) as f64),
    );
    let (mut params, mut out) = dense_equivalence_construct(&x, &dense, &z, pq, dims.cells())?;
    if corrupt {
        params.attn_bias.data_mut()[0] += 1.0;
        out = stdeform_core::deform::stdeform_attn(&params, &z, pq, &x)?;
    }
    let keys: Vec<&[f64]> = x.cells().collect();
    let (want, weights) = multi_head_attn(&dense, &z, &keys)?;
    let diff = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    };
    let max_abs_diff = diff(&out.output, &want);
    Ok(EquivCase {
        t: dims.t,
        h: dims.h,
        w: dims.w,
        heads,
        points: dims.cells(),
        seed: seed.0,
        max_abs_diff,
        max_weight_diff: diff(&out.plan.weights, weights.as_slice()),
        normalization_error: out
            .plan
            .normalization_error()
            .max(weights.normalization_error()),
        pass: max_abs_diff <= TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn default_sweep_passes() {
        let r = run(&RunConfig::new(Preset::Desk), &EquivArgs::default()).unwrap();
        assert_eq!(r.cases.len(), 96);
        assert!(r.passed, "max diff {}", r.max_abs_diff);
    }

    #[test]
    fn single_cell_grid_is_exact() {
        let cfg = RunConfig::parse("t=1\nh=1\nw=1", Preset::Desk).unwrap();
        let r = run(
            &cfg,
            &EquivArgs {
                channels: Some(4),
                ..EquivArgs::default()
            },
        )
        .unwrap();
        assert!(r.cases.iter().all(|c| c.max_abs_diff == 0.0));
    }

    #[test]
    fn explicit_mismatched_points_is_a_config_error() {
        let args = EquivArgs {
            points: Some(5),
            ..EquivArgs::default()
        };
        assert!(matches!(
            run(&RunConfig::new(Preset::Desk), &args),
            Err(CliError::Config(_))
        ));
        let cfg = RunConfig::parse("t=1\nh=2\nw=3\npoints=6", Preset::Desk).unwrap();
        assert!(
            run(
                &cfg,
                &EquivArgs {
                    channels: Some(4),
                    ..EquivArgs::default()
                }
            )
            .unwrap()
            .passed
        );
    }

    #[test]
    fn corruption_fails() {
        let args = EquivArgs {
            corrupt_weights: true,
            ..EquivArgs::default()
        };
        assert!(!run(&RunConfig::new(Preset::Desk), &args).unwrap().passed);
    }
}

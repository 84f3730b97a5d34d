//! Instrumented multiply counts of encoder self-attention over a grid sweep.

use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use stdeform_core::complexity::{
    cubic_grids, measure_encoder, AttnPath, CostConfig, ScalingPoint, ScalingReport,
};
use stdeform_core::RngSeed;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{csv_table, CsvTable, Report};

pub const DENSE_BAND: (f64, f64) = (1.9, 2.1);
pub const DEFORMABLE_BAND: (f64, f64) = (0.95, 1.1);

/// `--path` filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathSel {
    #[default]
    Both,
    One(AttnPath),
}

impl FromStr for PathSel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "both" => Ok(PathSel::Both),
            "dense" => Ok(PathSel::One(AttnPath::Dense)),
            "deformable" => Ok(PathSel::One(AttnPath::Deformable)),
            _ => Err(format!(
                "unknown path `{s}` (expected both, dense or deformable)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingArgs {
    pub path: PathSel,
    /// Side lengths of the cubic grids.
    pub sides: Vec<usize>,
    pub channels: Option<usize>,
    pub heads: Option<usize>,
    pub points: Option<usize>,
}

impl Default for ScalingArgs {
    fn default() -> Self {
        ScalingArgs {
            path: PathSel::Both,
            sides: vec![2, 3, 4, 5, 6],
            channels: None,
            heads: None,
            points: None,
        }
    }
}

/// One path's sweep, its fit and how it compares with the closed form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathReport {
    #[serde(flatten)]
    pub report: ScalingReport,
    /// Slope band the path must fall in.
    pub band: (f64, f64),
    /// Every measured count equals the analytic formula.
    pub counts_exact: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingSummary {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub passed: bool,
    pub paths: Vec<PathReport>,
}

impl Report for ScalingSummary {
    fn passed(&self) -> bool {
        self.passed
    }

    fn csv(&self) -> CliResult<Vec<CsvTable>> {
        if let [one] = self.paths.as_slice() {
            return Ok(vec![csv_table(None, &one.report.points)?]);
        }
        self.paths
            .iter()
            .map(|p| csv_table(Some(p.report.path.name()), &p.report.points))
            .collect()
    }
}

fn exact(cfg: &CostConfig, path: AttnPath, points: &[ScalingPoint]) -> CliResult<bool> {
    for p in points {
        let want = cfg.analytic(path, p.cells as usize)?;
        if (want.multiplies, want.adds, want.interpolation_reads)
            != (p.multiplies, p.adds, p.interp_reads)
        {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Runs the sweep. Wall-clock time per path goes to standard error only.
pub fn run(cfg: &RunConfig, args: &ScalingArgs) -> CliResult<ScalingSummary> {
    if args.sides.len() < 4 {
        return Err(CliError::config(
            "scaling sweep needs at least 4 grid sizes",
        ));
    }
    if args.sides.windows(2).any(|w| w[1] <= w[0]) || args.sides.contains(&0) {
        return Err(CliError::config(
            "grid sides must be positive and strictly increasing",
        ));
    }
    let cost = CostConfig {
        channels: cfg.pick(args.channels, "c", 1),
        heads: cfg.pick(args.heads, "heads", 1),
        points: cfg.pick(args.points, "points", 16),
    };
    if cost.heads == 0 || !cost.channels.is_multiple_of(cost.heads) || cost.points == 0 {
        return Err(CliError::config(
            "channels must be a positive multiple of heads, points positive",
        ));
    }
    let paths = match args.path {
        PathSel::Both => vec![AttnPath::Dense, AttnPath::Deformable],
        PathSel::One(p) => vec![p],
    };
    let grids = cubic_grids(&args.sides);
    let mut out = Vec::new();
    for path in paths {
        let start = Instant::now();
        let report = measure_encoder(&cost, path, &grids, RngSeed(cfg.seed))?;
        eprintln!(
            "scaling {}: {:.3} s",
            path.name(),
            start.elapsed().as_secs_f64()
        );
        let band = match path {
            AttnPath::Dense => DENSE_BAND,
            AttnPath::Deformable => DEFORMABLE_BAND,
        };
        let counts_exact = exact(&cost, path, &report.points)?;
        let passed = counts_exact && report.slope >= band.0 && report.slope <= band.1;
        out.push(PathReport {
            report,
            band,
            counts_exact,
            passed,
        });
    }
    Ok(ScalingSummary {
        channels: cost.channels,
        heads: cost.heads,
        points: cost.points,
        passed: out.iter().all(|p| p.passed),
        paths: out,
    })
}

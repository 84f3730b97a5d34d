//! How close initial attention weights are to uniform as the key count grows.

use serde::Serialize;
use stdeform_core::dense::{uniformity_at_init, UniformityStat};
use stdeform_core::{RngSeed, SeededRng};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{csv_table, CsvTable, Report};

pub const MIN_TRIALS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct UniformArgs {
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub head_dim: usize,
    pub zero_logits: bool,
}

impl Default for UniformArgs {
    fn default() -> Self {
        UniformArgs {
            sizes: vec![64, 512, 4096],
            trials: MIN_TRIALS,
            head_dim: 64,
            zero_logits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformReport {
    pub trials: usize,
    pub head_dim: usize,
    pub zero_logits: bool,
    /// Statistic at the largest key count is at most the one at the smallest.
    pub non_increasing: bool,
    pub passed: bool,
    pub stats: Vec<UniformityStat>,
}

impl Report for UniformReport {
    fn passed(&self) -> bool {
        self.passed
    }

    fn csv(&self) -> CliResult<Vec<CsvTable>> {
        Ok(vec![csv_table(None, &self.stats)?])
    }
}

pub fn run(cfg: &RunConfig, args: &UniformArgs) -> CliResult<UniformReport> {
    if args.trials < MIN_TRIALS {
        return Err(CliError::config(format!(
            "need at least {MIN_TRIALS} trials, got {}",
            args.trials
        )));
    }
    if args.sizes.len() < 2 {
        return Err(CliError::config("need at least 2 key counts"));
    }
    if args.sizes.iter().any(|&n| n < 2) || args.head_dim == 0 {
        return Err(CliError::config(
            "key counts must be at least 2 and head_dim positive",
        ));
    }
    let base = RngSeed(cfg.seed);
    let stats = args
        .sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut rng = SeededRng::new(base.derive(i as u64));
            uniformity_at_init(n, args.head_dim, args.trials, &mut rng, args.zero_logits)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let by_size = |pick: fn(&UniformityStat, &UniformityStat) -> bool| {
        stats
            .iter()
            .reduce(|a, b| if pick(a, b) { a } else { b })
            .map(|s| s.scaled_deviation)
    };
    let smallest = by_size(|a, b| a.num_keys <= b.num_keys).unwrap_or(0.0);
    let largest = by_size(|a, b| a.num_keys >= b.num_keys).unwrap_or(0.0);
    let non_increasing = largest <= smallest;
    Ok(UniformReport {
        trials: args.trials,
        head_dim: args.head_dim,
        zero_logits: args.zero_logits,
        non_increasing,
        passed: non_increasing,
        stats,
    })
}

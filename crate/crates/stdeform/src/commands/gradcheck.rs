//! Finite-difference checks of every hand-written backward pass.

use std::str::FromStr;

use serde::Serialize;
use stdeform_core::gradcheck::{run_module, GradCheckConfig, InstanceReport, Module};
use stdeform_core::RngSeed;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{csv_table, CsvTable, Report};

/// Module filter accepted by `--module`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModuleSel {
    #[default]
    All,
    One(Module),
}

impl FromStr for ModuleSel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(ModuleSel::All);
        }
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .map(ModuleSel::One)
            .ok_or_else(|| {
                format!("unknown module `{s}` (expected all, interp, dense, stdeform or composed)")
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckArgs {
    pub module: ModuleSel,
    pub tolerance: f64,
    pub step: f64,
    pub instances: usize,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        let d = GradCheckConfig::default();
        GradcheckArgs {
            module: ModuleSel::All,
            tolerance: d.tolerance,
            step: d.step,
            instances: 10,
        }
    }
}

/// The single worst group across all instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Worst {
    pub module: Module,
    pub instance: usize,
    pub group: String,
    pub worst_index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub passed: bool,
    pub failed_instances: usize,
    pub worst: Option<Worst>,
    pub instances: Vec<InstanceReport>,
}

#[derive(Serialize)]
struct Row<'a> {
    module: &'a str,
    instance: usize,
    seed: u64,
    group: &'a str,
    max_rel_error: f64,
    max_abs_error: f64,
    worst_index: usize,
    pass: bool,
}

impl Report for GradcheckReport {
    fn passed(&self) -> bool {
        self.passed
    }

    fn csv(&self) -> CliResult<Vec<CsvTable>> {
        let rows: Vec<Row> = self
            .instances
            .iter()
            .flat_map(|i| {
                i.reports.iter().map(move |r| Row {
                    module: i.module.name(),
                    instance: i.instance,
                    seed: i.seed,
                    group: &r.group,
                    max_rel_error: r.max_rel_error,
                    max_abs_error: r.max_abs_error,
                    worst_index: r.worst_index,
                    pass: r.pass,
                })
            })
            .collect();
        Ok(vec![csv_table(None, &rows)?])
    }
}

/// Seed of one module's instances; independent of which modules are selected.
pub fn module_seed(seed: u64, module: Module) -> RngSeed {
    let index = Module::ALL
        .iter()
        .position(|&m| m == module)
        .expect("listed module");
    RngSeed(seed).derive(index as u64)
}

pub fn run(cfg: &RunConfig, args: &GradcheckArgs) -> CliResult<GradcheckReport> {
    if !(args.tolerance > 0.0 && args.tolerance.is_finite()) {
        return Err(CliError::config("tolerance must be positive"));
    }
    if !(args.step > 0.0 && args.step.is_finite()) {
        return Err(CliError::config("step must be positive"));
    }
    if args.instances == 0 {
        return Err(CliError::config("need at least one instance"));
    }
    let check = GradCheckConfig {
        step: args.step,
        tolerance: args.tolerance,
    };
    let modules: Vec<Module> = match args.module {
        ModuleSel::All => Module::ALL.to_vec(),
        ModuleSel::One(m) => vec![m],
    };
    let mut instances = Vec::new();
    for m in modules {
        instances.extend(run_module(
            m,
            module_seed(cfg.seed, m),
            args.instances,
            &check,
        )?);
    }
    let worst = instances
        .iter()
        .filter_map(|i| i.worst().map(|r| (i, r)))
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .map(|(i, r)| Worst {
            module: i.module,
            instance: i.instance,
            group: r.group.clone(),
            worst_index: r.worst_index,
            max_rel_error: r.max_rel_error,
            max_abs_error: r.max_abs_error,
        });
    let failed_instances = instances.iter().filter(|i| !i.passed()).count();
    Ok(GradcheckReport {
        tolerance: args.tolerance,
        step: args.step,
        passed: failed_instances == 0,
        failed_instances,
        worst,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn module_names_parse() {
        assert_eq!("all".parse::<ModuleSel>().unwrap(), ModuleSel::All);
        assert_eq!(
            "interp".parse::<ModuleSel>().unwrap(),
            ModuleSel::One(Module::Interp)
        );
        assert!("nope".parse::<ModuleSel>().is_err());
    }

    #[test]
    fn restricts_to_one_module() {
        let args = GradcheckArgs {
            module: ModuleSel::One(Module::Interp),
            instances: 3,
            ..GradcheckArgs::default()
        };
        let r = run(&RunConfig::new(Preset::Desk), &args).unwrap();
        assert_eq!(r.instances.len(), 3);
        assert!(r.instances.iter().all(|i| i.module == Module::Interp));
        assert!(r.passed);
    }

    #[test]
    fn round_off_floor_fails_tiny_tolerance() {
        let args = GradcheckArgs {
            module: ModuleSel::One(Module::Dense),
            tolerance: 1e-12,
            instances: 2,
            ..GradcheckArgs::default()
        };
        let r = run(&RunConfig::new(Preset::Desk), &args).unwrap();
        assert!(!r.passed);
        assert!(r.worst.unwrap().max_rel_error > 1e-12);
    }

    #[test]
    fn rejects_bad_settings() {
        let cfg = RunConfig::new(Preset::Desk);
        for a in [
            GradcheckArgs {
                tolerance: 0.0,
                ..GradcheckArgs::default()
            },
            GradcheckArgs {
                step: -1.0,
                ..GradcheckArgs::default()
            },
            GradcheckArgs {
                instances: 0,
                ..GradcheckArgs::default()
            },
        ] {
            assert!(matches!(run(&cfg, &a), Err(CliError::Config(_))));
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stdeform::commands::{demo, equiv, gradcheck, scaling, uniform};
use stdeform::config::{Preset, RunConfig};
use stdeform::error::{verdict, CliResult};
use stdeform::output::{Format, Report, Sink};

#[derive(Parser)]
#[command(
    name = "stdeform",
    version,
    about = "Verification suites for spatio-temporal deformable attention"
)]
struct Cli {
    /// Flat `key = value` model configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report destination; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "json")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deformable attention with K = HWT against dense attention.
    Equiv(EquivFlags),
    /// Finite-difference checks of every backward pass.
    Gradcheck(GradcheckFlags),
    /// Multiply counts and log-log slopes over a grid sweep.
    Scaling(ScalingFlags),
    /// Deviation of initial attention weights from uniform.
    UniformInit(UniformFlags),
    /// Seeded forward pass and a short descent run.
    Demo(DemoFlags),
}

#[derive(Args)]
struct EquivFlags {
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    heads: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3)]
    max_t: usize,
    #[arg(long, default_value_t = 4)]
    max_h: usize,
    #[arg(long, default_value_t = 4)]
    max_w: usize,
    #[arg(long)]
    points: Option<usize>,
    /// Perturb the copied attention logits; the run must then fail.
    #[arg(long)]
    corrupt_weights: bool,
}

#[derive(Args)]
struct GradcheckFlags {
    /// all, interp, dense, stdeform or composed.
    #[arg(long, default_value = "all")]
    module: gradcheck::ModuleSel,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 10)]
    instances: usize,
}

#[derive(Args)]
struct ScalingFlags {
    /// both, dense or deformable.
    #[arg(long, default_value = "both")]
    path: scaling::PathSel,
    /// Cubic grid side lengths.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6")]
    sides: Vec<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args)]
struct UniformFlags {
    #[arg(long, value_delimiter = ',', default_value = "64,512,4096")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = uniform::MIN_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long)]
    zero_logits: bool,
}

#[derive(Args)]
struct DemoFlags {
    /// desk or paper; replaces the config file's model settings.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
}

fn emit<R: Report>(sink: &Sink, report: &R) -> CliResult<ExitCode> {
    for path in sink.emit(report)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(verdict(report.passed()))
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, Preset::Desk)?,
        None => RunConfig::new(Preset::Desk),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let sink = Sink {
        path: cli.out,
        format: cli.format,
    };
    match cli.command {
        Command::Equiv(f) => {
            let args = equiv::EquivArgs {
                channels: f.channels,
                heads: f.heads,
                max_t: f.max_t,
                max_h: f.max_h,
                max_w: f.max_w,
                points: f.points,
                corrupt_weights: f.corrupt_weights,
            };
            let r = equiv::run(&cfg, &args)?;
            eprintln!(
                "equiv: {} cases, max |diff| {:.3e}",
                r.cases.len(),
                r.max_abs_diff
            );
            emit(&sink, &r)
        }
        Command::Gradcheck(f) => {
            let args = gradcheck::GradcheckArgs {
                module: f.module,
                tolerance: f.tolerance,
                step: f.step,
                instances: f.instances,
            };
            let r = gradcheck::run(&cfg, &args)?;
            if let Some(w) = &r.worst {
                eprintln!(
                    "gradcheck: {} failing instances; worst {} #{} {}[{}] rel {:.3e} abs {:.3e}",
                    r.failed_instances,
                    w.module.name(),
                    w.instance,
                    w.group,
                    w.worst_index,
                    w.max_rel_error,
                    w.max_abs_error
                );
            }
            emit(&sink, &r)
        }
        Command::Scaling(f) => {
            let args = scaling::ScalingArgs {
                path: f.path,
                sides: f.sides,
                channels: f.channels,
                heads: f.heads,
                points: f.points,
            };
            let r = scaling::run(&cfg, &args)?;
            for p in &r.paths {
                eprintln!(
                    "scaling {}: slope {:.4} (band {:?}), counts exact: {}",
                    p.report.path.name(),
                    p.report.slope,
                    p.band,
                    p.counts_exact
                );
            }
            emit(&sink, &r)
        }
        Command::UniformInit(f) => {
            let args = uniform::UniformArgs {
                sizes: f.sizes,
                trials: f.trials,
                head_dim: f.head_dim,
                zero_logits: f.zero_logits,
            };
            let r = uniform::run(&cfg, &args)?;
            for s in &r.stats {
                eprintln!(
                    "uniform-init N_k={}: scaled {:.4}, unscaled {:.4e}",
                    s.num_keys, s.scaled_deviation, s.max_deviation
                );
            }
            emit(&sink, &r)
        }
        Command::Demo(f) => {
            let args = demo::DemoArgs {
                preset: f.preset,
                steps: f.steps,
                learning_rate: f.lr,
            };
            let r = demo::run(&cfg, &args)?;
            eprintln!("demo: loss {:.6} -> {:.6}", r.initial_loss, r.final_loss);
            emit(&sink, &r)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

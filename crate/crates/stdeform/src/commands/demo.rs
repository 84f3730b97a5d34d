//! One seeded encoder+decoder forward pass and a short gradient-descent smoke run.

use serde::Serialize;
use stdeform_core::blocks::{Model, ModelConfig};
use stdeform_core::complexity::OpCount;
use stdeform_core::deform::SamplingPlan;
use stdeform_core::interp::Point3;
use stdeform_core::params::{count, sgd_step};
use stdeform_core::{ClipFeatureMap, RngSeed, SeededRng};

use crate::config::{Preset, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{csv_table, CsvTable, Report};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoArgs {
    /// Replaces the whole model configuration when given.
    pub preset: Option<Preset>,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for DemoArgs {
    fn default() -> Self {
        DemoArgs {
            preset: None,
            steps: 20,
            learning_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ops {
    pub encoder: OpCount,
    pub decoder: OpCount,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossStep {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    pub seed: u64,
    pub config: ModelConfig,
    pub parameters: usize,
    pub embeddings: Vec<Vec<f64>>,
    pub reference_points: Vec<Point3>,
    pub encoder_plans: Vec<Vec<SamplingPlan>>,
    pub decoder_plans: Vec<Vec<SamplingPlan>>,
    pub ops: Ops,
    pub learning_rate: f64,
    pub loss_trace: Vec<LossStep>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub decreased: bool,
}

impl Report for DemoReport {
    fn passed(&self) -> bool {
        self.decreased
    }

    fn csv(&self) -> CliResult<Vec<CsvTable>> {
        Ok(vec![csv_table(None, &self.loss_trace)?])
    }
}

/// Mean squared error over all embedding entries and its gradient.
fn mse(embeddings: &[Vec<f64>], target: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n: usize = embeddings.iter().map(Vec::len).sum();
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let grads = embeddings
        .iter()
        .zip(target)
        .map(|(e, y)| {
            e.iter()
                .zip(y)
                .map(|(a, b)| {
                    loss += (a - b) * (a - b);
                    2.0 * (a - b) * scale
                })
                .collect()
        })
        .collect();
    (loss * scale, grads)
}

pub fn run(cfg: &RunConfig, args: &DemoArgs) -> CliResult<DemoReport> {
    if !(args.learning_rate > 0.0 && args.learning_rate.is_finite()) {
        return Err(CliError::config("learning rate must be positive"));
    }
    if args.steps == 0 {
        return Err(CliError::config("need at least one step"));
    }
    let config = match args.preset {
        Some(p) => p.model(),
        None => cfg.model.clone(),
    };
    let base = RngSeed(cfg.seed);
    let mut model = Model::init(config.clone(), &mut SeededRng::new(base.derive(0)))?;
    let mut data_rng = SeededRng::new(base.derive(1));
    let features = ClipFeatureMap::randn(config.grid, config.input_channels, &mut data_rng, 1.0)?;
    let target: Vec<Vec<f64>> = (0..config.num_queries)
        .map(|_| data_rng.normal_vec(config.channels, 0.0, 1.0))
        .collect();

    let first = model.forward(&features)?;
    let mut loss_trace = Vec::with_capacity(args.steps + 1);
    let (mut loss, mut upstream) = mse(&first.embeddings, &target);
    for step in 0..args.steps {
        loss_trace.push(LossStep { step, loss });
        let (grads, _) = model.backward(&features, &upstream)?;
        sgd_step(&mut model, &grads, args.learning_rate);
        (loss, upstream) = mse(&model.forward(&features)?.embeddings, &target);
    }
    loss_trace.push(LossStep {
        step: args.steps,
        loss,
    });
    let initial_loss = loss_trace[0].loss;
    Ok(DemoReport {
        seed: cfg.seed,
        config,
        parameters: count(&model),
        embeddings: first.embeddings,
        reference_points: first.reference_points,
        encoder_plans: first.encoder_plans,
        decoder_plans: first.decoder_plans,
        ops: Ops {
            encoder: first.encoder_ops,
            decoder: first.decoder_ops,
        },
        learning_rate: args.learning_rate,
        loss_trace,
        initial_loss,
        final_loss: loss,
        decreased: loss < initial_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_loss_decreases() {
        let r = run(&RunConfig::new(Preset::Desk), &DemoArgs::default()).unwrap();
        assert_eq!(r.loss_trace.len(), 21);
        assert!(r.decreased, "{} -> {}", r.initial_loss, r.final_loss);
        assert_eq!(r.embeddings.len(), r.config.num_queries);
    }

    #[test]
    fn json_repeats_byte_for_byte() {
        let cfg = RunConfig::new(Preset::Desk);
        let args = DemoArgs {
            steps: 2,
            ..DemoArgs::default()
        };
        assert_eq!(
            run(&cfg, &args).unwrap().json().unwrap(),
            run(&cfg, &args).unwrap().json().unwrap()
        );
    }

    #[test]
    fn mse_gradient_matches_difference() {
        let (l, g) = mse(&[vec![1.0, 3.0]], &[vec![0.0, 1.0]]);
        assert_eq!(l, 2.5);
        assert_eq!(g, vec![vec![1.0, 2.0]]);
    }
}

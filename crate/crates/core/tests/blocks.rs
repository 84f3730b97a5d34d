mod common;

use common::*;
use stdeform_core::blocks::*;
use stdeform_core::deform::InitMode;
use stdeform_core::interp::Point3;
use stdeform_core::{ClipFeatureMap, GridDims, ParamSet, RngSeed, SeededRng, Tensor};

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm(x: &[f64], ln: &LayerNorm) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * ln.gamma.data()[i] + ln.beta.data()[i])
        .collect()
}

fn linear(x: &[f64], l: &Linear) -> Vec<f64> {
    let n_in = l.in_dim();
    (0..l.out_dim())
        .map(|r| dotp(row(l.weight.data(), n_in, r), x) + l.bias.data()[r])
        .collect()
}

fn ffn(x: &[f64], f: &FeedForward) -> Vec<f64> {
    let h: Vec<f64> = linear(x, &f.fc1).into_iter().map(gelu).collect();
    linear(&h, &f.fc2)
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        grid: GridDims::new(2, 3, 3),
        input_channels: 5,
        channels: 6,
        heads: 2,
        points: 3,
        layers_enc: 2,
        layers_dec: 2,
        num_queries: 3,
        ffn_hidden: 12,
        init: InitMode::Random,
        ..ModelConfig::desk()
    }
}

/// Every parameter redrawn so that no block is an identity or a constant.
fn scrambled(cfg: ModelConfig, seed: u64) -> Model {
    let mut rng = SeededRng::new(RngSeed(seed));
    let mut m = Model::init(cfg, &mut rng).unwrap();
    m.visit_mut("", &mut |name, v| {
        for x in v.iter_mut() {
            *x = if name.ends_with("gamma") {
                1.0 + 0.2 * rng.normal()
            } else if name.ends_with("offset_bias") {
                rng.uniform(-1.5, 1.5)
            } else {
                0.4 * rng.normal()
            };
        }
    });
    m
}

#[test]
fn positional_encoding_closed_form() {
    let (t, h, w, c) = (3, 4, 5, 12);
    let pe = positional_encoding(t, h, w, c).unwrap();
    assert_eq!(pe.shape(), &[t, h, w, c]);
    let block = c / 3;
    for ti in 0..t {
        for yi in 0..h {
            for xi in 0..w {
                for ch in 0..c {
                    let pos = [xi, yi, ti][ch / block] as f64;
                    let i = (ch % block) / 2;
                    let angle = pos / 10000f64.powf(2.0 * i as f64 / block as f64);
                    let want = if ch % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    };
                    assert!((pe.get(&[ti, yi, xi, ch]).unwrap() - want).abs() < 1e-14);
                }
            }
        }
    }
    assert!(positional_encoding(1, 1, 1, 9).is_err());
    assert!(positional_encoding(1, 1, 1, 8).is_err());
}

#[test]
fn channel_projection_is_per_cell_matvec() {
    let mut rng = SeededRng::new(RngSeed(1));
    let f = rng.randn(&[2, 2, 3, 4], 0.0, 1.0).unwrap();
    let p = rng.randn(&[6, 4], 0.0, 1.0).unwrap();
    let out = channel_project(&f, &p).unwrap();
    assert_eq!((out.dims(), out.channels()), (GridDims::new(2, 2, 3), 6));
    for (cell, got) in out.cells().enumerate() {
        let v = Tensor::vector(&f.data()[cell * 4..cell * 4 + 4]);
        let want = stdeform_core::tensor::matvec(&p, &v).unwrap();
        assert!(max_abs_diff(got, want.data()) < 1e-14);
    }
    assert!(channel_project(&f, &rng.randn(&[6, 3], 0.0, 1.0).unwrap()).is_err());
}

#[test]
fn encoder_layer_matches_composed_oracles() {
    let m = scrambled(tiny_config(), 2);
    let mut rng = SeededRng::new(RngSeed(3));
    let x = ClipFeatureMap::randn(m.config.grid, 6, &mut rng, 1.0).unwrap();
    let pos = PositionalEncoding3D::new(m.config.grid, 6).unwrap();
    let layer = &m.encoder[0];
    let got = layer.forward(&x, Some(&pos)).unwrap().map;
    for (i, p) in cell_points(x.dims()).into_iter().enumerate() {
        let q = plus(x.cell(i), pos.cell(i));
        let (a, _) = deform_oracle(&layer.attn, &q, p, &x);
        let h = layer_norm(&plus(x.cell(i), &a), &layer.norm1);
        let want = layer_norm(&plus(&h, &ffn(&h, &layer.ffn)), &layer.norm2);
        assert!(max_abs_diff(got.cell(i), &want) < 1e-11, "cell {i}");
    }
}

#[test]
fn decoder_layer_matches_composed_oracles() {
    let m = scrambled(tiny_config(), 4);
    let mut rng = SeededRng::new(RngSeed(5));
    let memory = ClipFeatureMap::randn(m.config.grid, 6, &mut rng, 1.0).unwrap();
    let layer = &m.decoder[0];
    let queries = m.queries.rows();
    let got = layer.forward(&queries, &memory).unwrap();
    let g = memory.dims();
    for (i, q) in queries.iter().enumerate() {
        let (sa, _) = dense_oracle(&layer.self_attn, q, &queries);
        let s1 = layer_norm(&plus(q, &sa), &layer.norm1);
        let r = linear(&s1, &layer.reference);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let p = Point3::new(
            sig(r[0]) * (g.w - 1) as f64,
            sig(r[1]) * (g.h - 1) as f64,
            sig(r[2]) * (g.t - 1) as f64,
        );
        assert!(max_abs_diff(&got.reference_points[i].to_array(), &p.to_array()) < 1e-14);
        let (ca, _) = deform_oracle(&layer.cross_attn, &s1, p, &memory);
        let s2 = layer_norm(&plus(&s1, &ca), &layer.norm2);
        let want = layer_norm(&plus(&s2, &ffn(&s2, &layer.ffn)), &layer.norm3);
        assert!(max_abs_diff(&got.embeddings[i], &want) < 1e-11, "query {i}");
    }
}

#[test]
fn encoder_preserves_shape_for_any_depth() {
    for layers in 0..4 {
        let cfg = ModelConfig {
            layers_enc: layers,
            ..tiny_config()
        };
        let m = scrambled(cfg, 6);
        let mut rng = SeededRng::new(RngSeed(7));
        let f = ClipFeatureMap::randn(m.config.grid, 5, &mut rng, 1.0).unwrap();
        let out = m.forward(&f).unwrap();
        assert_eq!(
            (out.memory.dims(), out.memory.channels()),
            (m.config.grid, 6)
        );
        assert_eq!(out.encoder_plans.len(), layers);
        assert!(out
            .encoder_plans
            .iter()
            .all(|p| p.len() == m.config.grid.cells()));
    }
}

#[test]
fn reference_points_stay_inside_the_clip() {
    for seed in 0..30 {
        let mut m = scrambled(tiny_config(), 100 + seed);
        for l in &mut m.decoder {
            l.reference
                .weight
                .data_mut()
                .iter_mut()
                .for_each(|w| *w *= 25.0);
        }
        let mut rng = SeededRng::new(RngSeed(seed));
        let f = ClipFeatureMap::randn(m.config.grid, 5, &mut rng, 3.0).unwrap();
        let g = m.config.grid;
        for refs in m.forward(&f).unwrap().decoder_refs {
            for p in refs {
                assert!((0.0..=(g.w - 1) as f64).contains(&p.x));
                assert!((0.0..=(g.h - 1) as f64).contains(&p.y));
                assert!((0.0..=(g.t - 1) as f64).contains(&p.t));
            }
        }
    }
}

#[test]
fn zero_features_give_identical_runs() {
    let m = scrambled(tiny_config(), 8);
    let pos = PositionalEncoding3D::new(m.config.grid, 6).unwrap();
    let zeros = ClipFeatureMap::zeros(m.config.grid, 6).unwrap();
    let a = encoder_forward(&m.encoder[0], &zeros, &pos).unwrap();
    let b = encoder_forward(
        &m.encoder[0],
        &ClipFeatureMap::zeros(m.config.grid, 6).unwrap(),
        &pos,
    )
    .unwrap();
    assert_eq!(a, b);
    let raw = ClipFeatureMap::zeros(m.config.grid, 5).unwrap();
    assert_eq!(m.forward(&raw).unwrap(), m.forward(&raw).unwrap());
}

#[test]
fn positional_readd_flag_only_matters_beyond_first_layer() {
    let mut rng = SeededRng::new(RngSeed(9));
    let f = ClipFeatureMap::randn(tiny_config().grid, 5, &mut rng, 1.0).unwrap();
    let run = |layers: usize, readd: bool| {
        let cfg = ModelConfig {
            layers_enc: layers,
            readd_pos: readd,
            ..tiny_config()
        };
        scrambled(cfg, 10).forward(&f).unwrap().memory
    };
    assert_eq!(run(1, true), run(1, false));
    assert_ne!(run(2, true), run(2, false));
}

#[test]
fn decoder_stack_helper_agrees_with_layer() {
    let m = scrambled(tiny_config(), 11);
    let mut rng = SeededRng::new(RngSeed(12));
    let memory = ClipFeatureMap::randn(m.config.grid, 6, &mut rng, 1.0).unwrap();
    let (emb, refs) = decoder_forward(&m.decoder[0], &m.queries, &memory).unwrap();
    let out = m.decoder[0].forward(&m.queries.rows(), &memory).unwrap();
    assert_eq!((emb, refs), (out.embeddings, out.reference_points));
}

#[test]
fn seeded_init_is_reproducible() {
    let a = Model::init(ModelConfig::desk(), &mut SeededRng::new(RngSeed(42))).unwrap();
    let b = Model::init(ModelConfig::desk(), &mut SeededRng::new(RngSeed(42))).unwrap();
    let c = Model::init(ModelConfig::desk(), &mut SeededRng::new(RngSeed(43))).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn desk_model_weights_normalized_everywhere() {
    let m = Model::init(ModelConfig::desk(), &mut SeededRng::new(RngSeed(13))).unwrap();
    let mut rng = SeededRng::new(RngSeed(14));
    let f = ClipFeatureMap::randn(m.config.grid, 24, &mut rng, 1.0).unwrap();
    let out = m.forward(&f).unwrap();
    for plan in out.encoder_plans.iter().chain(&out.decoder_plans).flatten() {
        assert!(plan.normalization_error() <= 1e-12);
    }
    for w in out.self_weights.iter().flatten() {
        assert!(w.normalization_error() <= 1e-12);
    }
}

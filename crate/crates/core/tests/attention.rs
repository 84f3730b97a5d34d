mod common;

use common::*;
use proptest::prelude::*;
use stdeform_core::complexity::OpCount;
use stdeform_core::deform::{self, InitMode, StDeformParams};
use stdeform_core::dense::{self, DenseAttnParams};
use stdeform_core::interp::Point3;
use stdeform_core::{ClipFeatureMap, Error, GridDims, RngSeed, SeededRng};

fn random_keys(rng: &mut SeededRng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| rng.normal_vec(c, 0.0, 1.0)).collect()
}

fn random_deform(rng: &mut SeededRng, heads: usize, c: usize, k: usize) -> StDeformParams {
    let mut p = StDeformParams::random(heads, c, k, rng, 0.5).unwrap();
    for b in p.offset_bias.data_mut() {
        *b = rng.uniform(-2.5, 2.5);
    }
    p
}

#[test]
fn dense_matches_term_by_term_oracle() {
    let mut rng = SeededRng::new(RngSeed(11));
    for &(m, c, n) in &[(1, 2, 1), (1, 4, 3), (2, 4, 8), (2, 8, 5), (4, 8, 2)] {
        let p = DenseAttnParams::random(m, c, &mut rng, 0.6).unwrap();
        let z = rng.normal_vec(c, 0.0, 1.0);
        let keys = random_keys(&mut rng, n, c);
        let (out, w) = dense::multi_head_attn(&p, &z, &keys).unwrap();
        let (want, want_w) = dense_oracle(&p, &z, &keys);
        assert!(max_abs_diff(&out, &want) < 1e-12);
        for (h, ww) in want_w.iter().enumerate() {
            assert!(max_abs_diff(w.head(h), ww) < 1e-14);
        }
    }
}

#[test]
fn dense_batch_agrees_with_single_query() {
    let mut rng = SeededRng::new(RngSeed(12));
    let p = DenseAttnParams::random(2, 6, &mut rng, 0.5).unwrap();
    let keys = random_keys(&mut rng, 7, 6);
    let queries = random_keys(&mut rng, 4, 6);
    let batch = dense::forward_batch(&p, &queries, &keys, &mut OpCount::default()).unwrap();
    for (q, out) in queries.iter().zip(&batch.outputs) {
        let (single, _) = dense::multi_head_attn(&p, q, &keys).unwrap();
        assert_eq!(&single, out);
    }
}

#[test]
fn dense_rejects_bad_shapes() {
    let p = DenseAttnParams::zeros(2, 4).unwrap();
    let keys = vec![vec![0.0; 4]; 2];
    assert!(matches!(
        dense::multi_head_attn(&p, &[0.0; 3], &keys),
        Err(Error::Dimension { .. })
    ));
    let none: Vec<Vec<f64>> = Vec::new();
    assert!(dense::multi_head_attn(&p, &[0.0; 4], &none).is_err());
    assert!(DenseAttnParams::zeros(3, 4).is_err());
}

#[test]
fn deform_matches_term_by_term_oracle() {
    let mut rng = SeededRng::new(RngSeed(13));
    for &(m, c, k) in &[(1, 3, 1), (1, 4, 4), (2, 4, 3), (2, 6, 8), (3, 6, 2)] {
        let map = ClipFeatureMap::randn(GridDims::new(3, 4, 5), c, &mut rng, 1.0).unwrap();
        let p = random_deform(&mut rng, m, c, k);
        let z = rng.normal_vec(c, 0.0, 1.0);
        let pq = Point3::new(
            rng.uniform(0.0, 4.0),
            rng.uniform(0.0, 3.0),
            rng.uniform(0.0, 2.0),
        );
        let out = deform::stdeform_attn(&p, &z, pq, &map).unwrap();
        let (want, want_w) = deform_oracle(&p, &z, pq, &map);
        assert!(max_abs_diff(&out.output, &want) < 1e-12, "{:?}", (m, c, k));
        for (h, ww) in want_w.iter().enumerate() {
            assert!(max_abs_diff(out.plan.head_weights(h), ww) < 1e-14);
        }
    }
}

#[test]
fn default_init_gives_uniform_weights_and_star_offsets() {
    let mut rng = SeededRng::new(RngSeed(14));
    let p = StDeformParams::init(2, 24, 4, InitMode::Pattern, &mut rng).unwrap();
    let z = rng.normal_vec(24, 0.0, 1.0);
    let map = ClipFeatureMap::randn(GridDims::new(2, 4, 4), 24, &mut rng, 1.0).unwrap();
    let out = deform::stdeform_attn(&p, &z, Point3::new(1.5, 1.5, 0.5), &map).unwrap();
    assert!(out.plan.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
    let star = deform::star_offsets(2, 4);
    assert_eq!(out.plan.offsets, star);
    for o in &star {
        let r = (o.x * o.x + o.y * o.y + o.t * o.t).sqrt();
        assert!(r > 0.0 && r <= 2.0 + 1e-12);
    }
}

#[test]
fn equivalence_sweep_small_grids() {
    let mut rng = SeededRng::new(RngSeed(15));
    let mut instances = 0;
    for dims in all_grids(3, 4, 4) {
        for heads in [1, 2] {
            let c = 4;
            let x = ClipFeatureMap::randn(dims, c, &mut rng, 1.0).unwrap();
            let dense_p = DenseAttnParams::random(heads, c, &mut rng, 0.5).unwrap();
            let z = rng.normal_vec(c, 0.0, 1.0);
            let pq = Point3::new(
                rng.uniform(0.0, (dims.w - 1) as f64),
                rng.uniform(0.0, (dims.h - 1) as f64),
                rng.uniform(0.0, (dims.t - 1) as f64),
            );
            let (_, out) =
                deform::dense_equivalence_construct(&x, &dense_p, &z, pq, dims.cells()).unwrap();
            let (want, w) = dense::multi_head_attn(&dense_p, &z, &cells_of(&x)).unwrap();
            assert!(
                max_abs_diff(&out.output, &want) <= 1e-10,
                "{dims:?} M={heads}"
            );
            assert!(max_abs_diff(&out.plan.weights, w.as_slice()) <= 1e-12);
            instances += 1;
        }
    }
    assert!(instances >= 20);
}

#[test]
fn equivalence_requires_full_key_count() {
    let mut rng = SeededRng::new(RngSeed(16));
    let dims = GridDims::new(2, 2, 2);
    let x = ClipFeatureMap::randn(dims, 4, &mut rng, 1.0).unwrap();
    let d = DenseAttnParams::random(1, 4, &mut rng, 0.5).unwrap();
    let r = deform::dense_equivalence_construct(&x, &d, &[0.0; 4], Point3::ZERO, 7);
    assert!(matches!(r, Err(Error::Parameter(_))));
}

#[test]
fn corrupted_equivalence_weights_are_detected() {
    let mut rng = SeededRng::new(RngSeed(17));
    let dims = GridDims::new(2, 3, 3);
    let x = ClipFeatureMap::randn(dims, 4, &mut rng, 1.0).unwrap();
    let d = DenseAttnParams::random(2, 4, &mut rng, 0.5).unwrap();
    let z = rng.normal_vec(4, 0.0, 1.0);
    let (mut p, _) =
        deform::dense_equivalence_construct(&x, &d, &z, Point3::new(1.0, 1.0, 0.5), dims.cells())
            .unwrap();
    p.attn_bias.data_mut()[3] += 0.5;
    let out = deform::stdeform_attn(&p, &z, Point3::new(1.0, 1.0, 0.5), &x).unwrap();
    let (want, _) = dense::multi_head_attn(&d, &z, &cells_of(&x)).unwrap();
    assert!(max_abs_diff(&out.output, &want) > 1e-10);
}

#[test]
fn deform_touches_at_most_eight_cells_per_point() {
    let mut rng = SeededRng::new(RngSeed(18));
    for _ in 0..200 {
        let (m, k) = (
            1 + rng.uniform(0.0, 2.0) as usize,
            1 + rng.uniform(0.0, 6.0) as usize,
        );
        let dims = GridDims::new(4, 6, 6);
        let c = 2 * m;
        let map = ClipFeatureMap::randn(dims, c, &mut rng, 1.0).unwrap();
        let p = random_deform(&mut rng, m, c, k);
        let z = rng.normal_vec(c, 0.0, 1.0);
        let out = deform::stdeform_attn(&p, &z, Point3::new(2.5, 2.5, 1.5), &map).unwrap();
        assert!(out.cells_read.len() <= 8 * m * k);
        assert!(out.cells_read.windows(2).all(|w| w[0] < w[1]));
    }
}

/// Reorders every head-indexed parameter block by `perm`.
fn permute_heads(p: &StDeformParams, perm: &[usize]) -> StDeformParams {
    let (m, c, k) = (p.heads(), p.model_dim(), p.points());
    let cv = c / m;
    let mut q = p.clone();
    for (new, &old) in perm.iter().enumerate() {
        let copy = |dst: &mut [f64], src: &[f64], block: usize| {
            dst[new * block..(new + 1) * block]
                .copy_from_slice(&src[old * block..(old + 1) * block]);
        };
        copy(q.value.data_mut(), p.value.data(), cv * c);
        copy(q.output.data_mut(), p.output.data(), c * cv);
        copy(
            q.offset_weight.data_mut(),
            p.offset_weight.data(),
            3 * k * c,
        );
        copy(q.offset_bias.data_mut(), p.offset_bias.data(), 3 * k);
        copy(q.attn_weight.data_mut(), p.attn_weight.data(), k * c);
        copy(q.attn_bias.data_mut(), p.attn_bias.data(), k);
    }
    q
}

#[test]
fn deform_head_permutation_invariance() {
    let mut rng = SeededRng::new(RngSeed(19));
    let map = ClipFeatureMap::randn(GridDims::new(2, 4, 4), 6, &mut rng, 1.0).unwrap();
    for perm in [[0, 2, 1], [2, 0, 1], [1, 2, 0]] {
        let p = random_deform(&mut rng, 3, 6, 4);
        let z = rng.normal_vec(6, 0.0, 1.0);
        let pq = Point3::new(1.3, 2.1, 0.4);
        let a = deform::stdeform_attn(&p, &z, pq, &map).unwrap();
        let b = deform::stdeform_attn(&permute_heads(&p, &perm), &z, pq, &map).unwrap();
        assert!(max_abs_diff(&a.output, &b.output) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dense_weights_normalized(seed in any::<u64>(), heads in 1usize..3, n in 1usize..10, scale in 0.1f64..20.0) {
        let mut rng = SeededRng::new(RngSeed(seed));
        let c = 2 * heads;
        let p = DenseAttnParams::random(heads, c, &mut rng, scale).unwrap();
        let z = rng.normal_vec(c, 0.0, 1.0);
        let (_, w) = dense::multi_head_attn(&p, &z, &random_keys(&mut rng, n, c)).unwrap();
        prop_assert!(w.normalization_error() <= 1e-12);
        prop_assert!(w.as_slice().iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn dense_shift_invariance(seed in any::<u64>(), heads in 1usize..3, n in 1usize..8) {
        // Adding one vector to every key shifts each head's logits by a constant.
        let mut rng = SeededRng::new(RngSeed(seed));
        let c = 2 * heads;
        let p = DenseAttnParams::random(heads, c, &mut rng, 0.7).unwrap();
        let z = rng.normal_vec(c, 0.0, 1.0);
        let keys = random_keys(&mut rng, n, c);
        let u = rng.normal_vec(c, 0.0, 2.0);
        let shifted: Vec<Vec<f64>> = keys.iter().map(|k| k.iter().zip(&u).map(|(a, b)| a + b).collect()).collect();
        let (_, w1) = dense::multi_head_attn(&p, &z, &keys).unwrap();
        let (_, w2) = dense::multi_head_attn(&p, &z, &shifted).unwrap();
        prop_assert!(max_abs_diff(w1.as_slice(), w2.as_slice()) <= 1e-12);
    }

    #[test]
    fn deform_bias_shift_invariance(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = SeededRng::new(RngSeed(seed));
        let p = random_deform(&mut rng, 2, 4, 3);
        let z = rng.normal_vec(4, 0.0, 1.0);
        let mut q = p.clone();
        for b in &mut q.attn_bias.data_mut()[3..6] {
            *b += shift;
        }
        let a = deform::predict_weights(&p, &z).unwrap();
        let b = deform::predict_weights(&q, &z).unwrap();
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn dense_permutation_equivariance(seed in any::<u64>(), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut rng = SeededRng::new(RngSeed(seed));
        let p = DenseAttnParams::random(2, 4, &mut rng, 0.7).unwrap();
        let z = rng.normal_vec(4, 0.0, 1.0);
        let keys = random_keys(&mut rng, 6, 4);
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| keys[i].clone()).collect();
        let (o1, w1) = dense::multi_head_attn(&p, &z, &keys).unwrap();
        let (o2, w2) = dense::multi_head_attn(&p, &z, &permuted).unwrap();
        prop_assert!(max_abs_diff(&o1, &o2) <= 1e-12);
        for m in 0..2 {
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((w2.get(m, j) - w1.get(m, i)).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn deform_weights_normalized_and_sparse(seed in any::<u64>(), heads in 1usize..4, k in 1usize..9) {
        let mut rng = SeededRng::new(RngSeed(seed));
        let c = 2 * heads;
        let map = ClipFeatureMap::randn(GridDims::new(3, 3, 3), c, &mut rng, 1.0).unwrap();
        let mut p = random_deform(&mut rng, heads, c, k);
        for w in p.attn_bias.data_mut() {
            *w *= 30.0;
        }
        let z = rng.normal_vec(c, 0.0, 1.0);
        let out = deform::stdeform_attn(&p, &z, Point3::new(1.0, 1.0, 1.0), &map).unwrap();
        prop_assert!(out.plan.normalization_error() <= 1e-12);
        prop_assert!(out.cells_read.len() <= 8 * heads * k);
    }
}

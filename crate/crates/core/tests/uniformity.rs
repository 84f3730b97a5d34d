use stdeform_core::dense::uniformity_at_init;
use stdeform_core::{RngSeed, SeededRng};

fn stat(n: usize, zero: bool) -> (f64, f64) {
    let mut rng = SeededRng::new(RngSeed(0).derive(n as u64));
    let s = uniformity_at_init(n, 64, 100, &mut rng, zero).unwrap();
    (s.scaled_deviation, s.max_deviation)
}

/// `E[N_k · max_k |A_k − 1/N_k|]` should not grow from 64 to 4096 keys.
#[test]
fn scaled_deviation_non_increasing_in_key_count() {
    let (small, _) = stat(64, false);
    let (large, _) = stat(4096, false);
    assert!(large <= small, "N_k=64: {small:.4}, N_k=4096: {large:.4}");
}

#[test]
fn unscaled_deviation_shrinks_with_key_count() {
    let (_, small) = stat(64, false);
    let (_, large) = stat(4096, false);
    assert!(large < small);
}

#[test]
fn forced_zero_logits_are_exactly_uniform() {
    for n in [64, 512] {
        assert_eq!(stat(n, true), (0.0, 0.0));
    }
}

#[test]
fn monte_carlo_is_seeded() {
    assert_eq!(stat(512, false), stat(512, false));
}

#[test]
fn rejects_degenerate_sweeps() {
    let mut rng = SeededRng::new(RngSeed(1));
    assert!(uniformity_at_init(1, 8, 10, &mut rng, false).is_err());
    assert!(uniformity_at_init(8, 8, 0, &mut rng, false).is_err());
}

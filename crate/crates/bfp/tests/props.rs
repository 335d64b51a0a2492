//! Property tests for the structural invariants.

mod common;

use bfp::hmm::{forward_filter, mixing_coefficient, MixingInputs};
use bfp::math::log_sum_exp;
use bfp::metrics::w1_1d;
use bfp::partition::partition;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn partition_blocks_reassemble_the_series(n in 1usize..400, divisor in 1usize..40) {
        let k = 1 + divisor % n;
        let y: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        let parts = partition(n, k).unwrap();
        prop_assert_eq!(parts.len(), k);
        let mut rebuilt = Vec::new();
        for j in 0..k {
            let (_, block) = parts.block_with_context(j, &y).unwrap();
            rebuilt.extend_from_slice(block);
        }
        prop_assert_eq!(rebuilt, y.clone());
        let cap = 2 * n.div_ceil(k);
        for j in 0..k {
            let (ctx, block) = parts.block_with_context(j, &y).unwrap();
            prop_assert!(ctx.len() + block.len() <= cap);
        }
    }

    #[test]
    fn mixing_coefficient_is_monotone(
        s in 1usize..8,
        eps in 0.01f64..0.9,
        m in 1.0f64..1e4,
    ) {
        let rho = |s, e, m| mixing_coefficient(&MixingInputs::new(s, e, m).unwrap()).unwrap();
        let base = rho(s, eps, m);
        prop_assert!((0.0..1.0).contains(&base));
        prop_assert!(rho(s + 1, eps, m) >= base);
        prop_assert!(rho(s, eps, m * 2.0) >= base);
        if s > 1 {
            prop_assert!(rho(s, (eps * 0.5).max(1e-6), m) >= base);
        }
    }

    #[test]
    fn log_sum_exp_is_bounded_by_max_plus_log_len(
        xs in prop::collection::vec(-500.0f64..500.0, 1..20)
    ) {
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = log_sum_exp(&xs);
        prop_assert!(lse >= max - 1e-12);
        prop_assert!(lse <= max + (xs.len() as f64).ln() + 1e-12);
    }

    /// Dyadic inputs and the equal-size sorted-coupling path make
    /// translation exact in floating point; the unequal-size resampling
    /// path is only exact up to interpolation rounding.
    #[test]
    fn w1_translation_and_scale(
        pairs in prop::collection::vec(
            (-(1i32 << 16)..(1i32 << 16), -(1i32 << 16)..(1i32 << 16)),
            2..60,
        ),
        shift in -(1i32 << 16)..(1i32 << 16),
    ) {
        let a: Vec<f64> = pairs.iter().map(|&(v, _)| v as f64 / 16.0).collect();
        let b: Vec<f64> = pairs.iter().map(|&(_, v)| v as f64 / 16.0).collect();
        let c = shift as f64 / 16.0;
        let w = w1_1d(&a, &b).unwrap();
        let at: Vec<f64> = a.iter().map(|x| x + c).collect();
        let bt: Vec<f64> = b.iter().map(|x| x + c).collect();
        prop_assert_eq!(w1_1d(&at, &bt).unwrap(), w);
        let as2: Vec<f64> = a.iter().map(|x| x * 4.0).collect();
        let bs2: Vec<f64> = b.iter().map(|x| x * 4.0).collect();
        prop_assert_eq!(w1_1d(&as2, &bs2).unwrap(), 4.0 * w);
    }

    #[test]
    fn w1_translation_with_resampling_is_close(
        a in prop::collection::vec(-100.0f64..100.0, 2..40),
        b in prop::collection::vec(-100.0f64..100.0, 41..80),
        shift in -100.0f64..100.0,
    ) {
        let w = w1_1d(&a, &b).unwrap();
        let at: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let bt: Vec<f64> = b.iter().map(|x| x + shift).collect();
        let wt = w1_1d(&at, &bt).unwrap();
        prop_assert!((wt - w).abs() <= 1e-9 * (1.0 + w.abs() + shift.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The forward filter agrees with exhaustive enumeration on every small
    /// random instance.
    #[test]
    fn forward_filter_matches_enumeration(s in 1usize..=3, n in 1usize..=8, seed in 0u64..1_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::random_model(s, &mut rng);
        let (_, y) = model.simulate(n, seed ^ 0xabcd).unwrap();
        let oracle = common::enumeration_loglik(&model, &y);
        let (_, ll) = forward_filter(&model, &y, model.initial()).unwrap();
        prop_assert!((ll - oracle).abs() < 1e-10, "{} vs {}", ll, oracle);
    }
}

/// The one-block conditional likelihood with the preceding block as the
/// full history equals log p(prev, block) - log p(prev), both sides by
/// enumeration.
#[test]
fn one_block_conditional_matches_enumeration_ratio() {
    use bfp::hmm::one_block_conditional_loglik;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..6 {
        let model = common::random_model(2, &mut rng);
        let (_, y) = model.simulate(8, rng.random()).unwrap();
        let (prev, block) = y.split_at(4);
        let oracle =
            common::enumeration_loglik(&model, &y) - common::enumeration_loglik(&model, prev);
        let got = one_block_conditional_loglik(&model, block, prev).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }
}

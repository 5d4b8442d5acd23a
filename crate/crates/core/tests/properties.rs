use proptest::prelude::*;

use persona_core::metrics::{fit_improvement, normalize_curve, Normalization};
use persona_core::profile::{profile_reward, Profile, SlotMatcher, SlotSchema, STANDARD_SLOTS};
use persona_core::rl::{clip_ratio, compute_gae, ppo_surrogate};

fn profile_strategy(min: usize) -> impl Strategy<Value = Profile> {
    proptest::sample::subsequence(STANDARD_SLOTS.to_vec(), min..=10)
        .prop_flat_map(|slots| {
            let n = slots.len();
            (Just(slots), proptest::collection::vec(0u8..4, n))
        })
        .prop_map(|(slots, values)| {
            let pairs = slots.into_iter().zip(values).map(|(s, v)| (s, format!("value {v}")));
            Profile::from_pairs(SlotSchema::standard(), pairs).unwrap()
        })
}

fn curve_strategy() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..100.0, 2..16)
}

proptest! {
    #[test]
    fn profile_reward_is_symmetric_and_bounded(a in profile_strategy(1), b in profile_strategy(1)) {
        let m = SlotMatcher::ExactNormalized;
        let ab = profile_reward(&a, &b, &m).unwrap();
        prop_assert_eq!(ab, profile_reward(&b, &a, &m).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(profile_reward(&a, &a, &m).unwrap(), 1.0);
    }

    #[test]
    fn clipping_is_pessimistic(r in 1e-3f64..10.0, adv in -5.0f64..5.0, eps in 0.01f64..0.9) {
        let s = ppo_surrogate(r, adv, eps).unwrap();
        prop_assert!(s <= r * adv);
        let c = clip_ratio(r, eps);
        prop_assert!(c >= 1.0 - eps && c <= 1.0 + eps);
    }

    #[test]
    fn gae_with_zero_lambda_is_td_error(
        data in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..20),
        gamma in 0.0f64..=1.0,
    ) {
        let (rewards, values): (Vec<f64>, Vec<f64>) = data.into_iter().unzip();
        let adv = compute_gae(&rewards, &values, gamma, 0.0).unwrap();
        for t in 0..rewards.len() {
            let next = values.get(t + 1).copied().unwrap_or(0.0);
            prop_assert_eq!(adv[t], rewards[t] + gamma * next - values[t]);
        }
    }

    #[test]
    fn normalized_curve_spans_unit_interval(values in curve_strategy()) {
        let n = normalize_curve(&values, Normalization::Global).unwrap();
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let argmin = values.iter().position(|&v| v == lo).unwrap();
            let argmax = values.iter().position(|&v| v == hi).unwrap();
            prop_assert_eq!(n[argmin], 0.0);
            prop_assert_eq!(n[argmax], 1.0);
        }
    }

    #[test]
    fn slope_ignores_constant_shift(values in curve_strategy(), shift in -50.0f64..50.0) {
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let a = fit_improvement(&normalize_curve(&values, Normalization::Global).unwrap()).unwrap();
        let b = fit_improvement(&normalize_curve(&shifted, Normalization::Global).unwrap()).unwrap();
        prop_assert!((a.slope - b.slope).abs() < 1e-9);
    }

    #[test]
    fn r_squared_matches_residuals(values in curve_strategy()) {
        let fit = fit_improvement(&values).unwrap();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss_tot: f64 = values.iter().map(|y| (y - mean).powi(2)).sum();
        prop_assume!(ss_tot > 1e-9);
        let ss_res: f64 = values
            .iter()
            .enumerate()
            .map(|(i, y)| (y - fit.intercept - fit.slope * (i + 1) as f64).powi(2))
            .sum();
        prop_assert!((fit.r_squared - (1.0 - ss_res / ss_tot)).abs() < 1e-9);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&fit.r_squared));
    }
}

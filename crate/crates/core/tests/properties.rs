//! Property tests for cross-module invariants.

use policyflow::distill::make_mix_plan;
use policyflow::gm::{apply_temperature, gm_dropout, gm_posterior, gm_velocity, FactorGm, IsoGm, Space};
use policyflow::metrics::{diversity_mean_pairwise, endpoint_alignment_mse, sliced_wasserstein};
use policyflow::ode::{rollout_policy, RolloutConfig};
use policyflow::policy::{dx_velocity, DxGrid, PolicyHandle};
use policyflow::rng::seeded;
use policyflow::schedule::TimeShift;
use policyflow::teacher::{teacher_velocity, GmPrior, TeacherSpec};
use proptest::collection::vec;
use proptest::prelude::*;

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

fn gm_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (1usize..5).prop_flat_map(|k| (vec(-5.0f64..5.0, k), vec(-3.0f64..3.0, 2 * k), -2.0f64..1.0))
}

fn points(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    vec(vec(-3.0f64..3.0, 2), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn posterior_weights_normalized_and_variance_shrinks(
        (logits, means, log_s) in gm_strategy(),
        x_src in vec(-2.0f64..2.0, 2),
        x_t in vec(-3.0f64..3.0, 2),
        t_src in 0.2f64..=1.0,
        frac in 0.01f64..0.99,
    ) {
        let gm = IsoGm::new(logits, means, log_s, 2, Space::X0).unwrap();
        let t = (t_src * frac).max(1e-4);
        let post = gm_posterior(&gm, &x_src, t_src, &x_t, t).unwrap();
        let total: f64 = post.weights().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(post.s2 <= gm.std().powi(2) * (1.0 + 1e-12));
        prop_assert!(post.mean().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn temperature_keeps_the_argmax((logits, means, log_s) in gm_strategy(), temp in 0.05f64..10.0) {
        let gm = IsoGm::new(logits, means, log_s, 2, Space::X0).unwrap();
        let hot = apply_temperature(&gm, temp).unwrap();
        prop_assert_eq!(argmax(&gm.weights()), argmax(&hot.weights()));
    }

    #[test]
    fn dropout_keeps_a_component((logits, means, log_s) in gm_strategy(), rate in 0.0f64..0.99, seed in 0u64..1000) {
        let k = logits.len();
        let gm = FactorGm::new(1, k, 2, logits, means, log_s, Space::X0, vec![0.0, 0.0], 1.0).unwrap();
        let (dropped, mask) = gm_dropout(&gm, rate, &mut seeded(seed)).unwrap();
        prop_assert!(mask.iter().any(|&m| m));
        let total: f64 = dropped.chunk(0).weights().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite(
        logits in vec(-500.0f64..500.0, 4),
        x in vec(-10.0f64..10.0, 2),
        t in 1e-4f64..1.0,
    ) {
        let gm = FactorGm::new(1, 4, 2, logits, vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0], -1.0, Space::X0, vec![0.0, 0.0], 1.0)
            .unwrap();
        prop_assert!(gm_velocity(&gm, &x, t).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn teacher_agrees_with_kernel_and_responsibilities_sum_to_one(
        (logits, means, log_s) in gm_strategy(),
        x in vec(-4.0f64..4.0, 2),
        t in 0.01f64..=1.0,
    ) {
        let k = logits.len();
        let lse = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        let z: f64 = w.iter().sum();
        let weights: Vec<f64> = w.iter().map(|v| v / z).collect();
        let prior = GmPrior {
            weights: weights.clone(),
            means: means.chunks(2).map(|c| c.to_vec()).collect(),
            stds: vec![log_s.exp(); k],
        };
        let r: f64 = prior.responsibilities(&x, t).iter().sum();
        prop_assert!((r - 1.0).abs() <= 1e-12);
        let spec = TeacherSpec::single(prior).unwrap();
        let gm = FactorGm::new(1, k, 2, weights.iter().map(|v| v.ln()).collect(), means, log_s, Space::X0, vec![0.3, -0.1], 1.0)
            .unwrap();
        let a = teacher_velocity(&spec, &x, t, 0).unwrap();
        let b = gm_velocity(&gm, &x, t).unwrap();
        for j in 0..2 {
            prop_assert!((a[j] - b[j]).abs() <= 1e-9 * a[j].abs().max(1.0));
        }
    }

    #[test]
    fn dx_x0_term_ignores_the_state(
        x0hat in vec(-3.0f64..3.0, 6),
        a in vec(-100.0f64..100.0, 2),
        b in vec(-100.0f64..100.0, 2),
        t in 1e-4f64..1.0,
    ) {
        let grid = DxGrid::new(vec![0.9, 0.5, 0.1], x0hat, 2).unwrap();
        let va = dx_velocity(&grid, &a, t).unwrap();
        let vb = dx_velocity(&grid, &b, t).unwrap();
        for j in 0..2 {
            let (ra, rb) = (va[j] * t - a[j], vb[j] * t - b[j]);
            prop_assert!((ra - rb).abs() <= 1e-12 * (1.0 + a[j].abs() + b[j].abs()));
        }
    }

    #[test]
    fn sharp_single_gm_matches_constant_dx(
        mu in vec(-3.0f64..3.0, 2),
        x in vec(-3.0f64..3.0, 2),
        t in 0.01f64..0.99,
    ) {
        let gm = FactorGm::new(1, 1, 2, vec![0.0], mu.clone(), -40.0, Space::X0, vec![0.0, 0.0], 1.0).unwrap();
        let grid = DxGrid::new(vec![1.0, 0.0], [mu.clone(), mu].concat(), 2).unwrap();
        let a = gm_velocity(&gm, &x, t).unwrap();
        let b = dx_velocity(&grid, &x, t).unwrap();
        for j in 0..2 {
            prop_assert!((a[j] - b[j]).abs() <= 1e-6);
        }
    }

    #[test]
    fn policy_queries_are_finite_for_bounded_states(
        (logits, means, log_s) in gm_strategy(),
        x in vec(-1e3f64..1e3, 2),
        frac in 0.0f64..=1.0,
    ) {
        let k = logits.len();
        let shift = TimeShift::new(3.0).unwrap();
        let gm = FactorGm::new(1, k, 2, logits, means, log_s, Space::X0, vec![0.5, 0.5], shift.apply(0.8).unwrap()).unwrap();
        let p = PolicyHandle::from_gm(gm, 0.8, 0.3, shift).unwrap();
        let t = shift.apply(0.3 + 0.5 * frac).unwrap();
        prop_assert!(p.velocity(&x, t).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rollouts_are_monotone_and_reproducible(
        (logits, means, log_s) in gm_strategy(),
        src in 0.3f64..=1.0,
        len in 0.05f64..0.3,
        m in 0.5f64..8.0,
    ) {
        let k = logits.len();
        let shift = TimeShift::new(m).unwrap();
        let dst = src - len;
        let gm = FactorGm::new(1, k, 2, logits, means, log_s, Space::X0, vec![0.2, -0.4], shift.apply(src).unwrap()).unwrap();
        let p = PolicyHandle::from_gm(gm, src, dst, shift).unwrap();
        let cfg = RolloutConfig { record_trajectory: true, ..RolloutConfig::default() };
        let a = rollout_policy(&p, src, dst, &cfg).unwrap();
        let b = rollout_policy(&p, src, dst, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.points.windows(2).all(|w| w[0].tau > w[1].tau));
        prop_assert_eq!(a.points[0].tau, src);
        prop_assert!((a.points.last().unwrap().tau - dst).abs() <= 1e-12);
        for pt in &a.points {
            prop_assert!((pt.t - shift.apply(pt.tau).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn mix_plan_teacher_budget(ratio in 0.0f64..=1.0, src in 0.2f64..=1.0, frac in 0.0f64..0.9, n in 1usize..6, seed in 0u64..500) {
        let dst = src * frac;
        let plan = make_mix_plan(ratio, src, dst, n, &mut seeded(seed)).unwrap();
        let want = ratio * (src - dst);
        prop_assert!((plan.teacher_length() - want).abs() <= 1e-9);
    }

    #[test]
    fn metrics_are_symmetric_finite_and_nonnegative(a in points(12), b in points(12), seed in 0u64..100) {
        let ab = sliced_wasserstein(&a, &b, 32, seed).unwrap();
        let ba = sliced_wasserstein(&b, &a, 32, seed).unwrap();
        prop_assert!(ab.is_finite() && ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
        let mse = endpoint_alignment_mse(&a, &b).unwrap();
        prop_assert!(mse.is_finite() && mse >= 0.0);
        prop_assert!(diversity_mean_pairwise(&a).unwrap() >= 0.0);
    }
}

//! Randomized invariants across modules.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::game::*;
use crate::learner::*;
use crate::omd::*;
use crate::oracle::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_spec(rng: &mut ChaCha8Rng, m: usize, tau: f64) -> GameSpec {
    let pref = PreferenceMatrix::random(m, rng);
    let reference = Policy::random_on_support(&Policy::uniform(m), rng);
    GameSpec::new(ResponseSpace::indexed(m).unwrap(), pref, reference, tau).unwrap()
}

fn random_policy(rng: &mut ChaCha8Rng, m: usize) -> Policy {
    Policy::random_on_support(&Policy::uniform(m), rng)
}

/// Random direction with zero sum.
fn tangent(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let mut d: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mean = d.iter().sum::<f64>() / m as f64;
    d.iter_mut().for_each(|x| *x -= mean);
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn win_prob_is_antisymmetric(seed in any::<u64>(), m in 2usize..=10) {
        let mut r = rng(seed);
        let pref = PreferenceMatrix::random(m, &mut r);
        let a = random_policy(&mut r, m);
        let b = random_policy(&mut r, m);
        let total = win_prob(&pref, &a, &b).unwrap() + win_prob(&pref, &b, &a).unwrap();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn game_is_symmetric_and_self_play_is_half(
        seed in any::<u64>(),
        m in 2usize..=10,
        tau in 0.0f64..2.0,
    ) {
        let mut r = rng(seed);
        let spec = random_spec(&mut r, m, tau);
        let a = Policy::random_on_support(&spec.ref_policy, &mut r);
        let b = Policy::random_on_support(&spec.ref_policy, &mut r);
        let sum = game_value(&spec, &a, &b).unwrap() + game_value(&spec, &b, &a).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-10);
        prop_assert!((game_value(&spec, &a, &a).unwrap() - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn duality_gap_is_non_negative(seed in any::<u64>(), m in 2usize..=10, tau in 0.0f64..2.0) {
        let mut r = rng(seed);
        let spec = random_spec(&mut r, m, tau);
        let pi = Policy::random_on_support(&spec.ref_policy, &mut r);
        prop_assert!(duality_gap(&spec, &pi).unwrap() >= -1e-12);
    }

    #[test]
    fn bradley_terry_is_transitive(rewards in prop::collection::vec(-3.0f64..3.0, 2..=6)) {
        let pref = bt_matrix(&rewards).unwrap();
        let m = rewards.len();
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    if pref.get(a, b) > 0.5 && pref.get(b, c) > 0.5 {
                        prop_assert!(pref.get(a, c) > 0.5);
                    }
                }
            }
        }
    }

    #[test]
    fn empirical_loss_is_midpoint_convex(seed in any::<u64>(), m in 2usize..=6) {
        let mut r = rng(seed);
        let spec = random_spec(&mut r, m, 0.3);
        let pi = Policy::random_on_support(&spec.ref_policy, &mut r);
        let mut oracle = PreferenceOracle::from_matrix(spec.pref.clone(), seed);
        let data = collect_dataset(&mut oracle, &pi, 50, CollectionMode::Plain, seed, 1).unwrap();
        let u: Vec<f64> = (0..m).map(|_| r.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..m).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mid: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 0.5 * (a + b)).collect();
        let loss = |u: Vec<f64>| empirical_loss_residual(&ResidualVector { u }, &data, 0.7).unwrap();
        let (lu, lv, lm) = (loss(u), loss(v), loss(mid));
        prop_assert!(lm <= 0.5 * (lu + lv) + 1e-12);
    }
}

#[test]
fn best_response_beats_random_policies() {
    let mut r = rng(1);
    for _ in 0..5 {
        let spec = random_spec(&mut r, 3, 0.4);
        let pi = Policy::random_on_support(&spec.ref_policy, &mut r);
        let br = best_response(&spec, &pi).unwrap();
        let best = game_value(&spec, &br, &pi).unwrap();
        for _ in 0..1000 {
            let other = Policy::random_on_support(&spec.ref_policy, &mut r);
            assert!(best >= game_value(&spec, &other, &pi).unwrap() - 1e-9);
        }
    }
}

#[test]
fn nash_solvers_agree() {
    let mut r = rng(2);
    for g in 0..20 {
        let m = r.gen_range(2..=8);
        let tau = [0.1, 0.5, 1.0][g % 3];
        let spec = random_spec(&mut r, m, tau);
        let omd = nash_solve(&spec, 1e-8, 1_000_000).unwrap();
        let fixed = nash_fixed_point(&spec, 1e-10, 0.1).unwrap();
        assert!(omd.linf_distance(&fixed) <= 1e-6, "game {g}");
        assert!(duality_gap(&spec, &omd).unwrap() <= 1e-8);
    }
}

/// `⟨∇ℓ_t(π_t), π⟩ + eta·KL(π ‖ π_t)`.
fn mirror_objective(grad: &[f64], pi: &[f64], pi_t: &[f64], eta: f64) -> f64 {
    pi.iter()
        .zip(grad)
        .zip(pi_t)
        .map(|((p, g), q)| g * p + if *p > 0.0 { eta * p * (p / q).ln() } else { 0.0 })
        .sum()
}

#[test]
fn omd_step_matches_grid_search() {
    let mut r = rng(3);
    // two responses: one-dimensional grid
    for _ in 0..5 {
        let spec = random_spec(&mut r, 2, 0.3);
        let pi_t = Policy::random_on_support(&spec.ref_policy, &mut r);
        let eta = r.gen_range(0.3..2.0);
        let grad = loss_gradient(&spec, &pi_t).unwrap();
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        for i in 1..200_000 {
            let p = i as f64 / 200_000.0;
            let v = mirror_objective(&grad, &[p, 1.0 - p], pi_t.probs(), eta);
            if v < best {
                (best, arg) = (v, p);
            }
        }
        let step = omd_step(&spec, &pi_t, eta).unwrap();
        assert!((step.probs()[0] - arg).abs() <= 1e-4);
    }
    // three responses: zooming grids over the simplex
    for _ in 0..5 {
        let spec = random_spec(&mut r, 3, 0.3);
        let pi_t = Policy::random_on_support(&spec.ref_policy, &mut r);
        let eta = r.gen_range(0.3..2.0);
        let grad = loss_gradient(&spec, &pi_t).unwrap();
        let (mut center, mut radius) = ([1.0 / 3.0, 1.0 / 3.0], 0.5);
        for _ in 0..4 {
            let steps = 100;
            let mut best = (f64::INFINITY, center);
            for i in 0..=steps {
                for j in 0..=steps {
                    let a = center[0] - radius + 2.0 * radius * i as f64 / steps as f64;
                    let b = center[1] - radius + 2.0 * radius * j as f64 / steps as f64;
                    if a <= 0.0 || b <= 0.0 || a + b >= 1.0 {
                        continue;
                    }
                    let v = mirror_objective(&grad, &[a, b, 1.0 - a - b], pi_t.probs(), eta);
                    if v < best.0 {
                        best = (v, [a, b]);
                    }
                }
            }
            center = best.1;
            radius /= 20.0;
        }
        let step = omd_step(&spec, &pi_t, eta).unwrap();
        let grid = Policy::new(vec![center[0], center[1], 1.0 - center[0] - center[1]]).unwrap();
        assert!(step.linf_distance(&grid) <= 1e-4);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut r = rng(4);
    let spec = random_spec(&mut r, 6, 0.4);
    let pi_t = Policy::random_on_support(&spec.ref_policy, &mut r);
    let grad = loss_gradient(&spec, &pi_t).unwrap();
    let eps = 1e-6;
    for _ in 0..20 {
        let d = tangent(&mut r, 6);
        let shifted = |s: f64| {
            Policy::new(pi_t.probs().iter().zip(&d).map(|(p, x)| p + s * x).collect()).unwrap()
        };
        let fd = (loss_value(&spec, &shifted(eps), &pi_t).unwrap()
            - loss_value(&spec, &shifted(-eps), &pi_t).unwrap())
            / (2.0 * eps);
        let analytic: f64 = grad.iter().zip(&d).map(|(g, x)| g * x).sum();
        assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1e-3), "{fd} vs {analytic}");
    }
}

#[test]
fn exact_fit_is_a_strict_minimum() {
    let mut r = rng(5);
    for _ in 0..5 {
        let m = r.gen_range(2..=6);
        let spec = random_spec(&mut r, m, 0.25);
        let pi_t = Policy::random_on_support(&spec.ref_policy, &mut r);
        let eta = 0.8;
        let config = LearnConfig::exact(eta, spec.tau);
        let fit = fit_next_policy(FitData::Exact(&spec.pref), &pi_t, &spec.ref_policy, &config)
            .unwrap();
        let at_fit = exact_loss(&fit.policy, &pi_t, &spec, eta).unwrap();
        for _ in 0..20 {
            let d = tangent(&mut r, m);
            let logits: Vec<f64> = fit
                .policy
                .log_probs()
                .iter()
                .zip(&d)
                .map(|(l, x)| l + 1e-3 * x)
                .collect();
            let moved = Policy::from_log_weights(&logits).unwrap();
            assert!(exact_loss(&moved, &pi_t, &spec, eta).unwrap() > at_fit);
        }
    }
}

#[test]
fn sampled_fit_improves_with_more_pairs() {
    let mut r = rng(6);
    let spec = random_spec(&mut r, 4, 0.3);
    let pi_t = spec.ref_policy.clone();
    let eta = 0.9;
    let exact = omd_step(&spec, &pi_t, eta).unwrap();
    let mut oracle = PreferenceOracle::from_matrix(spec.pref.clone(), 6);
    let tvs: Vec<f64> = [100, 1_000, 10_000, 100_000]
        .iter()
        .map(|&n| {
            let data = collect_dataset(&mut oracle, &pi_t, n, CollectionMode::Plain, 6, 1).unwrap();
            let config = LearnConfig::sampled(eta, spec.tau, n, CollectionMode::Plain);
            let fit = fit_next_policy(FitData::Dataset(&data), &pi_t, &spec.ref_policy, &config)
                .unwrap();
            fit.policy.tv_distance(&exact)
        })
        .collect();
    let inversions = tvs.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(inversions <= 1, "{tvs:?}");
    assert!(tvs[3] < tvs[0]);
}

#[test]
fn datasets_are_reproducible_byte_for_byte() {
    let spec = GameSpec::uniform(cyclic_matrix(4, 0.8).unwrap(), 0.1).unwrap();
    let space = ResponseSpace::indexed(4).unwrap();
    let csv = |mode| {
        let mut oracle = PreferenceOracle::from_matrix(spec.pref.clone(), 9);
        let data = collect_dataset(&mut oracle, &spec.ref_policy, 300, mode, 9, 2).unwrap();
        let mut out = Vec::new();
        crate::io::write_dataset_csv(&space, &data, &mut out).unwrap();
        out
    };
    for mode in [CollectionMode::Plain, CollectionMode::Tournament { k: 8 }] {
        assert_eq!(csv(mode), csv(mode));
    }
}

#[test]
fn last_iterate_beats_mixture() {
    let reference = Policy::new(vec![0.5, 0.3, 0.2]).unwrap();
    let spec = GameSpec::new(
        ResponseSpace::indexed(3).unwrap(),
        cyclic_matrix(3, 0.9).unwrap(),
        reference,
        0.1,
    )
    .unwrap();
    let nash = nash_solve(&spec, 1e-10, 1_000_000).unwrap();
    let trace = run_planner(&spec, StepSchedule::Theorem2, 1000, Some(&nash)).unwrap();
    let mixture = mixture_policy(&trace, 1000).unwrap();
    let last = &trace.policies[999];
    assert!(kl_divergence(&nash, last).unwrap() < kl_divergence(&nash, &mixture).unwrap());
}

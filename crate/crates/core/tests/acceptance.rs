//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N ... PASS|FAIL` line with the measured values.

use std::time::Instant;

use inpo_core::expt::verify::{random_game, verify, VerifyOptions};
use inpo_core::game::{
    duality_gap, game_value, kl_divergence, nash_solve, GameSpec, Policy, PreferenceMatrix,
    ResponseSpace,
};
use inpo_core::learner::{
    fit_next_policy, h_value, run_inpo, verify_equivalence, FitData, LearnConfig,
};
use inpo_core::omd::{
    kappa_bound, omd_step, regret_bound, run_planner, theorem2_bound, verify_kl_recursion,
    PlannerTrace, StepSchedule,
};
use inpo_core::oracle::{cyclic_matrix, tournament_select, CollectionMode, PreferenceOracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7_031;
const GAMES: usize = 10;

fn report(criterion: u32, name: &str, passed: bool, detail: String) {
    let status = if passed { "PASS" } else { "FAIL" };
    println!("criterion {criterion:>2} {name:<28} {status}  {detail}");
    assert!(passed, "criterion {criterion} ({name}) failed: {detail}");
}

fn cyclic(tau: f64) -> GameSpec {
    GameSpec::uniform(cyclic_matrix(3, 0.9).unwrap(), tau).unwrap()
}

fn nash(spec: &GameSpec) -> Policy {
    nash_solve(spec, 1e-10, 1_000_000).unwrap()
}

#[test]
fn criterion_01_nash_correctness() {
    let started = Instant::now();
    let two = GameSpec::uniform(PreferenceMatrix::new(vec![vec![0.5, 0.8], vec![0.2, 0.5]]).unwrap(), 0.5)
        .unwrap();
    let q = 1.0 / (1.0 + (-0.6f64).exp());
    let err_two = nash_solve(&two, 1e-9, 1_000_000)
        .unwrap()
        .linf_distance(&Policy::new(vec![q, 1.0 - q]).unwrap());
    let t_two = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let err_cyclic = nash_solve(&cyclic(0.1), 1e-9, 1_000_000)
        .unwrap()
        .linf_distance(&Policy::uniform(3));
    let t_cyclic = started.elapsed().as_secs_f64();
    report(
        1,
        "nash correctness",
        err_two <= 1e-6 && err_cyclic <= 1e-6 && t_two < 1.0 && t_cyclic < 1.0,
        format!(
            "two-response L∞ {err_two:.2e} ({t_two:.3}s), cyclic L∞ {err_cyclic:.2e} ({t_cyclic:.3}s); need ≤ 1e-6, < 1 s"
        ),
    );
}

/// Largest `KL(π*, π_T) / (32C²/(tau²(T+1)))` over all `T` in the trace.
fn rate_ratio(trace: &PlannerTrace, nash: &Policy, tau: f64) -> f64 {
    let c = (trace.measured_b * tau).max(1.0);
    (1..trace.policies.len())
        .map(|t| kl_divergence(nash, &trace.policies[t - 1]).unwrap() / theorem2_bound(c, tau, t))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_02_theorem2_rate() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for g in 0..GAMES {
        let spec = random_game(SEED, g, 8);
        let pi_star = nash(&spec);
        let trace = run_planner(&spec, StepSchedule::Theorem2, 1000, Some(&pi_star)).unwrap();
        worst = worst.max(rate_ratio(&trace, &pi_star, spec.tau));
    }
    let spec = cyclic(0.1);
    let pi_star = nash(&spec);
    let trace = run_planner(&spec, StepSchedule::Theorem2, 1000, Some(&pi_star)).unwrap();
    worst = worst.max(rate_ratio(&trace, &pi_star, spec.tau));
    let final_kl = kl_divergence(&pi_star, &trace.policies[999]).unwrap();
    let secs = started.elapsed().as_secs_f64();
    report(
        2,
        "last-iterate rate",
        worst <= 1.0 && final_kl <= 1e-3 && secs < 10.0,
        format!(
            "max KL/bound {worst:.3e} (≤ 1), cyclic KL(π*,π_1000) {final_kl:.2e} (≤ 1e-3), {secs:.2}s (< 10 s)"
        ),
    );
}

#[test]
fn criterion_03_kl_recursion() {
    let mut violations = 0;
    let mut checked = 0;
    for g in 0..GAMES {
        let spec = random_game(SEED, g, 8);
        let pi_star = nash(&spec);
        let trace = run_planner(&spec, StepSchedule::Theorem2, 200, Some(&pi_star)).unwrap();
        let ok = verify_kl_recursion(&trace, &pi_star, spec.tau, &trace.etas).unwrap();
        checked += ok.len();
        violations += ok.iter().filter(|b| !**b).count();
    }
    report(
        3,
        "KL recursion",
        violations == 0,
        format!("{violations} violations over {checked} updates (need 0)"),
    );
}

/// `lemma1` schedule with `B` measured on a pilot run that used `B = 0`.
fn lemma1_trace(spec: &GameSpec, horizon: usize, pi_star: &Policy) -> (PlannerTrace, f64) {
    let kappa = kappa_bound(&spec.ref_policy);
    let schedule = |b| StepSchedule::Lemma1 {
        horizon,
        log_ratio_bound: b,
        kappa,
    };
    let pilot = run_planner(spec, schedule(0.0), horizon, None).unwrap();
    let chosen = schedule(pilot.measured_b);
    let trace = run_planner(spec, chosen, horizon, Some(pi_star)).unwrap();
    (trace, chosen.eta(1, spec.tau))
}

#[test]
fn criterion_04_regret_bound() {
    let mut worst = f64::NEG_INFINITY;
    for g in 0..GAMES {
        let spec = random_game(SEED, g, 8);
        let pi_star = nash(&spec);
        let kl_start = kl_divergence(&pi_star, &spec.ref_policy).unwrap();
        for horizon in [64, 256, 1024] {
            let (trace, eta) = lemma1_trace(&spec, horizon, &pi_star);
            let regret = *trace.regret_partials.last().unwrap();
            let bound = regret_bound(eta, kl_start, spec.tau, trace.measured_b, horizon);
            worst = worst.max(regret / bound);
        }
    }
    report(
        4,
        "explicit regret bound",
        worst <= 1.0,
        format!("max regret/bound {worst:.3e} over T ∈ {{64, 256, 1024}} (need ≤ 1)"),
    );
}

#[test]
fn criterion_05_average_iterate_trend() {
    let mut worst: f64 = 0.0;
    for g in 0..GAMES {
        let spec = random_game(SEED, g, 8);
        let pi_star = nash(&spec);
        let scaled = |horizon: usize| {
            let (trace, _) = lemma1_trace(&spec, horizon, &pi_star);
            trace.mixture_dual_gaps[horizon - 1] * (horizon as f64).sqrt()
        };
        let base = scaled(64);
        for horizon in [128, 256, 512, 1024] {
            let value = scaled(horizon);
            worst = worst.max(if base > 0.0 { value / base } else if value > 0.0 { f64::INFINITY } else { 0.0 });
        }
    }
    report(
        5,
        "average-iterate trend",
        worst <= 3.0,
        format!("max gap(π̄_T)·√T relative to T = 64: {worst:.3} (need ≤ 3)"),
    );
}

#[test]
fn criterion_06_exact_fit_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut fit_err: f64 = 0.0;
    let mut identity_err: f64 = 0.0;
    for i in 0..20 {
        let m = rng.gen_range(2..=10);
        let spec = random_game(SEED + 1, i, m);
        let pi_t = Policy::random_on_support(&spec.ref_policy, &mut rng);
        let eta = spec.tau * rng.gen_range(1.0..4.0);
        let config = LearnConfig::exact(eta, spec.tau);
        let fit = fit_next_policy(FitData::Exact(&spec.pref), &pi_t, &spec.ref_policy, &config).unwrap();
        let step = omd_step(&spec, &pi_t, eta).unwrap();
        fit_err = fit_err.max(fit.policy.linf_distance(&step));
        let wins = spec.pref.wins_against(&pi_t);
        for y in 0..m {
            for y_prime in 0..m {
                let h = h_value(&step, y, y_prime, &pi_t, &spec.ref_policy, spec.tau, eta).unwrap();
                identity_err = identity_err.max((h - (wins[y] - wins[y_prime]) / eta).abs());
            }
        }
    }
    report(
        6,
        "exact fit = closed form",
        fit_err <= 1e-8 && identity_err <= 1e-10,
        format!("fit L∞ {fit_err:.2e} (≤ 1e-8), identity error {identity_err:.2e} (≤ 1e-10)"),
    );
}

#[test]
fn criterion_07_loss_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut worst: f64 = 0.0;
    for g in 0..GAMES {
        let spec = random_game(SEED + 2, g, 5);
        let pi_t = Policy::random_on_support(&spec.ref_policy, &mut rng);
        let eta = spec.tau * rng.gen_range(1.0..4.0);
        let probes: Vec<Policy> = (0..10)
            .map(|_| Policy::random_on_support(&spec.ref_policy, &mut rng))
            .collect();
        worst = worst.max(verify_equivalence(&spec, &pi_t, eta, &probes).unwrap().max_spread());
    }
    report(
        7,
        "loss equivalence",
        worst <= 1e-10,
        format!("max spread {worst:.2e} over 10 probes × {GAMES} games (need ≤ 1e-10)"),
    );
}

#[test]
fn criterion_08_sampled_consistency() {
    let started = Instant::now();
    let eta = 1.0;
    let pref = PreferenceMatrix::random(10, &mut ChaCha8Rng::seed_from_u64(SEED + 3));
    let spec = GameSpec::uniform(pref, eta / 3.0).unwrap();
    let exact = run_planner(&spec, StepSchedule::Constant { eta }, 5, None).unwrap();
    let mut oracle = PreferenceOracle::from_matrix(spec.pref.clone(), SEED);
    let config = LearnConfig::sampled(eta, spec.tau, 50_000, CollectionMode::Plain);
    let sampled = run_inpo(&spec, &mut oracle, 5, &config, None, SEED).unwrap();
    let tv = exact
        .policies
        .iter()
        .zip(&sampled.policies)
        .map(|(a, b)| a.tv_distance(b))
        .fold(0.0, f64::max);

    let game = cyclic(0.1);
    let mut oracle = PreferenceOracle::from_matrix(game.pref.clone(), SEED);
    let config = LearnConfig::sampled(0.3, 0.1, 20_000, CollectionMode::Plain);
    let trace = run_inpo(&game, &mut oracle, 10, &config, None, SEED).unwrap();
    let gap = duality_gap(&game, trace.last()).unwrap();
    let secs = started.elapsed().as_secs_f64();
    report(
        8,
        "sampled learning",
        tv <= 0.02 && gap < 0.05 && secs < 60.0,
        format!("max TV {tv:.2e} (≤ 0.02), cyclic final gap {gap:.2e} (< 0.05), {secs:.2}s (< 60 s)"),
    );
}

#[test]
fn criterion_09_nash_dominance() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let mut worst = f64::INFINITY;
    for g in 0..GAMES {
        let spec = random_game(SEED + 4, g, 8);
        let pi_hat = nash_solve(&spec, 1e-8, 1_000_000).unwrap();
        for _ in 0..100 {
            let pi = Policy::random_on_support(&spec.ref_policy, &mut rng);
            worst = worst.min(game_value(&spec, &pi_hat, &pi).unwrap());
        }
    }
    report(
        9,
        "nash dominance",
        worst >= 0.5 - 1e-6,
        format!("min J(π̂, π) {worst:.9} over 1000 pairs (need ≥ 0.5 − 1e-6)"),
    );
}

#[test]
fn criterion_10_query_accounting() {
    let spec = random_game(SEED + 5, 0, 8);
    let mut oracle = PreferenceOracle::from_matrix(spec.pref.clone(), SEED);
    let responses: Vec<usize> = (0..8).collect();
    tournament_select(&mut oracle, &responses).unwrap();
    let count = oracle.query_count();
    report(
        10,
        "tournament query count",
        count == 11,
        format!("{count} queries for K = 8 (need exactly 11)"),
    );
}

#[test]
fn criterion_11_greedy_instability() {
    let spec = cyclic(0.02);
    let mut pi = spec.ref_policy.clone();
    let mut min_gap = f64::INFINITY;
    for _ in 0..500 {
        pi = inpo_core::omd::greedy_step(&spec, &pi).unwrap();
        min_gap = min_gap.min(duality_gap(&spec, &pi).unwrap());
    }
    let omd = run_planner(&spec, StepSchedule::Theorem2, 500, None).unwrap();
    let omd_gap = *omd.dual_gaps.last().unwrap();
    report(
        11,
        "greedy instability",
        min_gap > 0.2 && omd_gap < 1e-3,
        format!("min greedy gap over 500 iterations {min_gap:.3e} (need > 0.2), mirror descent gap {omd_gap:.3e} (need < 1e-3)"),
    );
}

#[test]
fn criterion_12_verify_suite() {
    let started = Instant::now();
    let result = verify(&VerifyOptions::default());
    let secs = started.elapsed().as_secs_f64();
    let failed: Vec<&str> = result
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    report(
        12,
        "verify suite",
        result.passed && secs < 120.0,
        format!(
            "gating checks {}, {secs:.1}s (< 120 s); failing entries: {failed:?}",
            if result.passed { "pass" } else { "fail" }
        ),
    );
}

#[test]
fn spaces_are_indexed() {
    // the random games above are built on `y0 … y{m-1}`
    assert_eq!(ResponseSpace::indexed(3).unwrap().ids(), ["y0", "y1", "y2"]);
}

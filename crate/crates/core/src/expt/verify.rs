//! The invariant suite behind `inpo verify`.
//!
//! Every check produces one [`CheckResult`] with the measured value and the
//! threshold it was held to. A check that errors is reported as failed.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::game::{
    duality_gap, game_value, kl_divergence, nash_solve, GameSpec, Policy, PreferenceMatrix,
};
use crate::learner::{
    fit_next_policy, h_value, run_inpo, verify_equivalence, FitData, LearnConfig,
};
use crate::omd::{
    greedy_step, kappa_bound, omd_step, regret_bound, run_planner, theorem2_bound,
    verify_kl_recursion, PlannerTrace, StepSchedule,
};
use crate::oracle::{
    collect_dataset, cyclic_matrix, tournament_select, CollectionMode, PreferenceOracle,
};

/// Scale of the suite. The default matches the acceptance criteria.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Random games per check.
    pub games: usize,
    /// Horizon of the last-iterate rate check.
    pub horizon: usize,
    /// Updates checked against the KL recursion.
    pub recursion_horizon: usize,
    /// Horizons of the explicit regret bound check.
    pub regret_horizons: Vec<usize>,
    /// Horizons of the average-iterate trend check; the first is the base.
    pub trend_horizons: Vec<usize>,
    /// Pairs per iteration in the sampled-learning checks.
    pub sampled_pairs: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            games: 10,
            horizon: 1000,
            recursion_horizon: 200,
            regret_horizons: vec![64, 256, 1024],
            trend_horizons: vec![64, 128, 256, 512, 1024],
            sampled_pairs: 50_000,
            seed: 20_240_601,
        }
    }
}

impl VerifyOptions {
    /// A reduced suite for smoke runs.
    pub fn quick() -> Self {
        Self {
            games: 3,
            horizon: 200,
            recursion_horizon: 100,
            regret_horizons: vec![64, 256],
            trend_horizons: vec![64, 128, 256],
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Non-gating checks are reported but do not affect the exit status.
    pub gating: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub elapsed_ms: f64,
    pub options: VerifyOptions,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Measured value, threshold and detail of a finished check.
struct Outcome {
    passed: bool,
    measured: f64,
    threshold: f64,
    detail: String,
}

fn at_most(measured: f64, threshold: f64, detail: String) -> Outcome {
    Outcome {
        passed: measured <= threshold,
        measured,
        threshold,
        detail,
    }
}

type CheckFn = fn(&VerifyOptions) -> Result<Outcome>;

/// `(name, gating, check)` in report order.
const CHECKS: &[(&str, bool, CheckFn)] = &[
    ("NashCorrectness", true, nash_correctness),
    ("Theorem2-rate", true, theorem2_rate),
    ("Theorem2-recursion", true, theorem2_recursion),
    ("Lemma1-bound", true, lemma1_bound),
    ("Theorem1-rate", true, theorem1_rate),
    ("Lemma2-uniqueness", true, lemma2_uniqueness),
    ("Eq6-identity", true, eq6_identity),
    ("Prop1-equivalence", true, prop1_equivalence),
    ("SampledConsistency", true, sampled_consistency),
    ("SampledCyclicGap", true, sampled_cyclic_gap),
    ("NashDominance", true, nash_dominance),
    ("QueryAccounting", true, query_accounting),
    ("GreedyInstability", false, greedy_instability),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(name, _, _)| *name).collect()
}

fn run_check(name: &str, gating: bool, check: CheckFn, options: &VerifyOptions) -> CheckResult {
    let started = Instant::now();
    let outcome = check(options);
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok(o) => CheckResult {
            name: name.into(),
            passed: o.passed && o.measured.is_finite(),
            gating,
            measured: o.measured,
            threshold: o.threshold,
            detail: o.detail,
            elapsed_ms,
        },
        Err(err) => CheckResult {
            name: name.into(),
            passed: false,
            gating,
            measured: f64::NAN,
            threshold: f64::NAN,
            detail: format!("error: {err}"),
            elapsed_ms,
        },
    }
}

/// Runs one named check.
pub fn verify_one(name: &str, options: &VerifyOptions) -> Option<CheckResult> {
    CHECKS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|&(n, gating, check)| run_check(n, gating, check, options))
}

/// Runs the full suite, one thread per check.
pub fn verify(options: &VerifyOptions) -> VerifyReport {
    let started = Instant::now();
    let checks: Vec<CheckResult> = std::thread::scope(|scope| {
        let handles: Vec<_> = CHECKS
            .iter()
            .map(|&(name, gating, check)| {
                scope.spawn(move || run_check(name, gating, check, options))
            })
            .collect();
        handles
            .into_iter()
            .zip(CHECKS)
            .map(|(h, &(name, gating, _))| {
                h.join().unwrap_or_else(|_| CheckResult {
                    name: name.into(),
                    passed: false,
                    gating,
                    measured: f64::NAN,
                    threshold: f64::NAN,
                    detail: "check panicked".into(),
                    elapsed_ms: 0.0,
                })
            })
            .collect()
    });
    VerifyReport {
        passed: checks.iter().all(|c| c.passed || !c.gating),
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        options: options.clone(),
        checks,
    }
}

const TAUS: [f64; 3] = [0.1, 0.5, 1.0];
const NASH_TOL: f64 = 1e-9;
const NASH_BUDGET: usize = 1_000_000;

/// Random game `index` of a suite: `m` responses, `tau` cycling through
/// 0.1, 0.5, 1, and a uniform reference for even indices, random otherwise.
pub fn random_game(seed: u64, index: usize, m: usize) -> GameSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let pref = PreferenceMatrix::random(m, &mut rng);
    let uniform = Policy::uniform(m);
    let reference = if index % 2 == 0 {
        uniform
    } else {
        Policy::random_on_support(&uniform, &mut rng)
    };
    let space = crate::game::ResponseSpace::indexed(m).expect("m ≥ 2");
    GameSpec::new(space, pref, reference, TAUS[index % 3]).expect("valid random game")
}

fn instance_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(salt);
    rng
}

fn cyclic_benchmark(tau: f64) -> GameSpec {
    GameSpec::uniform(cyclic_matrix(3, 0.9).expect("valid cyclic game"), tau)
        .expect("valid cyclic game")
}

fn c_constant(b: f64, tau: f64) -> f64 {
    (b * tau).max(1.0)
}

fn nash_correctness(_: &VerifyOptions) -> Result<Outcome> {
    let two = PreferenceMatrix::new(vec![vec![0.5, 0.8], vec![0.2, 0.5]])?;
    let spec = GameSpec::uniform(two, 0.5)?;
    let q = 1.0 / (1.0 + (-0.6f64).exp());
    let closed = Policy::new(vec![q, 1.0 - q])?;
    let err_two = nash_solve(&spec, NASH_TOL, NASH_BUDGET)?.linf_distance(&closed);
    let cyclic = cyclic_benchmark(0.1);
    let err_cyclic = nash_solve(&cyclic, NASH_TOL, NASH_BUDGET)?.linf_distance(&Policy::uniform(3));
    Ok(at_most(
        err_two.max(err_cyclic),
        1e-6,
        format!("two-response L∞ error {err_two:.2e}, cyclic L∞ error {err_cyclic:.2e}"),
    ))
}

/// Largest `KL(π*, π_T) / bound(T)` over every `T` of the trace.
fn worst_rate_ratio(trace: &PlannerTrace, nash: &Policy, tau: f64) -> Result<f64> {
    let c = c_constant(trace.measured_b, tau);
    let mut worst: f64 = 0.0;
    for t in 1..trace.policies.len() {
        let kl = kl_divergence(nash, &trace.policies[t - 1])?;
        worst = worst.max(kl / theorem2_bound(c, tau, t));
    }
    Ok(worst)
}

fn theorem2_rate(options: &VerifyOptions) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for g in 0..options.games {
        let spec = random_game(options.seed, g, 8);
        let nash = nash_solve(&spec, NASH_TOL, NASH_BUDGET)?;
        let trace = run_planner(&spec, StepSchedule::Theorem2, options.horizon, Some(&nash))?;
        worst = worst.max(worst_rate_ratio(&trace, &nash, spec.tau)?);
    }
    let cyclic = cyclic_benchmark(0.1);
    let nash = nash_solve(&cyclic, NASH_TOL, NASH_BUDGET)?;
    let trace = run_planner(&cyclic, StepSchedule::Theorem2, options.horizon, Some(&nash))?;
    worst = worst.max(worst_rate_ratio(&trace, &nash, cyclic.tau)?);
    let final_kl = kl_divergence(&nash, &trace.policies[options.horizon - 1])?;
    Ok(Outcome {
        passed: worst <= 1.0 && final_kl <= 1e-3,
        measured: worst,
        threshold: 1.0,
        detail: format!(
            "max KL/bound ratio over T ≤ {} on {} random games and the cyclic game; cyclic final KL {final_kl:.2e} (threshold 1e-3)",
            options.horizon, options.games
        ),
    })
}

fn theorem2_recursion(options: &VerifyOptions) -> Result<Outcome> {
    let mut violations = 0usize;
    let mut checked = 0usize;
    for g in 0..options.games {
        let spec = random_game(options.seed, g, 8);
        let nash = nash_solve(&spec, NASH_TOL, NASH_BUDGET)?;
        let trace = run_planner(
            &spec,
            StepSchedule::Theorem2,
            options.recursion_horizon,
            Some(&nash),
        )?;
        let ok = verify_kl_recursion(&trace, &nash, spec.tau, &trace.etas)?;
        checked += ok.len();
        violations += ok.iter().filter(|b| !**b).count();
    }
    Ok(at_most(
        violations as f64,
        0.0,
        format!("{violations} violations over {checked} updates"),
    ))
}

/// `lemma1`-schedule run whose `B` comes from a pilot run with `B = 0`.
fn lemma1_run(spec: &GameSpec, horizon: usize, nash: &Policy) -> Result<(PlannerTrace, f64)> {
    let kappa = kappa_bound(&spec.ref_policy);
    let schedule = |b: f64| StepSchedule::Lemma1 {
        horizon,
        log_ratio_bound: b,
        kappa,
    };
    let pilot = run_planner(spec, schedule(0.0), horizon, None)?;
    let chosen = schedule(pilot.measured_b);
    let trace = run_planner(spec, chosen, horizon, Some(nash))?;
    Ok((trace, chosen.eta(1, spec.tau)))
}

fn lemma1_bound(options: &VerifyOptions) -> Result<Outcome> {
    let mut worst = f64::NEG_INFINITY;
    for g in 0..options.games {
        let spec = random_game(options.seed, g, 8);
        let nash = nash_solve(&spec, NASH_TOL, NASH_BUDGET)?;
        let kl_start = kl_divergence(&nash, &spec.ref_policy)?;
        for &horizon in &options.regret_horizons {
            let (trace, eta) = lemma1_run(&spec, horizon, &nash)?;
            let regret = *trace.regret_partials.last().expect("T ≥ 1");
            let bound = regret_bound(eta, kl_start, spec.tau, trace.measured_b, horizon);
            worst = worst.max(regret / bound);
        }
    }
    Ok(at_most(
        worst,
        1.0,
        format!(
            "max regret/bound ratio over T ∈ {:?} on {} random games",
            options.regret_horizons, options.games
        ),
    ))
}

fn theorem1_rate(options: &VerifyOptions) -> Result<Outcome> {
    let (base_t, rest) = options
        .trend_horizons
        .split_first()
        .expect("at least one trend horizon");
    let mut worst: f64 = 0.0;
    for g in 0..options.games {
        let spec = random_game(options.seed, g, 8);
        let nash = nash_solve(&spec, NASH_TOL, NASH_BUDGET)?;
        let scaled = |horizon: usize| -> Result<f64> {
            let (trace, _) = lemma1_run(&spec, horizon, &nash)?;
            Ok(trace.mixture_dual_gaps[horizon - 1] * (horizon as f64).sqrt())
        };
        let base = scaled(*base_t)?;
        for &horizon in rest {
            let value = scaled(horizon)?;
            let ratio = if base > 0.0 {
                value / base
            } else if value > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            worst = worst.max(ratio);
        }
    }
    Ok(at_most(
        worst,
        3.0,
        format!(
            "max of gap(mixture)·√T relative to T = {base_t} over T ∈ {rest:?}"
        ),
    ))
}

fn random_fit_instance(options: &VerifyOptions, i: usize) -> (GameSpec, Policy, f64) {
    let mut rng = instance_rng(options.seed, 100 + i as u64);
    let m = rng.gen_range(2..=8);
    let spec = random_game(options.seed.wrapping_add(7), i, m);
    let pi_t = Policy::random_on_support(&spec.ref_policy, &mut rng);
    let eta = spec.tau * rng.gen_range(1.0..4.0);
    (spec, pi_t, eta)
}

const FIT_INSTANCES: usize = 20;

fn lemma2_uniqueness(options: &VerifyOptions) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for i in 0..FIT_INSTANCES {
        let (spec, pi_t, eta) = random_fit_instance(options, i);
        let config = LearnConfig::exact(eta, spec.tau);
        let fit = fit_next_policy(FitData::Exact(&spec.pref), &pi_t, &spec.ref_policy, &config)?;
        let omd = omd_step(&spec, &pi_t, eta)?;
        worst = worst.max(fit.policy.linf_distance(&omd));
    }
    Ok(at_most(
        worst,
        1e-8,
        format!("max L∞ between exact fit and closed-form update over {FIT_INSTANCES} instances"),
    ))
}

fn eq6_identity(options: &VerifyOptions) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut pairs = 0usize;
    for i in 0..FIT_INSTANCES {
        let (spec, pi_t, eta) = random_fit_instance(options, i);
        let next = omd_step(&spec, &pi_t, eta)?;
        let wins = spec.pref.wins_against(&pi_t);
        for y in 0..spec.len() {
            for y_prime in 0..spec.len() {
                let h = h_value(&next, y, y_prime, &pi_t, &spec.ref_policy, spec.tau, eta)?;
                worst = worst.max((h - (wins[y] - wins[y_prime]) / eta).abs());
                pairs += 1;
            }
        }
    }
    Ok(at_most(
        worst,
        1e-10,
        format!("max |h − payoff difference/eta| over {pairs} pairs"),
    ))
}

fn prop1_equivalence(options: &VerifyOptions) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for g in 0..options.games {
        let spec = random_game(options.seed.wrapping_add(13), g, 5);
        let mut rng = instance_rng(options.seed, 200 + g as u64);
        let pi_t = Policy::random_on_support(&spec.ref_policy, &mut rng);
        let eta = spec.tau * rng.gen_range(1.0..4.0);
        let probes: Vec<Policy> = (0..10)
            .map(|_| Policy::random_on_support(&spec.ref_policy, &mut rng))
            .collect();
        worst = worst.max(verify_equivalence(&spec, &pi_t, eta, &probes)?.max_spread());
    }
    Ok(at_most(
        worst,
        1e-10,
        format!("max spread of loss differences over 10 probes on {} games", options.games),
    ))
}

fn sampled_consistency(options: &VerifyOptions) -> Result<Outcome> {
    const T: usize = 5;
    const ETA: f64 = 1.0;
    let mut rng = instance_rng(options.seed, 500);
    let pref = PreferenceMatrix::random(10, &mut rng);
    let spec = GameSpec::uniform(pref, ETA / 3.0)?;
    let exact = run_planner(&spec, StepSchedule::Constant { eta: ETA }, T, None)?;
    let mut oracle = PreferenceOracle::from_matrix(spec.pref.clone(), options.seed);
    let config = LearnConfig::sampled(ETA, spec.tau, options.sampled_pairs, CollectionMode::Plain);
    let sampled = run_inpo(&spec, &mut oracle, T, &config, None, options.seed)?;
    let worst = exact
        .policies
        .iter()
        .zip(&sampled.policies)
        .map(|(a, b)| a.tv_distance(b))
        .fold(0.0, f64::max);
    Ok(at_most(
        worst,
        0.02,
        format!(
            "max TV between sampled and exact iterates, m = 10, n = {}, T = {T}, eta = {ETA}, tau = eta/3",
            options.sampled_pairs
        ),
    ))
}

fn sampled_cyclic_gap(options: &VerifyOptions) -> Result<Outcome> {
    let spec = cyclic_benchmark(0.1);
    let mut oracle = PreferenceOracle::from_matrix(spec.pref.clone(), options.seed);
    let config = LearnConfig::sampled(0.3, 0.1, 20_000, CollectionMode::Plain);
    let trace = run_inpo(&spec, &mut oracle, 10, &config, None, options.seed)?;
    let gap = duality_gap(&spec, trace.last())?;
    Ok(at_most(
        gap,
        0.05,
        "final duality gap, cyclic game, tau = 0.1, eta = 0.3, n = 20000, T = 10".into(),
    ))
}

fn nash_dominance(options: &VerifyOptions) -> Result<Outcome> {
    let mut worst = f64::INFINITY;
    for g in 0..options.games {
        let spec = random_game(options.seed.wrapping_add(47), g, 8);
        let nash = nash_solve(&spec, 1e-8, NASH_BUDGET)?;
        let mut rng = instance_rng(options.seed, 300 + g as u64);
        for _ in 0..100 {
            let pi = Policy::random_on_support(&spec.ref_policy, &mut rng);
            worst = worst.min(game_value(&spec, &nash, &pi)?);
        }
    }
    Ok(Outcome {
        passed: worst >= 0.5 - 1e-6,
        measured: worst,
        threshold: 0.5 - 1e-6,
        detail: format!(
            "min J(nash, pi) over 100 random policies on {} games (lower bound)",
            options.games
        ),
    })
}

fn query_accounting(options: &VerifyOptions) -> Result<Outcome> {
    let spec = random_game(options.seed.wrapping_add(61), 0, 8);
    let mut oracle = PreferenceOracle::from_matrix(spec.pref.clone(), options.seed);
    let mut rng = instance_rng(options.seed, 400);
    let mut per_tournament: Vec<u64> = Vec::new();
    for _ in 0..100 {
        let responses: Vec<usize> = (0..8).collect::<Vec<_>>();
        let mut shuffled = responses.clone();
        for i in (1..8).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let before = oracle.query_count();
        tournament_select(&mut oracle, &shuffled)?;
        per_tournament.push(oracle.query_count() - before);
    }
    let all_eleven = per_tournament.iter().all(|&q| q == 11);

    let mut fresh = oracle.fork(0);
    let mut consistent = true;
    let mut total_attempts = 0usize;
    for t in 1..=3 {
        let before = fresh.query_count();
        let ds = collect_dataset(
            &mut fresh,
            &spec.ref_policy,
            100,
            CollectionMode::Tournament { k: 8 },
            options.seed,
            t,
        )?;
        total_attempts += ds.attempts;
        consistent &= fresh.query_count() - before == 11 * ds.attempts as u64;
    }
    let measured = per_tournament.iter().copied().max().unwrap_or(0) as f64;
    Ok(Outcome {
        passed: all_eleven && consistent && fresh.query_count() >= 3 * 100 * 11,
        measured,
        threshold: 11.0,
        detail: format!(
            "queries per K = 8 tournament over 100 brackets; collection used {} queries over {total_attempts} attempts",
            fresh.query_count()
        ),
    })
}

fn greedy_instability(_: &VerifyOptions) -> Result<Outcome> {
    const T: usize = 500;
    let spec = cyclic_benchmark(0.02);
    let mut pi = spec.ref_policy.clone();
    let mut min_greedy_gap = f64::INFINITY;
    for _ in 0..T {
        pi = greedy_step(&spec, &pi)?;
        min_greedy_gap = min_greedy_gap.min(duality_gap(&spec, &pi)?);
    }
    let omd = run_planner(&spec, StepSchedule::Theorem2, T, None)?;
    let omd_gap = *omd.dual_gaps.last().expect("T ≥ 1");
    Ok(Outcome {
        passed: min_greedy_gap > 0.2 && omd_gap < 1e-3,
        measured: min_greedy_gap,
        threshold: 0.2,
        detail: format!(
            "cyclic game, tau = 0.02: min greedy gap over {T} iterations {min_greedy_gap:.3e} (needs > 0.2), mirror descent final gap {omd_gap:.3e} (needs < 1e-3)"
        ),
    })
}

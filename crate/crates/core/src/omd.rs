//! Exact online mirror descent on the regularized preference game.
//!
//! Each round minimizes the linearized loss plus a KL proximity term,
//! `⟨∇ℓ_t(π_t), π⟩ + eta·KL(π ‖ π_t)`, whose solution is
//!
//! ```text
//! π_{t+1}(y) ∝ exp(P(y ≻ π_t)/eta) · ref(y)^{tau/eta} · π_t(y)^{1 − tau/eta}
//! ```
//!
//! All updates are carried out on log-weights.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{
    best_response, duality_gap_unchecked, kl_unchecked, win_prob, GameSpec, Policy,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StepSchedule {
    Constant {
        eta: f64,
    },
    /// `eta = max(B·tau, 1)·√T / √kappa` for a fixed horizon `T`.
    Lemma1 {
        horizon: usize,
        log_ratio_bound: f64,
        kappa: f64,
    },
    /// `eta_t = tau·(t + 2)/2`, with `t = 1` for the first update.
    Theorem2,
}

impl StepSchedule {
    pub fn eta(&self, t: usize, tau: f64) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::Lemma1 {
                horizon,
                log_ratio_bound,
                kappa,
            } => (log_ratio_bound * tau).max(1.0) * (horizon as f64).sqrt() / kappa.sqrt(),
            StepSchedule::Theorem2 => tau * (t as f64 + 2.0) / 2.0,
        }
    }

    pub fn validate(&self, tau: f64, iterations: usize) -> Result<()> {
        match *self {
            StepSchedule::Constant { eta } => {
                if !(eta > 0.0) || !eta.is_finite() {
                    return Err(Error::param("eta", format!("must be > 0, got {eta}")));
                }
                if eta < tau {
                    log::warn!(
                        "eta = {eta} < tau = {tau}: the update leaves the analyzed regime"
                    );
                }
            }
            StepSchedule::Lemma1 {
                horizon,
                log_ratio_bound,
                kappa,
            } => {
                if horizon < 1 {
                    return Err(Error::param("horizon", "must be ≥ 1"));
                }
                if horizon != iterations {
                    return Err(Error::param(
                        "horizon",
                        format!("lemma1 horizon {horizon} does not match T = {iterations}"),
                    ));
                }
                if !(log_ratio_bound >= 0.0) {
                    return Err(Error::param("log_ratio_bound", "must be ≥ 0"));
                }
                if !(kappa > 0.0) {
                    return Err(Error::param("kappa", "must be > 0"));
                }
            }
            StepSchedule::Theorem2 => {
                if !(tau > 0.0) {
                    return Err(Error::param("tau", "theorem2 schedule requires tau > 0"));
                }
            }
        }
        Ok(())
    }
}

/// Iterates and diagnostics of one planner run.
///
/// `policies[k]` is `π_{k+1}`, so `policies[0]` is the reference policy and
/// a run of `T` updates holds `T + 1` policies. Per-policy series
/// (`dual_gaps`, `kl_to_nash`, `b_so_far`) share that indexing.
/// Per-update series (`etas`, `gradients`, `grad_inf_norms`,
/// `regret_partials`, `mixture_dual_gaps`) have `T` entries, entry `k`
/// covering update `t = k + 1`; `mixture_dual_gaps[k]` is the gap of the
/// uniform mixture of `π_1 … π_{k+1}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlannerTrace {
    pub policies: Vec<Policy>,
    pub etas: Vec<f64>,
    pub gradients: Vec<Vec<f64>>,
    pub grad_inf_norms: Vec<f64>,
    /// Partial sums of regret against the supplied Nash policy.
    pub regret_partials: Vec<f64>,
    pub kl_to_nash: Vec<f64>,
    pub dual_gaps: Vec<f64>,
    pub mixture_dual_gaps: Vec<f64>,
    pub b_so_far: Vec<f64>,
    pub measured_b: f64,
}

impl PlannerTrace {
    pub fn iterations(&self) -> usize {
        self.etas.len()
    }

    pub fn last(&self) -> &Policy {
        self.policies.last().expect("trace holds at least π_1")
    }

    /// One JSON object per update.
    pub fn records(&self) -> Vec<TraceRecord> {
        (0..self.iterations())
            .map(|k| TraceRecord {
                t: k + 1,
                eta: self.etas[k],
                dual_gap: self.dual_gaps[k + 1],
                mixture_dual_gap: self.mixture_dual_gaps[k],
                kl_to_nash: self.kl_to_nash.get(k + 1).copied(),
                regret_partial: self.regret_partials.get(k).copied(),
                grad_inf_norm: self.grad_inf_norms[k],
                b_so_far: self.b_so_far[k + 1],
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for record in self.records() {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Row of the newline-delimited trace export. Record `t` reports the
/// update with step `eta_t`, the resulting iterate `π_{t+1}`, and the
/// uniform mixture of `π_1 … π_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub eta: f64,
    pub dual_gap: f64,
    pub mixture_dual_gap: f64,
    pub kl_to_nash: Option<f64>,
    pub regret_partial: Option<f64>,
    pub grad_inf_norm: f64,
    #[serde(rename = "B_so_far")]
    pub b_so_far: f64,
}

/// `ℓ_t(π) = −E_{y∼π, y'∼π_t}[P(y ≻ y')] + tau·KL(π ‖ ref)`.
pub fn loss_value(spec: &GameSpec, pi: &Policy, pi_t: &Policy) -> Result<f64> {
    spec.check(pi)?;
    spec.check(pi_t)?;
    Ok(-win_prob(&spec.pref, pi, pi_t)?
        + spec.tau * kl_unchecked(pi.probs(), spec.ref_policy.probs()))
}

/// `∇_y ℓ_t(π_t) = −P(y ≻ π_t) + tau·(log(π_t(y)/ref(y)) + 1)`; zero off
/// the reference support.
pub fn loss_gradient(spec: &GameSpec, pi_t: &Policy) -> Result<Vec<f64>> {
    spec.check(pi_t)?;
    Ok(gradient_unchecked(spec, pi_t))
}

fn gradient_unchecked(spec: &GameSpec, pi_t: &Policy) -> Vec<f64> {
    let wins = spec.pref.wins_against(pi_t);
    pi_t.probs()
        .iter()
        .zip(spec.ref_policy.probs())
        .zip(&wins)
        .map(|((&p, &r), &w)| {
            if r > 0.0 {
                -w + spec.tau * ((p / r).ln() + 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

pub fn omd_step(spec: &GameSpec, pi_t: &Policy, eta: f64) -> Result<Policy> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::param("eta", format!("must be > 0, got {eta}")));
    }
    spec.check(pi_t)?;
    let wins = spec.pref.wins_against(pi_t);
    let ratio = spec.tau / eta;
    let logits: Vec<f64> = pi_t
        .probs()
        .iter()
        .zip(spec.ref_policy.probs())
        .zip(&wins)
        .map(|((&p, &r), &w)| {
            if r > 0.0 {
                w / eta + ratio * r.ln() + (1.0 - ratio) * p.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Policy::from_log_weights(&logits)
}

/// The unstable baseline `π_{t+1} = argmin ℓ_t = BR(π_t)`; equivalently an
/// OMD step with `eta = tau`.
pub fn greedy_step(spec: &GameSpec, pi_t: &Policy) -> Result<Policy> {
    spec.check(pi_t)?;
    best_response(spec, pi_t)
}

pub(crate) fn max_log_ratio(pi: &Policy, reference: &Policy) -> f64 {
    pi.probs()
        .iter()
        .zip(reference.probs())
        .filter(|(_, r)| **r > 0.0)
        .map(|(p, r)| (p / r).ln().abs())
        .fold(0.0, f64::max)
}

/// Runs `iterations` mirror-descent updates from `π_1 = ref`.
pub fn run_planner(
    spec: &GameSpec,
    schedule: StepSchedule,
    iterations: usize,
    nash_ref: Option<&Policy>,
) -> Result<PlannerTrace> {
    run_planner_observed(spec, schedule, iterations, nash_ref, &mut |_| {})
}

/// [`run_planner`] that hands the trace to `observer` after every update.
pub fn run_planner_observed(
    spec: &GameSpec,
    schedule: StepSchedule,
    iterations: usize,
    nash_ref: Option<&Policy>,
    observer: &mut dyn FnMut(&PlannerTrace),
) -> Result<PlannerTrace> {
    if iterations < 1 {
        return Err(Error::param("T", "must be ≥ 1"));
    }
    schedule.validate(spec.tau, iterations)?;
    if let Some(nash) = nash_ref {
        spec.check(nash)?;
    }
    let reference = &spec.ref_policy;
    let m = spec.len();
    let mut trace = PlannerTrace {
        policies: vec![reference.clone()],
        etas: Vec::with_capacity(iterations),
        gradients: Vec::with_capacity(iterations),
        grad_inf_norms: Vec::with_capacity(iterations),
        regret_partials: Vec::new(),
        kl_to_nash: Vec::new(),
        dual_gaps: vec![duality_gap_unchecked(spec, reference)],
        mixture_dual_gaps: Vec::with_capacity(iterations),
        b_so_far: vec![0.0],
        measured_b: 0.0,
    };
    if let Some(nash) = nash_ref {
        trace.kl_to_nash.push(kl_unchecked(nash.probs(), reference.probs()));
    }
    let mut mixture_sum = vec![0.0; m];
    let mut regret = 0.0;
    for t in 1..=iterations {
        let pi_t = trace.policies[t - 1].clone();
        let eta = schedule.eta(t, spec.tau);
        let grad = gradient_unchecked(spec, &pi_t);
        let support = reference.probs().iter().map(|&r| r > 0.0);
        let inf_norm = grad
            .iter()
            .zip(support)
            .filter(|(_, s)| *s)
            .map(|(g, _)| g.abs())
            .fold(0.0, f64::max);
        if let Some(nash) = nash_ref {
            regret += grad
                .iter()
                .zip(pi_t.probs().iter().zip(nash.probs()))
                .map(|(g, (p, q))| g * (p - q))
                .sum::<f64>();
            trace.regret_partials.push(regret);
        }
        for (s, p) in mixture_sum.iter_mut().zip(pi_t.probs()) {
            *s += p;
        }
        let mixture = mixture_from_sum(&mixture_sum, t);
        trace
            .mixture_dual_gaps
            .push(duality_gap_unchecked(spec, &mixture));

        let next = omd_step(spec, &pi_t, eta)?;
        let b = trace.measured_b.max(max_log_ratio(&next, reference));
        trace.measured_b = b;
        trace.b_so_far.push(b);
        trace.dual_gaps.push(duality_gap_unchecked(spec, &next));
        if let Some(nash) = nash_ref {
            trace.kl_to_nash.push(kl_unchecked(nash.probs(), next.probs()));
        }
        trace.etas.push(eta);
        trace.gradients.push(grad);
        trace.grad_inf_norms.push(inf_norm);
        trace.policies.push(next);
        observer(&trace);
    }
    Ok(trace)
}

fn mixture_from_sum(sum: &[f64], count: usize) -> Policy {
    let total: f64 = sum.iter().sum();
    debug_assert!((total - count as f64).abs() < 1e-9 * count as f64);
    Policy::new(sum.iter().map(|s| s / total).collect()).expect("mixture of policies")
}

/// `π̄_T = (1/T)·Σ_{t=1..T} π_t`, averaged in probability space.
pub fn mixture_policy(trace: &PlannerTrace, horizon: usize) -> Result<Policy> {
    if horizon == 0 {
        return Err(Error::param("T", "mixture of zero iterates"));
    }
    if horizon > trace.policies.len() {
        return Err(Error::param(
            "T",
            format!("trace holds only {} policies", trace.policies.len()),
        ));
    }
    let m = trace.policies[0].len();
    let mut sum = vec![0.0; m];
    for pi in &trace.policies[..horizon] {
        for (s, p) in sum.iter_mut().zip(pi.probs()) {
            *s += p;
        }
    }
    Ok(mixture_from_sum(&sum, horizon))
}

/// `Σ_t ⟨∇ℓ_t(π_t), π_t⟩ − Σ_t ⟨∇ℓ_t(π_t), comparator⟩` over all updates in
/// the trace.
pub fn regret(trace: &PlannerTrace, comparator: &Policy) -> Result<f64> {
    regret_upto(trace, comparator, trace.iterations())
}

pub fn regret_upto(trace: &PlannerTrace, comparator: &Policy, horizon: usize) -> Result<f64> {
    let reference = &trace.policies[0];
    comparator.check_class(reference)?;
    if horizon > trace.iterations() {
        return Err(Error::param("T", "horizon exceeds trace length"));
    }
    Ok((0..horizon)
        .map(|k| {
            trace.gradients[k]
                .iter()
                .zip(trace.policies[k].probs().iter().zip(comparator.probs()))
                .map(|(g, (p, q))| g * (p - q))
                .sum::<f64>()
        })
        .sum())
}

/// `max_t max_{y ∈ supp(ref)} |log(π_t(y)/ref(y))|` over every policy in
/// the trace.
pub fn measure_b(trace: &PlannerTrace, reference: &Policy) -> f64 {
    trace
        .policies
        .iter()
        .map(|pi| max_log_ratio(pi, reference))
        .fold(0.0, f64::max)
}

/// `max_y log(1/ref(y))` over the support: the supremum of `KL(π ‖ ref)`
/// over the closure of the policy class.
pub fn kappa_bound(reference: &Policy) -> f64 {
    reference
        .probs()
        .iter()
        .filter(|r| **r > 0.0)
        .map(|r| -r.ln())
        .fold(0.0, f64::max)
}

/// Checks `KL(π*, π_{t+1}) ≤ (1 − tau/eta_t)·KL(π*, π_t) + 8C²/eta_t²` for
/// each update, with `C = max(B·tau, 1)` and `B` measured on the trace.
pub fn verify_kl_recursion(
    trace: &PlannerTrace,
    nash: &Policy,
    tau: f64,
    etas: &[f64],
) -> Result<Vec<bool>> {
    if etas.len() + 1 > trace.policies.len() {
        return Err(Error::param("etas", "more steps than the trace holds"));
    }
    if let Some(&eta) = etas.iter().find(|&&eta| eta < tau) {
        return Err(Error::param(
            "eta",
            format!("eta = {eta} < tau = {tau} makes the recursion coefficient negative"),
        ));
    }
    nash.check_class(&trace.policies[0])?;
    let c = (trace.measured_b * tau).max(1.0);
    Ok(etas
        .iter()
        .enumerate()
        .map(|(k, &eta)| {
            let before = kl_unchecked(nash.probs(), trace.policies[k].probs());
            let after = kl_unchecked(nash.probs(), trace.policies[k + 1].probs());
            let bound = (1.0 - tau / eta) * before + 8.0 * c * c / (eta * eta);
            after <= bound + 1e-12
        })
        .collect())
}

/// The last-iterate bound `32C²/(tau²(T + 1))` on `KL(π*, π_T)`.
pub fn theorem2_bound(c: f64, tau: f64, horizon: usize) -> f64 {
    32.0 * c * c / (tau * tau * (horizon as f64 + 1.0))
}

/// `eta·KL(π* ‖ π_1) + (4tau²B² + 1)·T/eta`, the explicit regret bound for a
/// constant step.
pub fn regret_bound(eta: f64, kl_to_start: f64, tau: f64, b: f64, horizon: usize) -> f64 {
    eta * kl_to_start + (4.0 * tau * tau * b * b + 1.0) * horizon as f64 / eta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{game_value, sigmoid, PreferenceMatrix};
    use crate::oracle::cyclic_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two(p: f64, tau: f64) -> GameSpec {
        GameSpec::uniform(PreferenceMatrix::from_upper(2, |_, _| p).unwrap(), tau).unwrap()
    }

    fn pol(v: &[f64]) -> Policy {
        Policy::new(v.to_vec()).unwrap()
    }

    #[test]
    fn loss_value_examples() {
        let spec = two(0.8, 0.5);
        let u = Policy::uniform(2);
        assert!((loss_value(&spec, &u, &u).unwrap() + 0.5).abs() < 1e-15);
        let v = loss_value(&spec, &pol(&[0.9, 0.1]), &u).unwrap();
        let kl = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((v - (-0.62 + 0.5 * kl)).abs() < 1e-12);
        assert!((v + 0.436).abs() < 1e-3);
    }

    #[test]
    fn best_response_minimizes_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = GameSpec::uniform(PreferenceMatrix::random(4, &mut rng), 0.3).unwrap();
        let pi_t = Policy::random_on_support(&spec.ref_policy, &mut rng);
        let br = greedy_step(&spec, &pi_t).unwrap();
        let best = loss_value(&spec, &br, &pi_t).unwrap();
        for _ in 0..1000 {
            let other = Policy::random_on_support(&spec.ref_policy, &mut rng);
            assert!(best <= loss_value(&spec, &other, &pi_t).unwrap() + 1e-12);
        }
    }

    #[test]
    fn gradient_examples() {
        let spec = two(0.8, 0.5);
        let g = loss_gradient(&spec, &Policy::uniform(2)).unwrap();
        assert!((g[0] + 0.15).abs() < 1e-12 && (g[1] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn omd_step_examples() {
        let spec = two(0.8, 0.5);
        let next = omd_step(&spec, &Policy::uniform(2), 1.0).unwrap();
        assert!((next.probs()[0] - sigmoid(0.3)).abs() < 1e-12);

        let flat = GameSpec::uniform(PreferenceMatrix::indifferent(3), 0.2).unwrap();
        assert_eq!(omd_step(&flat, &flat.ref_policy, 0.7).unwrap(), flat.ref_policy);
        assert!(omd_step(&flat, &flat.ref_policy, 0.0).is_err());
    }

    #[test]
    fn omd_step_with_eta_equal_tau_ignores_current_policy() {
        // with P indifferent the win vector is constant for every π_t, so
        // only the π_t factor could differ between the two calls
        let flat = GameSpec::new(
            crate::game::ResponseSpace::indexed(3).unwrap(),
            PreferenceMatrix::indifferent(3),
            pol(&[0.5, 0.3, 0.2]),
            0.4,
        )
        .unwrap();
        let a = omd_step(&flat, &pol(&[0.1, 0.1, 0.8]), 0.4).unwrap();
        let b = omd_step(&flat, &pol(&[0.7, 0.2, 0.1]), 0.4).unwrap();
        assert!(a.linf_distance(&b) < 1e-15);
    }

    #[test]
    fn omd_step_ignores_gradient_shift() {
        // shifting the gradient by a constant shifts every logit equally
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = GameSpec::uniform(PreferenceMatrix::random(5, &mut rng), 0.2).unwrap();
        let pi_t = Policy::random_on_support(&spec.ref_policy, &mut rng);
        let eta = 0.9;
        let grad = loss_gradient(&spec, &pi_t).unwrap();
        let shifted: Vec<f64> = pi_t
            .log_probs()
            .iter()
            .zip(&grad)
            .map(|(lp, g)| lp - (g + 3.7) / eta)
            .collect();
        let via_grad = Policy::from_log_weights(&shifted).unwrap();
        let closed = omd_step(&spec, &pi_t, eta).unwrap();
        assert!(via_grad.linf_distance(&closed) < 1e-12);
    }

    #[test]
    fn planner_trivial_game_stays_at_reference() {
        let flat = GameSpec::uniform(PreferenceMatrix::indifferent(3), 0.2).unwrap();
        let trace = run_planner(&flat, StepSchedule::Theorem2, 1, None).unwrap();
        assert_eq!(trace.policies.len(), 2);
        assert!(trace.policies[1].linf_distance(&flat.ref_policy) < 1e-15);
        assert!(regret(&trace, &pol(&[0.1, 0.2, 0.7])).unwrap().abs() < 1e-15);
    }

    #[test]
    fn planner_lemma1_horizon_must_match() {
        let spec = two(0.8, 0.5);
        let schedule = StepSchedule::Lemma1 {
            horizon: 10,
            log_ratio_bound: 1.0,
            kappa: 2f64.ln(),
        };
        assert!(run_planner(&spec, schedule, 9, None).is_err());
        assert!(run_planner(&spec, schedule, 10, None).is_ok());
        assert!(run_planner(&spec, StepSchedule::Theorem2, 0, None).is_err());
    }

    #[test]
    fn theorem2_two_response_example() {
        let spec = two(0.8, 0.5);
        let s = sigmoid(0.6);
        let nash = pol(&[s, 1.0 - s]);
        let trace = run_planner(&spec, StepSchedule::Theorem2, 127, Some(&nash)).unwrap();
        let c = (trace.measured_b * 0.5).max(1.0);
        assert_eq!(c, 1.0);
        assert!(trace.kl_to_nash[126] <= theorem2_bound(c, 0.5, 127));
        assert!((theorem2_bound(1.0, 0.5, 127) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn theorem2_cyclic_example() {
        let spec = GameSpec::uniform(cyclic_matrix(3, 0.9).unwrap(), 0.1).unwrap();
        let nash = Policy::uniform(3);
        let trace = run_planner(&spec, StepSchedule::Theorem2, 500, Some(&nash)).unwrap();
        let c = (trace.measured_b * 0.1).max(1.0);
        assert!(trace.kl_to_nash[499] <= theorem2_bound(c, 0.1, 500));
    }

    #[test]
    fn mixture_examples() {
        let spec = two(0.8, 0.5);
        let mut trace = run_planner(&spec, StepSchedule::Theorem2, 1, None).unwrap();
        trace.policies = vec![pol(&[0.6, 0.4]), pol(&[0.4, 0.6])];
        let mix = mixture_policy(&trace, 2).unwrap();
        assert!(mix.linf_distance(&Policy::uniform(2)) < 1e-15);
        assert!(mixture_policy(&trace, 0).is_err());
        assert!(mixture_policy(&trace, 3).is_err());
        trace.policies = vec![pol(&[0.3, 0.7]); 2];
        assert!(mixture_policy(&trace, 2).unwrap().linf_distance(&pol(&[0.3, 0.7])) < 1e-15);
    }

    #[test]
    fn regret_first_step_example() {
        let spec = two(0.8, 0.5);
        let s = sigmoid(0.6);
        let nash = pol(&[s, 1.0 - s]);
        let trace = run_planner(&spec, StepSchedule::Constant { eta: 1.0 }, 1, Some(&nash)).unwrap();
        let r = regret(&trace, &nash).unwrap();
        // ⟨−P(·≻ref) + tau, ref − π*⟩ = P(π* ≻ ref) − ½
        let expected = crate::game::win_prob(&spec.pref, &nash, &spec.ref_policy).unwrap() - 0.5;
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.0437).abs() < 1e-4);
        assert!(regret(&trace, &spec.ref_policy).unwrap().abs() < 1e-15);
        assert!((trace.regret_partials[0] - r).abs() < 1e-15);
    }

    #[test]
    fn measure_b_examples() {
        let spec = two(0.8, 0.5);
        let mut trace = run_planner(&spec, StepSchedule::Theorem2, 1, None).unwrap();
        trace.policies = vec![spec.ref_policy.clone(); 3];
        assert_eq!(measure_b(&trace, &spec.ref_policy), 0.0);
        trace.policies = vec![pol(&[0.6457, 0.3543])];
        let b = measure_b(&trace, &spec.ref_policy);
        assert!((b - 0.3444).abs() < 1e-4);
        trace.policies.push(pol(&[0.5, 0.5]));
        assert!(measure_b(&trace, &spec.ref_policy) >= b);
    }

    #[test]
    fn kappa_examples() {
        assert!((kappa_bound(&Policy::uniform(4)) - 4f64.ln()).abs() < 1e-15);
        assert!((kappa_bound(&pol(&[0.9, 0.1])) - 10f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reference = pol(&[0.5, 0.2, 0.2, 0.1]);
        let kappa = kappa_bound(&reference);
        for _ in 0..1000 {
            let pi = Policy::random_on_support(&reference, &mut rng);
            assert!(crate::game::kl_divergence(&pi, &reference).unwrap() <= kappa + 1e-12);
        }
    }

    #[test]
    fn greedy_examples() {
        let spec = two(0.8, 1.0);
        let g = greedy_step(&spec, &Policy::uniform(2)).unwrap();
        assert!((g.probs()[0] - 0.5744).abs() < 1e-4);
        assert!(greedy_step(&two(0.8, 0.0), &Policy::uniform(2)).is_err());
        let flat = GameSpec::uniform(PreferenceMatrix::indifferent(3), 0.2).unwrap();
        assert!(greedy_step(&flat, &flat.ref_policy).unwrap().linf_distance(&flat.ref_policy) < 1e-15);
        // greedy is OMD with eta = tau
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = GameSpec::uniform(PreferenceMatrix::random(5, &mut rng), 0.3).unwrap();
        let pi = Policy::random_on_support(&spec.ref_policy, &mut rng);
        let a = greedy_step(&spec, &pi).unwrap();
        let b = omd_step(&spec, &pi, 0.3).unwrap();
        assert!(a.linf_distance(&b) < 1e-14);
    }

    #[test]
    fn kl_recursion_examples() {
        let flat = GameSpec::uniform(PreferenceMatrix::indifferent(3), 0.2).unwrap();
        let trace = run_planner(&flat, StepSchedule::Theorem2, 5, None).unwrap();
        assert!(verify_kl_recursion(&trace, &flat.ref_policy, 0.2, &trace.etas)
            .unwrap()
            .iter()
            .all(|&ok| ok));

        let spec = GameSpec::uniform(cyclic_matrix(3, 0.9).unwrap(), 0.1).unwrap();
        let trace = run_planner(&spec, StepSchedule::Theorem2, 200, None).unwrap();
        let ok = verify_kl_recursion(&trace, &Policy::uniform(3), 0.1, &trace.etas).unwrap();
        assert_eq!(ok.len(), 200);
        assert!(ok.iter().all(|&x| x));

        let spec = two(0.8, 0.5);
        let s = sigmoid(0.6);
        let nash = pol(&[s, 1.0 - s]);
        let trace = run_planner(&spec, StepSchedule::Constant { eta: 2.0 }, 100, None).unwrap();
        assert!(verify_kl_recursion(&trace, &nash, 0.5, &trace.etas)
            .unwrap()
            .iter()
            .all(|&x| x));
        assert!(verify_kl_recursion(&trace, &nash, 0.5, &[0.4]).is_err());
    }

    #[test]
    fn trace_records_line_up() {
        let spec = two(0.8, 0.5);
        let s = sigmoid(0.6);
        let nash = pol(&[s, 1.0 - s]);
        let trace = run_planner(&spec, StepSchedule::Theorem2, 4, Some(&nash)).unwrap();
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["t", "eta", "dual_gap", "mixture_dual_gap", "kl_to_nash", "regret_partial", "grad_inf_norm", "B_so_far"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(first["t"], 1);
        assert!((first["eta"].as_f64().unwrap() - 0.75).abs() < 1e-15);
        let _ = game_value(&spec, &nash, &nash).unwrap();
    }
}

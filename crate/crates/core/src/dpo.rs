//! Tabular DPO baseline.
//!
//! Parameterizes `π(y) ∝ ref(y)·exp(θ(y))` and minimizes
//!
//! ```text
//! −mean log σ(β·(θ(y_w) − θ(y_l))) + (ridge/2)·‖θ‖²
//! ```
//!
//! by damped Newton steps. Repeating the step on fresh data drawn from the
//! current policy gives iterative DPO.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::{sigmoid, GameSpec, Policy};
use crate::learner::RunTrace;
use crate::oracle::{collect_dataset, CollectionMode, PreferenceDataset, PreferenceOracle};

/// Newton stops at `STOP_TOL`; a run that stalls above it is still accepted
/// below `GRAD_TOL`.
const STOP_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-8;
const MAX_NEWTON: usize = 200;

/// Every node reaches every other along winner→loser edges.
fn strongly_connected(edges: &[(usize, usize, f64)], dim: usize) -> bool {
    let reach = |forward: bool| {
        let mut seen = vec![false; dim];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(node) = stack.pop() {
            for &(w, l, _) in edges {
                let (from, to) = if forward { (w, l) } else { (l, w) };
                if from == node && !seen[to] {
                    seen[to] = true;
                    stack.push(to);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct DpoObjective {
    /// `(winner, loser, weight)` on local support indices.
    counts: Vec<(usize, usize, f64)>,
    beta: f64,
    ridge: f64,
    dim: usize,
}

impl DpoObjective {
    fn value(&self, theta: &DVector<f64>) -> f64 {
        let data: f64 = self
            .counts
            .iter()
            .map(|&(w, l, c)| c * softplus(-self.beta * (theta[w] - theta[l])))
            .sum();
        data + 0.5 * self.ridge * theta.norm_squared()
    }

    fn gradient_hessian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut grad = theta * self.ridge;
        let mut hess = DMatrix::<f64>::identity(self.dim, self.dim) * self.ridge;
        for &(w, l, c) in &self.counts {
            let z = self.beta * (theta[w] - theta[l]);
            let s = sigmoid(-z);
            grad[w] -= c * self.beta * s;
            grad[l] += c * self.beta * s;
            let curv = c * self.beta * self.beta * s * (1.0 - s);
            hess[(w, w)] += curv;
            hess[(l, l)] += curv;
            hess[(w, l)] -= curv;
            hess[(l, w)] -= curv;
        }
        (grad, hess)
    }
}

/// One DPO fit on `dataset`, warm-started from `pi_t`.
pub fn dpo_baseline_step(
    dataset: &PreferenceDataset,
    pi_t: &Policy,
    reference: &Policy,
    beta: f64,
    ridge: f64,
) -> Result<Policy> {
    if !(beta > 0.0) {
        return Err(Error::param("beta", format!("must be > 0, got {beta}")));
    }
    if !(ridge >= 0.0) {
        return Err(Error::param("ridge", format!("must be ≥ 0, got {ridge}")));
    }
    if dataset.is_empty() {
        return Err(Error::param("dataset", "empty preference dataset"));
    }
    pi_t.check_class(reference)?;
    let support = reference.support();
    let dim = support.len();
    let mut local = vec![usize::MAX; reference.len()];
    for (k, &y) in support.iter().enumerate() {
        local[y] = k;
    }
    let mut table = vec![0.0; dim * dim];
    let weight = 1.0 / dataset.len() as f64;
    for pair in &dataset.pairs {
        let (w, l) = (pair.winner, pair.loser);
        if w >= local.len() || local[w] == usize::MAX {
            return Err(Error::SupportMismatch(w));
        }
        if l >= local.len() || local[l] == usize::MAX {
            return Err(Error::SupportMismatch(l));
        }
        if w != l {
            table[local[w] * dim + local[l]] += weight;
        }
    }
    let counts: Vec<(usize, usize, f64)> = table
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0.0)
        .map(|(idx, &c)| (idx / dim, idx % dim, c))
        .collect();
    if ridge == 0.0 && !strongly_connected(&counts, dim) {
        return Err(Error::param(
            "ridge",
            "without regularization the fit needs every response to both win and lose \
             along a cycle of observed pairs; the data are separable",
        ));
    }
    let objective = DpoObjective {
        counts,
        beta,
        ridge,
        dim,
    };

    let mut theta = DVector::<f64>::from_iterator(
        dim,
        support
            .iter()
            .map(|&y| (pi_t.probs()[y] / reference.probs()[y]).ln()),
    );
    let mean = theta.mean();
    theta.add_scalar_mut(-mean);
    let pin = DMatrix::<f64>::from_element(dim, dim, 1.0 / dim as f64);

    let mut value = objective.value(&theta);
    let mut converged = false;
    for _ in 0..MAX_NEWTON {
        let (grad, hess) = objective.gradient_hessian(&theta);
        if grad.amax() <= STOP_TOL {
            converged = true;
            break;
        }
        // the gradient is orthogonal to the constant direction, so the pin
        // only removes the gauge freedom of the unregularized Hessian
        let system = hess + &pin;
        let step = system
            .clone()
            .cholesky()
            .map(|c| c.solve(&grad))
            .or_else(|| system.lu().solve(&grad))
            .ok_or_else(|| Error::SingularSystem("DPO Hessian is singular".into()))?;
        let slope = -grad.dot(&step);
        let mut size = 1.0;
        let mut accepted = false;
        while size > 1e-12 {
            let candidate = &theta - &step * size;
            let next = objective.value(&candidate);
            if next <= value + 1e-4 * size * slope {
                theta = candidate;
                value = next;
                accepted = true;
                break;
            }
            size *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        let (grad, _) = objective.gradient_hessian(&theta);
        if grad.amax() > GRAD_TOL {
            return Err(Error::NotConverged {
                iterations: MAX_NEWTON,
                gap: grad.amax(),
                best: Box::new(policy_from_theta(&theta, &support, reference)?),
            });
        }
    }
    policy_from_theta(&theta, &support, reference)
}

fn policy_from_theta(theta: &DVector<f64>, support: &[usize], reference: &Policy) -> Result<Policy> {
    let mut logits = vec![f64::NEG_INFINITY; reference.len()];
    for (k, &y) in support.iter().enumerate() {
        logits[y] = reference.probs()[y].ln() + theta[k];
    }
    Policy::from_log_weights(&logits)
}

/// Iterative DPO: each round collects `n` pairs from the current policy and
/// refits against the reference policy.
#[allow(clippy::too_many_arguments)]
pub fn run_iterative_dpo(
    spec: &GameSpec,
    oracle: &mut PreferenceOracle,
    iterations: usize,
    beta: f64,
    n: usize,
    collection: CollectionMode,
    ridge: f64,
    nash_ref: Option<&Policy>,
    seed: u64,
) -> Result<RunTrace> {
    run_iterative_dpo_observed(
        spec, oracle, iterations, beta, n, collection, ridge, nash_ref, seed, &mut |_| {},
    )
}

/// [`run_iterative_dpo`] that hands the trace to `observer` after every round.
#[allow(clippy::too_many_arguments)]
pub fn run_iterative_dpo_observed(
    spec: &GameSpec,
    oracle: &mut PreferenceOracle,
    iterations: usize,
    beta: f64,
    n: usize,
    collection: CollectionMode,
    ridge: f64,
    nash_ref: Option<&Policy>,
    seed: u64,
    observer: &mut dyn FnMut(&RunTrace),
) -> Result<RunTrace> {
    if iterations < 1 {
        return Err(Error::param("T", "must be ≥ 1"));
    }
    let mut trace = RunTrace::start(spec, nash_ref);
    for t in 1..=iterations {
        let pi_t = trace.policies[t - 1].clone();
        let dataset = collect_dataset(oracle, &pi_t, n, collection, seed, t)?;
        let next = dpo_baseline_step(&dataset, &pi_t, &spec.ref_policy, beta, ridge)?;
        trace.push(spec, next, nash_ref, oracle.query_count(), dataset.len(), f64::NAN);
        observer(&trace);
    }
    Ok(trace)
}

//! Learning the next mirror-descent iterate from preference data.
//!
//! Writing a candidate policy as `log π(y) = g_t(y) + u(y) − log Z` with the
//! geometric-mixture prior
//!
//! ```text
//! g_t(y) = (tau/eta)·log ref(y) + (1 − tau/eta)·log π_t(y)
//! ```
//!
//! makes `h_t(π, y, y') = u(y) − u(y')`. The squared loss over preference
//! pairs `(h_t(π, y_w, y_l) − 1/(2·eta))²` is then a convex quadratic in the
//! residual vector `u`, minimized by one linear solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{duality_gap_unchecked, kl_unchecked, GameSpec, Policy, PreferenceMatrix};
use crate::oracle::{collect_dataset, CollectionMode, PreferenceDataset, PreferenceOracle};

pub const SAMPLED_RIDGE: f64 = 1e-6;
pub const EXACT_RIDGE: f64 = 0.0;

/// Condition numbers are only computed up to this many responses.
const CONDITION_LIMIT: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LearnMode {
    /// Pair weights from full enumeration of `π_t ⊗ π_t ⊗ λ_p`.
    Exact,
    /// `n` pairs per iteration collected from the oracle.
    Sampled { n: usize, collection: CollectionMode },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub eta: f64,
    pub tau: f64,
    pub ridge: f64,
    pub mode: LearnMode,
}

impl LearnConfig {
    pub fn exact(eta: f64, tau: f64) -> Self {
        Self {
            eta,
            tau,
            ridge: EXACT_RIDGE,
            mode: LearnMode::Exact,
        }
    }

    pub fn sampled(eta: f64, tau: f64, n: usize, collection: CollectionMode) -> Self {
        Self {
            eta,
            tau,
            ridge: SAMPLED_RIDGE,
            mode: LearnMode::Sampled { n, collection },
        }
    }

    /// `tau = eta/3`.
    pub fn with_default_tau(eta: f64, mode: LearnMode) -> Self {
        let mut config = Self::exact(eta, eta / 3.0);
        config.mode = mode;
        if matches!(mode, LearnMode::Sampled { .. }) {
            config.ridge = SAMPLED_RIDGE;
        }
        config
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::param("eta", format!("must be > 0, got {}", self.eta)));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::param("tau", format!("must be ≥ 0, got {}", self.tau)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::param("ridge", format!("must be ≥ 0, got {}", self.ridge)));
        }
        if let LearnMode::Sampled { n, .. } = self.mode {
            if n == 0 {
                return Err(Error::param("n", "must be ≥ 1"));
            }
        }
        if self.eta < self.tau {
            log::warn!(
                "eta = {} < tau = {}: the update leaves the analyzed regime",
                self.eta,
                self.tau
            );
        }
        Ok(())
    }
}

/// `u` in `log π(y) = g_t(y) + u(y) − log Z`, pinned to mean zero over the
/// reference support (zero off support).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualVector {
    pub u: Vec<f64>,
}

/// `g_t(y)`; `-inf` off the reference support.
pub fn prior_logits(pi_t: &Policy, reference: &Policy, tau: f64, eta: f64) -> Vec<f64> {
    let ratio = tau / eta;
    pi_t.probs()
        .iter()
        .zip(reference.probs())
        .map(|(&p, &r)| {
            if r > 0.0 {
                ratio * r.ln() + (1.0 - ratio) * p.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

impl ResidualVector {
    pub fn zeros(m: usize) -> Self {
        Self { u: vec![0.0; m] }
    }

    pub fn from_policy(
        pi: &Policy,
        pi_t: &Policy,
        reference: &Policy,
        tau: f64,
        eta: f64,
    ) -> Result<Self> {
        pi.check_class(reference)?;
        pi_t.check_class(reference)?;
        let g = prior_logits(pi_t, reference, tau, eta);
        let mut u: Vec<f64> = pi
            .probs()
            .iter()
            .zip(&g)
            .map(|(p, g)| if g.is_finite() { p.ln() - g } else { 0.0 })
            .collect();
        center_on_support(&mut u, reference);
        Ok(Self { u })
    }

    pub fn to_policy(
        &self,
        pi_t: &Policy,
        reference: &Policy,
        tau: f64,
        eta: f64,
    ) -> Result<Policy> {
        let g = prior_logits(pi_t, reference, tau, eta);
        let logits: Vec<f64> = g.iter().zip(&self.u).map(|(g, u)| g + u).collect();
        Policy::from_log_weights(&logits)
    }
}

fn center_on_support(u: &mut [f64], reference: &Policy) {
    let support = reference.support();
    let mean = support.iter().map(|&i| u[i]).sum::<f64>() / support.len() as f64;
    for &i in &support {
        u[i] -= mean;
    }
}

fn check_response(reference: &Policy, y: usize) -> Result<()> {
    match reference.probs().get(y) {
        Some(&r) if r > 0.0 => Ok(()),
        Some(_) => Err(Error::SupportMismatch(y)),
        None => Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: y + 1,
        }),
    }
}

/// `h_t(π, y, y') = log(π(y)/π(y')) − (tau/eta)·log(ref(y)/ref(y'))
///  − ((eta − tau)/eta)·log(π_t(y)/π_t(y'))`.
pub fn h_value(
    pi: &Policy,
    y: usize,
    y_prime: usize,
    pi_t: &Policy,
    reference: &Policy,
    tau: f64,
    eta: f64,
) -> Result<f64> {
    check_response(reference, y)?;
    check_response(reference, y_prime)?;
    pi.check_class(reference)?;
    pi_t.check_class(reference)?;
    Ok(h_unchecked(pi, y, y_prime, pi_t, reference, tau / eta))
}

fn h_unchecked(
    pi: &Policy,
    y: usize,
    y_prime: usize,
    pi_t: &Policy,
    reference: &Policy,
    ratio: f64,
) -> f64 {
    if y == y_prime {
        return 0.0;
    }
    let log_ratio = |p: &Policy| (p.probs()[y] / p.probs()[y_prime]).ln();
    log_ratio(pi) - ratio * log_ratio(reference) - (1.0 - ratio) * log_ratio(pi_t)
}

/// `h_t(π, y, y')` for every pair on the support, as a dense table.
fn h_table(pi: &Policy, pi_t: &Policy, spec: &GameSpec, eta: f64) -> Vec<Vec<f64>> {
    let m = spec.len();
    let ratio = spec.tau / eta;
    let support = spec.ref_policy.support();
    let mut table = vec![vec![0.0; m]; m];
    for &y in &support {
        for &y_prime in &support {
            table[y][y_prime] = h_unchecked(pi, y, y_prime, pi_t, &spec.ref_policy, ratio);
        }
    }
    table
}

fn check_losses_args(pi: &Policy, pi_t: &Policy, spec: &GameSpec, eta: f64) -> Result<()> {
    if !(eta > 0.0) {
        return Err(Error::param("eta", format!("must be > 0, got {eta}")));
    }
    spec.check(pi)?;
    spec.check(pi_t)
}

/// `L_t(π) = E_{y,y'∼π_t}[(h_t(π,y,y') − (P(y≻π_t) − P(y'≻π_t))/eta)²]`,
/// by full enumeration.
pub fn exact_loss(pi: &Policy, pi_t: &Policy, spec: &GameSpec, eta: f64) -> Result<f64> {
    check_losses_args(pi, pi_t, spec, eta)?;
    let h = h_table(pi, pi_t, spec, eta);
    let wins = spec.pref.wins_against(pi_t);
    let w = pi_t.probs();
    let support = spec.ref_policy.support();
    let mut total = 0.0;
    for &y in &support {
        for &y_prime in &support {
            let target = (wins[y] - wins[y_prime]) / eta;
            total += w[y] * w[y_prime] * (h[y][y_prime] - target).powi(2);
        }
    }
    Ok(total)
}

/// `E_{y,y'∼π_t, (y_w,y_l)∼λ_p(y,y')}[(h_t(π,y_w,y_l) − 1/(2eta))²]`, by
/// full enumeration including the diagonal pairs.
pub fn population_loss(pi: &Policy, pi_t: &Policy, spec: &GameSpec, eta: f64) -> Result<f64> {
    check_losses_args(pi, pi_t, spec, eta)?;
    let h = h_table(pi, pi_t, spec, eta);
    let half = 0.5 / eta;
    let w = pi_t.probs();
    let support = spec.ref_policy.support();
    let mut total = 0.0;
    for &y in &support {
        for &y_prime in &support {
            let p = spec.pref.get(y, y_prime);
            let branch = p * (h[y][y_prime] - half).powi(2)
                + (1.0 - p) * (h[y_prime][y] - half).powi(2);
            total += w[y] * w[y_prime] * branch;
        }
    }
    Ok(total)
}

/// `E_{y,y'∼π_t, I∼Ber(P(y≻y'))}[(h_t(π,y,y') − I/eta)²]`, by full
/// enumeration.
pub fn population_loss_bernoulli(
    pi: &Policy,
    pi_t: &Policy,
    spec: &GameSpec,
    eta: f64,
) -> Result<f64> {
    check_losses_args(pi, pi_t, spec, eta)?;
    let h = h_table(pi, pi_t, spec, eta);
    let w = pi_t.probs();
    let support = spec.ref_policy.support();
    let mut total = 0.0;
    for &y in &support {
        for &y_prime in &support {
            let p = spec.pref.get(y, y_prime);
            let hv = h[y][y_prime];
            let branch = p * (hv - 1.0 / eta).powi(2) + (1.0 - p) * hv * hv;
            total += w[y] * w[y_prime] * branch;
        }
    }
    Ok(total)
}

fn check_dataset(dataset: &PreferenceDataset, reference: &Policy) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::param("dataset", "empty preference dataset"));
    }
    for pair in &dataset.pairs {
        check_response(reference, pair.winner)?;
        check_response(reference, pair.loser)?;
    }
    Ok(())
}

/// Mean of `(h_t(π, y_w, y_l) − 1/(2eta))²` over the dataset.
pub fn empirical_loss(
    pi: &Policy,
    dataset: &PreferenceDataset,
    pi_t: &Policy,
    reference: &Policy,
    tau: f64,
    eta: f64,
) -> Result<f64> {
    check_dataset(dataset, reference)?;
    pi.check_class(reference)?;
    pi_t.check_class(reference)?;
    let ratio = tau / eta;
    let half = 0.5 / eta;
    let total: f64 = dataset
        .pairs
        .iter()
        .map(|pair| (h_unchecked(pi, pair.winner, pair.loser, pi_t, reference, ratio) - half).powi(2))
        .sum();
    Ok(total / dataset.len() as f64)
}

/// The empirical loss as a function of residuals: mean of
/// `(u(y_w) − u(y_l) − 1/(2eta))²`.
pub fn empirical_loss_residual(
    residuals: &ResidualVector,
    dataset: &PreferenceDataset,
    eta: f64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::param("dataset", "empty preference dataset"));
    }
    let u = &residuals.u;
    let half = 0.5 / eta;
    let total: f64 = dataset
        .pairs
        .iter()
        .map(|p| (u[p.winner] - u[p.loser] - half).powi(2))
        .sum();
    Ok(total / dataset.len() as f64)
}

/// Source of pair weights for [`fit_next_policy`].
#[derive(Clone, Copy, Debug)]
pub enum FitData<'a> {
    /// Sampled winner/loser pairs, each with weight `1/n`.
    Dataset(&'a PreferenceDataset),
    /// Exact enumeration: ordered pair `(y, y')` wins with weight
    /// `π_t(y)·π_t(y')·P(y ≻ y')`.
    Exact(&'a PreferenceMatrix),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub policy: Policy,
    pub residuals: ResidualVector,
    /// Condition number of the Jacobi-scaled normal matrix (NaN when not
    /// computed).
    pub condition_number: f64,
}

/// Minimizes `Σ weight·(u(y_w) − u(y_l) − 1/(2eta))² + ridge·‖u‖²` over
/// residuals and returns `π(y) ∝ exp(g_t(y) + u(y))`.
///
/// With `ridge = 0` the gauge is fixed by a rank-one term along the null
/// direction, which leaves the minimizer unchanged; a disconnected pair
/// graph is rejected since some residual differences are then undetermined.
pub fn fit_next_policy(
    data: FitData<'_>,
    pi_t: &Policy,
    reference: &Policy,
    config: &LearnConfig,
) -> Result<FitResult> {
    config.validate()?;
    pi_t.check_class(reference)?;
    let support = reference.support();
    let s = support.len();
    let mut local = vec![usize::MAX; reference.len()];
    for (k, &y) in support.iter().enumerate() {
        local[y] = k;
    }

    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    match data {
        FitData::Dataset(dataset) => {
            if dataset.is_empty() && config.ridge == 0.0 {
                return Err(Error::SingularSystem(
                    "no pairs and ridge = 0; set ridge > 0".into(),
                ));
            }
            if !dataset.is_empty() {
                check_dataset(dataset, reference)?;
            }
            let weight = 1.0 / dataset.len().max(1) as f64;
            edges.extend(
                dataset
                    .pairs
                    .iter()
                    .filter(|p| p.winner != p.loser)
                    .map(|p| (local[p.winner], local[p.loser], weight)),
            );
        }
        FitData::Exact(pref) => {
            if pref.len() != reference.len() {
                return Err(Error::DimensionMismatch {
                    expected: reference.len(),
                    got: pref.len(),
                });
            }
            let w = pi_t.probs();
            for &y in &support {
                for &y_prime in &support {
                    if y == y_prime {
                        continue;
                    }
                    let mass = w[y] * w[y_prime];
                    let p = pref.get(y, y_prime);
                    edges.push((local[y], local[y_prime], mass * p));
                    edges.push((local[y_prime], local[y], mass * (1.0 - p)));
                }
            }
        }
    }

    let c = 0.5 / config.eta;
    let mut normal = DMatrix::<f64>::zeros(s, s);
    let mut rhs = DVector::<f64>::zeros(s);
    for &(w, l, weight) in &edges {
        if weight == 0.0 {
            continue;
        }
        normal[(w, w)] += weight;
        normal[(l, l)] += weight;
        normal[(w, l)] -= weight;
        normal[(l, w)] -= weight;
        rhs[w] += weight * c;
        rhs[l] -= weight * c;
    }
    for k in 0..s {
        normal[(k, k)] += config.ridge;
    }
    if config.ridge == 0.0 && !connected(s, &edges) {
        return Err(Error::SingularSystem(
            "pair graph does not connect every supported response; set ridge > 0".into(),
        ));
    }

    // Jacobi scaling keeps peaked π_t from wrecking the conditioning
    let scale: Vec<f64> = (0..s)
        .map(|k| {
            let d = normal[(k, k)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = DMatrix::<f64>::from_fn(s, s, |i, j| scale[i] * normal[(i, j)] * scale[j]);
    let scaled_rhs = DVector::<f64>::from_fn(s, |i, _| scale[i] * rhs[i]);
    if config.ridge == 0.0 {
        let null = DVector::<f64>::from_fn(s, |i, _| 1.0 / scale[i]).normalize();
        scaled += &null * null.transpose();
    }
    let condition_number = if s <= CONDITION_LIMIT {
        let eig = scaled.clone().symmetric_eigenvalues();
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    } else {
        f64::NAN
    };
    let solution = match scaled.clone().cholesky() {
        Some(chol) => chol.solve(&scaled_rhs),
        None => scaled
            .lu()
            .solve(&scaled_rhs)
            .ok_or_else(|| Error::SingularSystem("normal matrix is singular".into()))?,
    };

    let mut u = vec![0.0; reference.len()];
    for (k, &y) in support.iter().enumerate() {
        u[y] = scale[k] * solution[k];
    }
    center_on_support(&mut u, reference);
    let residuals = ResidualVector { u };
    let policy = residuals.to_policy(pi_t, reference, config.tau, config.eta)?;
    Ok(FitResult {
        policy,
        residuals,
        condition_number,
    })
}

fn connected(s: usize, edges: &[(usize, usize, f64)]) -> bool {
    let mut parent: Vec<usize> = (0..s).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = s;
    for &(a, b, w) in edges {
        if w <= 0.0 {
            continue;
        }
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components <= 1
}

/// Per-iteration history of a learning run. `policies[k]` is `π_{k+1}`;
/// the other series share that indexing, with `oracle_queries[k]` counting
/// queries spent to produce `π_{k+1}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunTrace {
    pub policies: Vec<Policy>,
    pub dual_gaps: Vec<f64>,
    pub kl_to_nash: Vec<f64>,
    pub oracle_queries: Vec<u64>,
    pub dataset_sizes: Vec<usize>,
    pub condition_numbers: Vec<f64>,
}

impl RunTrace {
    pub(crate) fn start(spec: &GameSpec, nash_ref: Option<&Policy>) -> Self {
        let reference = &spec.ref_policy;
        Self {
            policies: vec![reference.clone()],
            dual_gaps: vec![duality_gap_unchecked(spec, reference)],
            kl_to_nash: nash_ref
                .map(|n| vec![kl_unchecked(n.probs(), reference.probs())])
                .unwrap_or_default(),
            oracle_queries: vec![0],
            dataset_sizes: vec![0],
            condition_numbers: vec![f64::NAN],
        }
    }

    pub(crate) fn push(
        &mut self,
        spec: &GameSpec,
        policy: Policy,
        nash_ref: Option<&Policy>,
        queries: u64,
        dataset_size: usize,
        condition_number: f64,
    ) {
        self.dual_gaps.push(duality_gap_unchecked(spec, &policy));
        if let Some(nash) = nash_ref {
            self.kl_to_nash.push(kl_unchecked(nash.probs(), policy.probs()));
        }
        self.oracle_queries.push(queries);
        self.dataset_sizes.push(dataset_size);
        self.condition_numbers.push(condition_number);
        self.policies.push(policy);
    }

    pub fn last(&self) -> &Policy {
        self.policies.last().expect("trace holds at least π_1")
    }
}

/// The INPO loop: start at `π_1 = ref`, then for each iteration collect
/// `D_t` from `π_t` (sampled mode) and fit `π_{t+1}`.
///
/// Dataset `t` is drawn from the sampling stream `(seed, t)`.
pub fn run_inpo(
    spec: &GameSpec,
    oracle: &mut PreferenceOracle,
    iterations: usize,
    config: &LearnConfig,
    nash_ref: Option<&Policy>,
    seed: u64,
) -> Result<RunTrace> {
    run_inpo_observed(spec, oracle, iterations, config, nash_ref, seed, &mut |_| {})
}

/// [`run_inpo`] that hands the trace to `observer` after every iteration.
pub fn run_inpo_observed(
    spec: &GameSpec,
    oracle: &mut PreferenceOracle,
    iterations: usize,
    config: &LearnConfig,
    nash_ref: Option<&Policy>,
    seed: u64,
    observer: &mut dyn FnMut(&RunTrace),
) -> Result<RunTrace> {
    if iterations < 1 {
        return Err(Error::param("T", "must be ≥ 1"));
    }
    config.validate()?;
    if (config.tau - spec.tau).abs() > 1e-15 {
        return Err(Error::param(
            "tau",
            format!("learner tau {} differs from game tau {}", config.tau, spec.tau),
        ));
    }
    if oracle.len() != spec.len() {
        return Err(Error::DimensionMismatch {
            expected: spec.len(),
            got: oracle.len(),
        });
    }
    if let Some(nash) = nash_ref {
        spec.check(nash)?;
    }
    let mut trace = RunTrace::start(spec, nash_ref);
    for t in 1..=iterations {
        let pi_t = trace.policies[t - 1].clone();
        let (fit, size) = match config.mode {
            LearnMode::Exact => (
                fit_next_policy(FitData::Exact(&spec.pref), &pi_t, &spec.ref_policy, config)?,
                0,
            ),
            LearnMode::Sampled { n, collection } => {
                let dataset = collect_dataset(oracle, &pi_t, n, collection, seed, t)?;
                (
                    fit_next_policy(FitData::Dataset(&dataset), &pi_t, &spec.ref_policy, config)?,
                    dataset.len(),
                )
            }
        };
        trace.push(
            spec,
            fit.policy,
            nash_ref,
            oracle.query_count(),
            size,
            fit.condition_number,
        );
        observer(&trace);
    }
    Ok(trace)
}

/// Spread (max − min) of the loss differences across probe policies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// Spread of `population_loss − exact_loss`.
    pub population_spread: f64,
    /// Spread of `population_loss_bernoulli − exact_loss`.
    pub bernoulli_spread: f64,
    /// `population_loss − exact_loss` at the first probe.
    pub population_offset: f64,
}

impl EquivalenceReport {
    pub fn max_spread(&self) -> f64 {
        self.population_spread.max(self.bernoulli_spread)
    }
}

pub fn verify_equivalence(
    spec: &GameSpec,
    pi_t: &Policy,
    eta: f64,
    probes: &[Policy],
) -> Result<EquivalenceReport> {
    if probes.len() < 3 {
        return Err(Error::param("probes", "need at least 3 probe policies"));
    }
    let mut population = Vec::with_capacity(probes.len());
    let mut bernoulli = Vec::with_capacity(probes.len());
    for probe in probes {
        let exact = exact_loss(probe, pi_t, spec, eta)?;
        population.push(population_loss(probe, pi_t, spec, eta)? - exact);
        bernoulli.push(population_loss_bernoulli(probe, pi_t, spec, eta)? - exact);
    }
    let spread = |xs: &[f64]| {
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    };
    Ok(EquivalenceReport {
        population_spread: spread(&population),
        bernoulli_spread: spread(&bernoulli),
        population_offset: population[0],
    })
}

//! Finite two-player preference games with KL regularization.
//!
//! A game is a preference matrix `P[i][j] = P(y_i ≻ y_j)` over a finite
//! response space together with a reference policy and a regularization
//! weight `tau`. The max-player's objective is
//!
//! ```text
//! J(p1, p2) = p1ᵀ P p2 − tau·KL(p1 ‖ ref) + tau·KL(p2 ‖ ref)
//! ```
//!
//! The game is symmetric (`J(a, b) + J(b, a) = 1`), so its unique Nash
//! policy is shared by both players and plays itself at value ½.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::omd::{omd_step, StepSchedule};

/// Tolerance for identities that hold exactly in real arithmetic.
pub const EXACT_TOL: f64 = 1e-12;
/// Default tolerance for iterative solvers.
pub const SOLVER_TOL: f64 = 1e-6;

const FIXED_POINT_BUDGET: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseSpace {
    ids: Vec<String>,
}

impl ResponseSpace {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::InvalidSpace(format!(
                "need at least 2 responses, got {}",
                ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if id.is_empty() {
                return Err(Error::InvalidSpace("empty response identifier".into()));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidSpace(format!("duplicate identifier `{id}`")));
            }
        }
        Ok(Self { ids })
    }

    /// Responses named `y0, y1, …`.
    pub fn indexed(m: usize) -> Result<Self> {
        Self::new((0..m).map(|i| format!("y{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// A probability vector over a finite response space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    probs: Vec<f64>,
}

impl Policy {
    /// Validates non-negativity and normalization (within 1e-9), then
    /// renormalizes so the stored entries sum to one at machine precision.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPolicy("empty probability vector".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidPolicy(format!("entry {i} is {p}")));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPolicy(format!("entries sum to {total}")));
        }
        Ok(Self {
            probs: probs.into_iter().map(|p| p / total).collect(),
        })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            probs: vec![1.0 / m as f64; m],
        }
    }

    /// Normalizes unnormalized log-weights with a max-shifted log-sum-exp.
    /// `-inf` entries map to zero probability.
    pub fn from_log_weights(logits: &[f64]) -> Result<Self> {
        let max = logits
            .iter()
            .copied()
            .filter(|x| x.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidPolicy("no finite log-weight".into()));
        }
        if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::InvalidPolicy("non-finite log-weight".into()));
        }
        let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    /// A random policy on the support of `reference` with Dirichlet(1)-like
    /// weights, used by property checks.
    pub fn random_on_support<R: Rng + ?Sized>(reference: &Policy, rng: &mut R) -> Self {
        let logits: Vec<f64> = reference
            .probs
            .iter()
            .map(|&r| {
                if r > 0.0 {
                    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                    (-u.ln()).ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        Self::from_log_weights(&logits).expect("reference has non-empty support")
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.probs.len()).filter(|&i| self.probs[i] > 0.0).collect()
    }

    /// Natural log of each entry (`-inf` off support).
    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    /// Checks membership in the policy class of `reference`: same length and
    /// exactly the same support.
    pub fn check_class(&self, reference: &Policy) -> Result<()> {
        if self.len() != reference.len() {
            return Err(Error::DimensionMismatch {
                expected: reference.len(),
                got: self.len(),
            });
        }
        for (i, (&p, &r)) in self.probs.iter().zip(&reference.probs).enumerate() {
            if p > 0.0 && r == 0.0 {
                return Err(Error::SupportMismatch(i));
            }
            if p == 0.0 && r > 0.0 {
                return Err(Error::InvalidPolicy(format!(
                    "zero mass on response {i} inside the reference support"
                )));
            }
        }
        Ok(())
    }

    pub fn linf_distance(&self, other: &Policy) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn tv_distance(&self, other: &Policy) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Dense matrix of pairwise win probabilities, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceMatrix {
    m: usize,
    data: Vec<f64>,
}

impl PreferenceMatrix {
    /// Validates the matrix and reports the first violating cell.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        if m < 2 {
            return Err(Error::InvalidMatrix {
                row: 0,
                col: 0,
                reason: format!("need at least 2 rows, got {m}"),
            });
        }
        let mut data = Vec::with_capacity(m * m);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidMatrix {
                    row: i,
                    col: row.len().min(m),
                    reason: format!("row has {} entries, expected {m}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        let matrix = Self { m, data };
        matrix.validate()?;
        Ok(matrix)
    }

    /// Builds a matrix from its strict upper triangle, mirrored by
    /// `P[j][i] = 1 − P[i][j]`.
    pub fn from_upper<F: FnMut(usize, usize) -> f64>(m: usize, mut upper: F) -> Result<Self> {
        let mut data = vec![0.5; m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let p = upper(i, j);
                data[i * m + j] = p;
                data[j * m + i] = 1.0 - p;
            }
        }
        let matrix = Self { m, data };
        matrix.validate()?;
        Ok(matrix)
    }

    /// Strict upper triangle i.i.d. uniform on [0, 1].
    pub fn random<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Self {
        Self::from_upper(m, |_, _| rng.gen::<f64>()).expect("uniform draws are valid")
    }

    /// All off-diagonal entries ½.
    pub fn indifferent(m: usize) -> Self {
        Self {
            m,
            data: vec![0.5; m * m],
        }
    }

    fn validate(&self) -> Result<()> {
        let m = self.m;
        for i in 0..m {
            for j in 0..m {
                let p = self.data[i * m + j];
                let bad = |reason: String| Error::InvalidMatrix {
                    row: i,
                    col: j,
                    reason,
                };
                if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                    return Err(bad(format!("entry {p} outside [0, 1]")));
                }
                if i == j && p != 0.5 {
                    return Err(bad(format!("diagonal entry {p} is not 0.5")));
                }
                let q = self.data[j * m + i];
                if (p + q - 1.0).abs() > EXACT_TOL {
                    return Err(bad(format!("P[i][j] + P[j][i] = {} ≠ 1", p + q)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.m).map(|r| r.to_vec()).collect()
    }

    /// `P(y ≻ π)` for every response `y`.
    pub fn wins_against(&self, pi: &Policy) -> Vec<f64> {
        self.data
            .chunks(self.m)
            .map(|row| row.iter().zip(pi.probs()).map(|(p, q)| p * q).sum())
            .collect()
    }

    /// Forces strict preferences to 0/1; exact ties stay at ½.
    pub fn clipped(&self) -> Self {
        Self {
            m: self.m,
            data: self
                .data
                .iter()
                .map(|&p| match p.partial_cmp(&0.5) {
                    Some(std::cmp::Ordering::Greater) => 1.0,
                    Some(std::cmp::Ordering::Less) => 0.0,
                    _ => 0.5,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub space: ResponseSpace,
    pub pref: PreferenceMatrix,
    pub ref_policy: Policy,
    pub tau: f64,
}

impl GameSpec {
    pub fn new(
        space: ResponseSpace,
        pref: PreferenceMatrix,
        ref_policy: Policy,
        tau: f64,
    ) -> Result<Self> {
        if pref.len() != space.len() {
            return Err(Error::DimensionMismatch {
                expected: space.len(),
                got: pref.len(),
            });
        }
        if ref_policy.len() != space.len() {
            return Err(Error::DimensionMismatch {
                expected: space.len(),
                got: ref_policy.len(),
            });
        }
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::param("tau", format!("must be ≥ 0, got {tau}")));
        }
        Ok(Self {
            space,
            pref,
            ref_policy,
            tau,
        })
    }

    /// Game with indexed response ids and a uniform reference policy.
    pub fn uniform(pref: PreferenceMatrix, tau: f64) -> Result<Self> {
        let m = pref.len();
        Self::new(ResponseSpace::indexed(m)?, pref, Policy::uniform(m), tau)
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    pub(crate) fn check(&self, pi: &Policy) -> Result<()> {
        pi.check_class(&self.ref_policy)
    }
}

/// `KL(a ‖ b)` in nats, with `0·log 0 = 0`.
pub fn kl_divergence(a: &Policy, b: &Policy) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: b.len(),
            got: a.len(),
        });
    }
    let mut total = 0.0;
    for (i, (&p, &q)) in a.probs().iter().zip(b.probs()).enumerate() {
        if p > 0.0 {
            if q == 0.0 {
                return Err(Error::SupportMismatch(i));
            }
            total += p * (p / q).ln();
        }
    }
    Ok(total)
}

pub(crate) fn kl_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum()
}

/// `E_{y∼p1, y'∼p2}[P(y ≻ y')] = p1ᵀ P p2`.
pub fn win_prob(pref: &PreferenceMatrix, p1: &Policy, p2: &Policy) -> Result<f64> {
    for p in [p1, p2] {
        if p.len() != pref.len() {
            return Err(Error::DimensionMismatch {
                expected: pref.len(),
                got: p.len(),
            });
        }
    }
    Ok(win_prob_unchecked(pref, p1, p2))
}

fn win_prob_unchecked(pref: &PreferenceMatrix, p1: &Policy, p2: &Policy) -> f64 {
    pref.wins_against(p2)
        .iter()
        .zip(p1.probs())
        .map(|(w, p)| w * p)
        .sum()
}

pub fn game_value(spec: &GameSpec, p1: &Policy, p2: &Policy) -> Result<f64> {
    spec.check(p1)?;
    spec.check(p2)?;
    Ok(game_value_unchecked(spec, p1, p2))
}

pub(crate) fn game_value_unchecked(spec: &GameSpec, p1: &Policy, p2: &Policy) -> f64 {
    let reference = spec.ref_policy.probs();
    win_prob_unchecked(&spec.pref, p1, p2) - spec.tau * kl_unchecked(p1.probs(), reference)
        + spec.tau * kl_unchecked(p2.probs(), reference)
}

/// `π(y) ∝ ref(y)·exp(P(y ≻ opponent)/tau)`, the maximizer of `J(·, opponent)`.
pub fn best_response(spec: &GameSpec, opponent: &Policy) -> Result<Policy> {
    if spec.tau <= 0.0 {
        return Err(Error::param(
            "tau",
            "best response is not attained in the policy class when tau = 0",
        ));
    }
    if opponent.len() != spec.len() {
        return Err(Error::DimensionMismatch {
            expected: spec.len(),
            got: opponent.len(),
        });
    }
    Ok(best_response_unchecked(spec, opponent))
}

pub(crate) fn best_response_unchecked(spec: &GameSpec, opponent: &Policy) -> Policy {
    let wins = spec.pref.wins_against(opponent);
    let logits: Vec<f64> = spec
        .ref_policy
        .probs()
        .iter()
        .zip(&wins)
        .map(|(&r, &w)| r.ln() + w / spec.tau)
        .collect();
    Policy::from_log_weights(&logits).expect("reference has non-empty support")
}

/// `max_{π1} J(π1, π) − min_{π2} J(π, π2)`.
///
/// By symmetry the min side equals `1 − max_{π2} J(π2, π)`, so the gap is
/// `2·max J(·, π) − 1`. With `tau = 0` the maximum is taken over the closed
/// simplex, where it sits at the best vertex of the reference support.
pub fn duality_gap(spec: &GameSpec, pi: &Policy) -> Result<f64> {
    spec.check(pi)?;
    Ok(duality_gap_unchecked(spec, pi))
}

pub(crate) fn duality_gap_unchecked(spec: &GameSpec, pi: &Policy) -> f64 {
    let best = if spec.tau > 0.0 {
        let br = best_response_unchecked(spec, pi);
        game_value_unchecked(spec, &br, pi)
    } else {
        let wins = spec.pref.wins_against(pi);
        spec.ref_policy
            .probs()
            .iter()
            .zip(&wins)
            .filter(|(r, _)| **r > 0.0)
            .map(|(_, w)| *w)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    2.0 * best - 1.0
}

/// `‖π − BR(π)‖∞`; zero exactly at the Nash policy.
pub fn fixed_point_residual(spec: &GameSpec, pi: &Policy) -> Result<f64> {
    let br = best_response(spec, pi)?;
    Ok(pi.linf_distance(&br))
}

/// Nash policy by exact mirror descent under the `eta_t = tau·(t+2)/2`
/// schedule.
///
/// Stops once both the duality gap and the best-response residual
/// `‖π − BR(π)‖∞` are at most `tol`. The gap alone is quadratic in the
/// distance to the equilibrium, the residual bounds the distance linearly.
/// The schedule's residual decays only like `1/t²`, so once the gap is
/// within `tol` the step is held fixed, which contracts geometrically; the
/// schedule resumes if the residual stops shrinking.
pub fn nash_solve(spec: &GameSpec, tol: f64, max_iters: usize) -> Result<Policy> {
    const WINDOW: usize = 64;
    if spec.tau <= 0.0 {
        return Err(Error::param("tau", "nash_solve requires tau > 0"));
    }
    if !(tol > 0.0) {
        return Err(Error::param("tol", format!("must be > 0, got {tol}")));
    }
    let schedule = StepSchedule::Theorem2;
    let mut pi = spec.ref_policy.clone();
    let mut best = (f64::INFINITY, pi.clone());
    let mut t = 1;
    // (frozen step, residual and iteration at the start of the window)
    let mut frozen: Option<(f64, f64, usize)> = None;
    for iter in 1..=max_iters + 1 {
        let gap = duality_gap_unchecked(spec, &pi);
        if gap < best.0 {
            best = (gap, pi.clone());
        }
        if gap <= tol {
            let br = best_response_unchecked(spec, &pi);
            let residual = pi.linf_distance(&br);
            if residual <= tol {
                return Ok(pi);
            }
            match frozen {
                None => frozen = Some((schedule.eta(t, spec.tau), residual, iter)),
                Some((eta, start, since)) if iter - since >= WINDOW => {
                    frozen = (residual < start).then_some((eta, residual, iter));
                }
                Some(_) => {}
            }
        }
        if iter > max_iters {
            break;
        }
        let eta = match frozen {
            Some((eta, _, _)) => eta,
            None => {
                t += 1;
                schedule.eta(t - 1, spec.tau)
            }
        };
        pi = omd_step(spec, &pi, eta)?;
    }
    Err(Error::NotConverged {
        iterations: max_iters,
        gap: best.0,
        best: Box::new(best.1),
    })
}

/// Nash policy as the fixed point of the best-response map, iterated with
/// geometric damping in log space:
/// `log π ← (1 − d)·log π + d·(log ref + P(·≻π)/tau)`.
///
/// Independent of the mirror-descent schedule; used to cross-check
/// [`nash_solve`]. Small `tau` may need small `damping` to converge.
pub fn nash_fixed_point(spec: &GameSpec, tol: f64, damping: f64) -> Result<Policy> {
    if spec.tau <= 0.0 {
        return Err(Error::param("tau", "nash_fixed_point requires tau > 0"));
    }
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::param("damping", format!("must be in (0, 1], got {damping}")));
    }
    let log_ref = spec.ref_policy.log_probs();
    let mut pi = spec.ref_policy.clone();
    let mut best = (f64::INFINITY, pi.clone());
    for _ in 0..FIXED_POINT_BUDGET {
        let wins = spec.pref.wins_against(&pi);
        let target: Vec<f64> = log_ref
            .iter()
            .zip(&wins)
            .map(|(lr, w)| lr + w / spec.tau)
            .collect();
        let br = Policy::from_log_weights(&target)?;
        let residual = pi.linf_distance(&br);
        if residual < best.0 {
            best = (residual, pi.clone());
        }
        if residual <= tol {
            return Ok(pi);
        }
        let logits: Vec<f64> = pi
            .log_probs()
            .iter()
            .zip(&target)
            .map(|(&lp, &tg)| {
                if lp == f64::NEG_INFINITY {
                    lp
                } else {
                    (1.0 - damping) * lp + damping * tg
                }
            })
            .collect();
        pi = Policy::from_log_weights(&logits)?;
    }
    Err(Error::NotConverged {
        iterations: FIXED_POINT_BUDGET,
        gap: best.0,
        best: Box::new(best.1),
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

//! Preference signals: exact matrices, Bernoulli queries, and preference
//! dataset collection.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{sigmoid, Policy, PreferenceMatrix};

/// `P[i][j] = σ(r_i − r_j)`.
pub fn bt_matrix(rewards: &[f64]) -> Result<PreferenceMatrix> {
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::param("rewards", format!("non-finite reward {r}")));
    }
    PreferenceMatrix::from_upper(rewards.len(), |i, j| sigmoid(rewards[i] - rewards[j]))
}

/// Intransitive matrix: `P[i][(i+1) mod m] = p`, mirrored, every other
/// off-diagonal pair ½. `m = 3` is rock-paper-scissors.
pub fn cyclic_matrix(m: usize, p: f64) -> Result<PreferenceMatrix> {
    if m < 3 {
        return Err(Error::param("m", format!("cyclic game needs m ≥ 3, got {m}")));
    }
    if !(p > 0.5 && p <= 1.0) {
        return Err(Error::param("p", format!("must be in (0.5, 1], got {p}")));
    }
    PreferenceMatrix::from_upper(m, |i, j| {
        if j == i + 1 {
            p
        } else if i == 0 && j == m - 1 {
            1.0 - p
        } else {
            0.5
        }
    })
}

/// Least-squares Bradley-Terry rewards for a matrix: minimizes
/// `Σ_{i<j} (r_i − r_j − logit P[i][j])²` with mean-zero rewards.
pub fn bt_least_squares_fit(pref: &PreferenceMatrix) -> Vec<f64> {
    let m = pref.len();
    let logit = |p: f64| {
        let p = p.clamp(1e-9, 1.0 - 1e-9);
        (p / (1.0 - p)).ln()
    };
    // complete comparison graph: the normal equations reduce to row means
    (0..m)
        .map(|i| (0..m).filter(|&j| j != i).map(|j| logit(pref.get(i, j))).sum::<f64>() / m as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OracleKind {
    Matrix { matrix: PreferenceMatrix },
    BradleyTerry { rewards: Vec<f64> },
    Cyclic { m: usize, p: f64 },
}

impl OracleKind {
    pub fn matrix(&self) -> Result<PreferenceMatrix> {
        match self {
            OracleKind::Matrix { matrix } => Ok(matrix.clone()),
            OracleKind::BradleyTerry { rewards } => bt_matrix(rewards),
            OracleKind::Cyclic { m, p } => cyclic_matrix(*m, *p),
        }
    }
}

/// Outcome of comparing two responses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparison {
    FirstWins,
    SecondWins,
    Tie,
}

/// Anything that can compare two responses and count its queries.
pub trait Comparator {
    fn compare(&mut self, first: usize, second: usize) -> Comparison;
    fn query_count(&self) -> u64;
}

/// A seeded preference oracle. Each query draws `z ∼ Ber(P(y ≻ y'))` and
/// increments the query counter by one.
///
/// One instance belongs to one logical thread; use [`PreferenceOracle::fork`]
/// to obtain independent streams.
#[derive(Clone, Debug)]
pub struct PreferenceOracle {
    kind: OracleKind,
    matrix: PreferenceMatrix,
    hard: bool,
    seed: u64,
    rng: ChaCha8Rng,
    query_count: u64,
}

impl PreferenceOracle {
    pub fn new(kind: OracleKind, seed: u64) -> Result<Self> {
        Self::with_options(kind, seed, false)
    }

    /// With `hard` set, strict preferences are clipped to 0/1 so outcomes are
    /// deterministic except for exact ties.
    pub fn with_options(kind: OracleKind, seed: u64, hard: bool) -> Result<Self> {
        let base = kind.matrix()?;
        let matrix = if hard { base.clipped() } else { base };
        Ok(Self {
            kind,
            matrix,
            hard,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            query_count: 0,
        })
    }

    pub fn from_matrix(matrix: PreferenceMatrix, seed: u64) -> Self {
        Self::new(OracleKind::Matrix { matrix }, seed).expect("validated matrix")
    }

    /// Independent copy drawing from stream `stream` of the same seed, with
    /// a fresh query counter.
    pub fn fork(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        Self {
            kind: self.kind.clone(),
            matrix: self.matrix.clone(),
            hard: self.hard,
            seed: self.seed,
            rng,
            query_count: 0,
        }
    }

    pub fn kind(&self) -> &OracleKind {
        &self.kind
    }

    pub fn matrix(&self) -> &PreferenceMatrix {
        &self.matrix
    }

    pub fn is_hard(&self) -> bool {
        self.hard
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn query_count(&self) -> u64 {
        self.query_count
    }

    /// One Bernoulli query; `true` when `y` is preferred.
    pub fn query(&mut self, y: usize, y_prime: usize) -> bool {
        self.query_count += 1;
        let p = self.matrix.get(y, y_prime);
        self.rng.gen::<f64>() < p
    }

    /// Draws an ordered pair from `λ_p(y, y')`: `(y, y')` with probability
    /// `P(y ≻ y')`, otherwise `(y', y)`.
    pub fn sample_lambda_p(
        &mut self,
        y: usize,
        y_prime: usize,
        iteration: usize,
    ) -> Result<PreferencePair> {
        if y == y_prime {
            return Err(Error::Collection(format!(
                "cannot compare response {y} with itself"
            )));
        }
        let m = self.len();
        if y >= m || y_prime >= m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: y.max(y_prime) + 1,
            });
        }
        let (winner, loser) = if self.query(y, y_prime) {
            (y, y_prime)
        } else {
            (y_prime, y)
        };
        Ok(PreferencePair {
            winner,
            loser,
            iteration,
        })
    }
}

impl Comparator for PreferenceOracle {
    fn compare(&mut self, first: usize, second: usize) -> Comparison {
        if self.query(first, second) {
            Comparison::FirstWins
        } else {
            Comparison::SecondWins
        }
    }

    fn query_count(&self) -> u64 {
        self.query_count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: usize,
    pub loser: usize,
    pub iteration: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CollectionMode {
    Plain,
    Tournament { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    /// Fingerprint of the policy the responses were drawn from.
    pub source_policy_hash: u64,
    pub mode: CollectionMode,
    /// Collection attempts, including rejected tournaments.
    pub attempts: usize,
}

impl PreferenceDataset {
    pub fn from_pairs(pairs: Vec<PreferencePair>) -> Self {
        let attempts = pairs.len();
        Self {
            pairs,
            source_policy_hash: 0,
            mode: CollectionMode::Plain,
            attempts,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// FNV-1a over the bit patterns of the probabilities.
pub fn policy_fingerprint(pi: &Policy) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for p in pi.probs() {
        for byte in p.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    }
    hash
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TournamentOutcome {
    /// The best-of-K response beat the worst-of-K in the final check.
    Accepted { best: usize, worst: usize },
    Rejected { best: usize, worst: usize },
}

/// Best-of-K / worst-of-K selection by a bracket.
///
/// Round one pairs the responses in arrival order (1v2, 3v4, …). Winners
/// then play each other in arrival order until one remains (the best);
/// losers do the same, with the loser of each match advancing (the worst).
/// Ties go to the first response of a pair. A final comparison of best
/// against worst rejects the pair unless the best wins. For `K = 8` this is
/// 4 + 3 + 3 + 1 = 11 queries.
pub fn tournament_select<C: Comparator>(
    oracle: &mut C,
    responses: &[usize],
) -> Result<TournamentOutcome> {
    let k = responses.len();
    if k < 2 || !k.is_power_of_two() {
        return Err(Error::param(
            "K",
            format!("tournament size must be a power of two ≥ 2, got {k}"),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = responses.iter().find(|r| !seen.insert(**r)) {
        return Err(Error::param("responses", format!("duplicate response {dup}")));
    }
    Ok(run_bracket(oracle, responses))
}

fn first_wins<C: Comparator>(oracle: &mut C, a: usize, b: usize) -> bool {
    matches!(oracle.compare(a, b), Comparison::FirstWins | Comparison::Tie)
}

/// Bracket over sample slots; identical responses in different slots are
/// still compared through the oracle.
fn run_bracket<C: Comparator>(oracle: &mut C, responses: &[usize]) -> TournamentOutcome {
    let mut winners = Vec::with_capacity(responses.len() / 2);
    let mut losers = Vec::with_capacity(responses.len() / 2);
    for pair in responses.chunks(2) {
        if first_wins(oracle, pair[0], pair[1]) {
            winners.push(pair[0]);
            losers.push(pair[1]);
        } else {
            winners.push(pair[1]);
            losers.push(pair[0]);
        }
    }
    while winners.len() > 1 {
        winners = winners
            .chunks(2)
            .map(|p| if first_wins(oracle, p[0], p[1]) { p[0] } else { p[1] })
            .collect();
    }
    while losers.len() > 1 {
        losers = losers
            .chunks(2)
            .map(|p| if first_wins(oracle, p[0], p[1]) { p[1] } else { p[0] })
            .collect();
    }
    let (best, worst) = (winners[0], losers[0]);
    if first_wins(oracle, best, worst) {
        TournamentOutcome::Accepted { best, worst }
    } else {
        TournamentOutcome::Rejected { best, worst }
    }
}

/// Sampling stream for dataset `iteration` under `seed`.
pub fn collection_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

const MAX_ATTEMPTS_PER_PAIR: usize = 1000;

/// Draws responses from `pi_t` and labels them through the oracle.
///
/// Plain mode draws `y, y' ∼ π_t` (redrawing `y'` until it differs from
/// `y`) and labels the pair by one `λ_p` query. Tournament mode draws `K`
/// responses per attempt, runs the bracket, and keeps the pair only when
/// the final check passes and the two responses differ.
pub fn collect_dataset(
    oracle: &mut PreferenceOracle,
    pi_t: &Policy,
    n: usize,
    mode: CollectionMode,
    seed: u64,
    iteration: usize,
) -> Result<PreferenceDataset> {
    if n == 0 {
        return Err(Error::param("n", "must be ≥ 1"));
    }
    if pi_t.len() != oracle.len() {
        return Err(Error::DimensionMismatch {
            expected: oracle.len(),
            got: pi_t.len(),
        });
    }
    if pi_t.support().len() < 2 {
        return Err(Error::Collection(
            "policy has a single response in its support; no distinct pairs exist".into(),
        ));
    }
    let sampler = WeightedIndex::new(pi_t.probs())
        .map_err(|e| Error::Collection(format!("cannot sample from policy: {e}")))?;
    let mut rng = collection_rng(seed, iteration);
    let mut pairs = Vec::with_capacity(n);
    let mut attempts = 0;
    match mode {
        CollectionMode::Plain => {
            let mut draws = 0;
            while pairs.len() < n {
                attempts += 1;
                let y = sampler.sample(&mut rng);
                let mut y_prime = sampler.sample(&mut rng);
                while y_prime == y {
                    draws += 1;
                    if draws >= MAX_ATTEMPTS_PER_PAIR * n {
                        return Err(Error::Collection(format!(
                            "policy is too concentrated: {draws} redraws for {} distinct pairs",
                            pairs.len()
                        )));
                    }
                    y_prime = sampler.sample(&mut rng);
                }
                pairs.push(oracle.sample_lambda_p(y, y_prime, iteration)?);
            }
        }
        CollectionMode::Tournament { k } => {
            if k < 2 || !k.is_power_of_two() {
                return Err(Error::param(
                    "K",
                    format!("tournament size must be a power of two ≥ 2, got {k}"),
                ));
            }
            let mut slots = vec![0; k];
            while pairs.len() < n {
                if attempts >= MAX_ATTEMPTS_PER_PAIR * n {
                    return Err(Error::Collection(format!(
                        "only {} of {n} tournaments accepted after {attempts} attempts",
                        pairs.len()
                    )));
                }
                attempts += 1;
                for slot in slots.iter_mut() {
                    *slot = sampler.sample(&mut rng);
                }
                if let TournamentOutcome::Accepted { best, worst } = run_bracket(oracle, &slots) {
                    if best != worst {
                        pairs.push(PreferencePair {
                            winner: best,
                            loser: worst,
                            iteration,
                        });
                    }
                }
            }
        }
    }
    Ok(PreferenceDataset {
        pairs,
        source_policy_hash: policy_fingerprint(pi_t),
        mode,
        attempts,
    })
}

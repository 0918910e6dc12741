//! Python bindings: games, solvers, the planner, the sampled learner and the
//! verification suite.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use inpo_core::expt::config::parse_config;
use inpo_core::expt::run::{resolve_output_dir, run_experiment};
use inpo_core::expt::verify::{verify as run_verify, VerifyOptions};
use inpo_core::game::{self, GameSpec, Policy, PreferenceMatrix, ResponseSpace};
use inpo_core::learner::{self, LearnConfig};
use inpo_core::omd::{self, StepSchedule};
use inpo_core::oracle::{self, CollectionMode, OracleKind, PreferenceOracle, TournamentOutcome};
use inpo_core::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::NotConverged { .. } | Error::SingularSystem(_) | Error::Collection(_) => {
            PyRuntimeError::new_err(err.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn policy(probs: Vec<f64>) -> PyResult<Policy> {
    Policy::new(probs).map_err(to_py)
}

fn collection(tournament_k: Option<usize>) -> CollectionMode {
    match tournament_k {
        Some(k) => CollectionMode::Tournament { k },
        None => CollectionMode::Plain,
    }
}

/// A regularized preference game.
#[pyclass(module = "inpo")]
struct Game {
    spec: GameSpec,
}

#[pymethods]
impl Game {
    #[new]
    #[pyo3(signature = (matrix, tau, reference=None, ids=None))]
    fn new(
        matrix: Vec<Vec<f64>>,
        tau: f64,
        reference: Option<Vec<f64>>,
        ids: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let pref = PreferenceMatrix::new(matrix).map_err(to_py)?;
        let m = pref.len();
        let space = match ids {
            Some(ids) => ResponseSpace::new(ids),
            None => ResponseSpace::indexed(m),
        }
        .map_err(to_py)?;
        let reference = match reference {
            Some(r) => policy(r)?,
            None => Policy::uniform(m),
        };
        let spec = GameSpec::new(space, pref, reference, tau).map_err(to_py)?;
        Ok(Self { spec })
    }

    /// Cyclic game `P(y_i ≻ y_{i+1}) = p` with a uniform reference.
    #[staticmethod]
    fn cyclic(m: usize, p: f64, tau: f64) -> PyResult<Self> {
        let pref = oracle::cyclic_matrix(m, p).map_err(to_py)?;
        Ok(Self {
            spec: GameSpec::uniform(pref, tau).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn bradley_terry(rewards: Vec<f64>, tau: f64) -> PyResult<Self> {
        let pref = oracle::bt_matrix(&rewards).map_err(to_py)?;
        Ok(Self {
            spec: GameSpec::uniform(pref, tau).map_err(to_py)?,
        })
    }

    #[getter]
    fn m(&self) -> usize {
        self.spec.len()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.spec.tau
    }

    #[getter]
    fn matrix(&self) -> Vec<Vec<f64>> {
        self.spec.pref.rows()
    }

    #[getter]
    fn reference(&self) -> Vec<f64> {
        self.spec.ref_policy.probs().to_vec()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.spec.space.ids().to_vec()
    }

    #[pyo3(signature = (tol=1e-8, max_iters=1_000_000))]
    fn nash(&self, tol: f64, max_iters: usize) -> PyResult<Vec<f64>> {
        Ok(game::nash_solve(&self.spec, tol, max_iters)
            .map_err(to_py)?
            .probs()
            .to_vec())
    }

    #[pyo3(signature = (tol=1e-10, damping=0.1))]
    fn nash_fixed_point(&self, tol: f64, damping: f64) -> PyResult<Vec<f64>> {
        Ok(game::nash_fixed_point(&self.spec, tol, damping)
            .map_err(to_py)?
            .probs()
            .to_vec())
    }

    fn value(&self, p1: Vec<f64>, p2: Vec<f64>) -> PyResult<f64> {
        game::game_value(&self.spec, &policy(p1)?, &policy(p2)?).map_err(to_py)
    }

    fn duality_gap(&self, pi: Vec<f64>) -> PyResult<f64> {
        game::duality_gap(&self.spec, &policy(pi)?).map_err(to_py)
    }

    fn best_response(&self, opponent: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(game::best_response(&self.spec, &policy(opponent)?)
            .map_err(to_py)?
            .probs()
            .to_vec())
    }

    fn omd_step(&self, pi_t: Vec<f64>, eta: f64) -> PyResult<Vec<f64>> {
        Ok(omd::omd_step(&self.spec, &policy(pi_t)?, eta)
            .map_err(to_py)?
            .probs()
            .to_vec())
    }

    /// Exact mirror descent from the reference policy. `schedule` is
    /// `"theorem2"` or `"constant"` (which needs `eta`).
    #[pyo3(signature = (iterations, schedule="theorem2", eta=None))]
    fn plan<'py>(
        &self,
        py: Python<'py>,
        iterations: usize,
        schedule: &str,
        eta: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let schedule = match (schedule, eta) {
            ("theorem2", _) => StepSchedule::Theorem2,
            ("constant", Some(eta)) => StepSchedule::Constant { eta },
            ("constant", None) => return Err(PyValueError::new_err("constant schedule needs eta")),
            (other, _) => return Err(PyValueError::new_err(format!("unknown schedule `{other}`"))),
        };
        let nash = match self.spec.tau > 0.0 {
            true => Some(game::nash_solve(&self.spec, 1e-10, 1_000_000).map_err(to_py)?),
            false => None,
        };
        let trace =
            omd::run_planner(&self.spec, schedule, iterations, nash.as_ref()).map_err(to_py)?;
        let out = PyDict::new(py);
        let policies: Vec<Vec<f64>> = trace.policies.iter().map(|p| p.probs().to_vec()).collect();
        out.set_item("policies", policies)?;
        out.set_item("dual_gaps", trace.dual_gaps.clone())?;
        out.set_item("mixture_dual_gaps", trace.mixture_dual_gaps.clone())?;
        out.set_item("kl_to_nash", trace.kl_to_nash.clone())?;
        out.set_item("etas", trace.etas.clone())?;
        out.set_item("measured_B", trace.measured_b)?;
        Ok(out)
    }

    /// Sampled INPO; pass `tournament_k` for best-of-K / worst-of-K pairs.
    #[pyo3(signature = (iterations, eta, n, seed=0, tournament_k=None))]
    fn learn<'py>(
        &self,
        py: Python<'py>,
        iterations: usize,
        eta: f64,
        n: usize,
        seed: u64,
        tournament_k: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut oracle = PreferenceOracle::from_matrix(self.spec.pref.clone(), seed);
        let config = LearnConfig::sampled(eta, self.spec.tau, n, collection(tournament_k));
        let trace = learner::run_inpo(&self.spec, &mut oracle, iterations, &config, None, seed)
            .map_err(to_py)?;
        let out = PyDict::new(py);
        let policies: Vec<Vec<f64>> = trace.policies.iter().map(|p| p.probs().to_vec()).collect();
        out.set_item("policies", policies)?;
        out.set_item("dual_gaps", trace.dual_gaps.clone())?;
        out.set_item("oracle_queries", trace.oracle_queries.clone())?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("Game(m={}, tau={})", self.spec.len(), self.spec.tau)
    }
}

#[pyfunction]
fn kl_divergence(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    game::kl_divergence(&policy(a)?, &policy(b)?).map_err(to_py)
}

/// Runs one bracket over `responses` against a sampled oracle on `matrix`.
/// Returns `(accepted, best, worst, queries)`.
#[pyfunction]
#[pyo3(signature = (matrix, responses, seed=0))]
fn tournament(
    matrix: Vec<Vec<f64>>,
    responses: Vec<usize>,
    seed: u64,
) -> PyResult<(bool, usize, usize, u64)> {
    let pref = PreferenceMatrix::new(matrix).map_err(to_py)?;
    let mut oracle = PreferenceOracle::new(OracleKind::Matrix { matrix: pref }, seed).map_err(to_py)?;
    let outcome = oracle::tournament_select(&mut oracle, &responses).map_err(to_py)?;
    let queries = oracle.query_count();
    Ok(match outcome {
        TournamentOutcome::Accepted { best, worst } => (true, best, worst, queries),
        TournamentOutcome::Rejected { best, worst } => (false, best, worst, queries),
    })
}

/// Runs the invariant suite; returns `(passed, report_json)`.
#[pyfunction]
#[pyo3(signature = (quick=false, seed=None))]
fn verify(py: Python<'_>, quick: bool, seed: Option<u64>) -> PyResult<(bool, String)> {
    let mut options = if quick {
        VerifyOptions::quick()
    } else {
        VerifyOptions::default()
    };
    if let Some(seed) = seed {
        options.seed = seed;
    }
    let report = py.detach(|| run_verify(&options));
    let json = serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((report.passed, json))
}

/// Runs a config file and writes its artifacts; returns the summary JSON.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir=None))]
fn run_config(py: Python<'_>, config_path: &str, out_dir: Option<&str>) -> PyResult<String> {
    let config = parse_config(std::path::Path::new(config_path)).map_err(to_py)?;
    let dir = resolve_output_dir(&config, out_dir.map(std::path::Path::new));
    let output = py
        .detach(|| run_experiment(&config, &dir))
        .map_err(to_py)?;
    serde_json::to_string(&output.summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn inpo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Game>()?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(tournament, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}

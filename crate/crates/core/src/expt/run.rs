//! Running configured experiments and writing their artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dpo::run_iterative_dpo_observed;
use crate::error::{Error, Result};
use crate::expt::config::{Algorithm, ExperimentConfig};
use crate::game::{nash_solve, GameSpec, Policy};
use crate::io::write_policy_csv;
use crate::learner::{run_inpo_observed, LearnConfig, LearnMode, RunTrace};
use crate::omd::{max_log_ratio, run_planner_observed, PlannerTrace};
use crate::oracle::PreferenceOracle;

/// Tolerance and budget for the reference equilibrium behind `kl_to_nash`.
pub const NASH_REF_TOL: f64 = 1e-10;
pub const NASH_REF_BUDGET: usize = 1_000_000;

/// One line of `metrics.jsonl`. Record `t` describes the iterate after `t`
/// updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub t: usize,
    pub dual_gap: f64,
    pub mixture_dual_gap: Option<f64>,
    pub kl_to_nash: Option<f64>,
    pub regret_partial: Option<f64>,
    pub oracle_queries_cumulative: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub seed: u64,
    pub tau: f64,
    pub iterations: usize,
    pub final_dual_gap: f64,
    pub final_kl_to_nash: Option<f64>,
    /// Whether the reference equilibrium met its tolerance.
    pub nash_converged: Option<bool>,
    #[serde(rename = "measured_B")]
    pub measured_b: f64,
    pub total_oracle_queries: u64,
    pub final_policy: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub spec: GameSpec,
    pub records: Vec<MetricRecord>,
    pub summary: RunSummary,
    pub final_policy: Policy,
}

fn planner_record(trace: &PlannerTrace, k: usize) -> MetricRecord {
    MetricRecord {
        t: k + 1,
        dual_gap: trace.dual_gaps[k + 1],
        mixture_dual_gap: Some(trace.mixture_dual_gaps[k]),
        kl_to_nash: trace.kl_to_nash.get(k + 1).copied(),
        regret_partial: trace.regret_partials.get(k).copied(),
        oracle_queries_cumulative: 0,
        wall_ms: None,
    }
}

fn learner_record(trace: &RunTrace, k: usize) -> MetricRecord {
    MetricRecord {
        t: k + 1,
        dual_gap: trace.dual_gaps[k + 1],
        mixture_dual_gap: None,
        kl_to_nash: trace.kl_to_nash.get(k + 1).copied(),
        regret_partial: None,
        oracle_queries_cumulative: trace.oracle_queries[k + 1],
        wall_ms: None,
    }
}

/// Equilibrium used as the `kl_to_nash` reference; `None` when `tau = 0`.
/// An unconverged solve falls back to its best iterate with a warning.
pub fn reference_equilibrium(spec: &GameSpec) -> Result<Option<(Policy, bool)>> {
    if spec.tau == 0.0 {
        return Ok(None);
    }
    match nash_solve(spec, NASH_REF_TOL, NASH_REF_BUDGET) {
        Ok(pi) => Ok(Some((pi, true))),
        Err(Error::NotConverged { gap, best, .. }) => {
            log::warn!("reference equilibrium not converged (gap {gap:.3e}); using best iterate");
            Ok(Some((*best, false)))
        }
        Err(err) => Err(err),
    }
}

/// Runs `config` and streams each metric record to `sink` as it is produced.
pub fn execute(
    config: &ExperimentConfig,
    sink: &mut dyn FnMut(&MetricRecord),
) -> Result<RunOutput> {
    let spec = config.game_spec()?;
    let nash = reference_equilibrium(&spec)?;
    let nash_ref = nash.as_ref().map(|(pi, _)| pi);
    let started = Instant::now();
    let timing = config.record_timing;
    let mut emit = |mut record: MetricRecord| {
        if timing {
            record.wall_ms = Some(started.elapsed().as_secs_f64() * 1e3);
        }
        sink(&record);
        record
    };
    let mut records = Vec::with_capacity(config.iterations);

    let (policies, total_queries) = if config.algorithm.is_planning() {
        let schedule = config.schedule(&spec).expect("planning algorithm has a schedule");
        let trace = run_planner_observed(&spec, schedule, config.iterations, nash_ref, &mut |tr| {
            records.push(emit(planner_record(tr, tr.iterations() - 1)));
        })?;
        (trace.policies, 0)
    } else {
        let kind = config.oracle_kind(&spec);
        let mut oracle = PreferenceOracle::with_options(kind, config.seed, config.hard_oracle)?;
        let mut observe = |tr: &RunTrace| {
            records.push(emit(learner_record(tr, tr.policies.len() - 2)));
        };
        let trace = match config.algorithm {
            Algorithm::InpoSampled {
                eta,
                n,
                collection,
                ridge,
            } => {
                let learn = LearnConfig {
                    eta,
                    tau: spec.tau,
                    ridge,
                    mode: LearnMode::Sampled { n, collection },
                };
                run_inpo_observed(
                    &spec,
                    &mut oracle,
                    config.iterations,
                    &learn,
                    nash_ref,
                    config.seed,
                    &mut observe,
                )?
            }
            Algorithm::IterativeDpo {
                beta,
                n,
                collection,
                ridge,
            } => run_iterative_dpo_observed(
                &spec,
                &mut oracle,
                config.iterations,
                beta,
                n,
                collection,
                ridge,
                nash_ref,
                config.seed,
                &mut observe,
            )?,
            Algorithm::OmdExact(_) | Algorithm::Greedy => unreachable!(),
        };
        (trace.policies, oracle.query_count())
    };

    let final_policy = policies.last().expect("at least one policy").clone();
    let measured_b = policies
        .iter()
        .map(|pi| max_log_ratio(pi, &spec.ref_policy))
        .fold(0.0, f64::max);
    let last = records.last().expect("T ≥ 1");
    let summary = RunSummary {
        algorithm: config.algorithm.name().into(),
        seed: config.seed,
        tau: spec.tau,
        iterations: config.iterations,
        final_dual_gap: last.dual_gap,
        final_kl_to_nash: last.kl_to_nash,
        nash_converged: nash.as_ref().map(|(_, ok)| *ok),
        measured_b,
        total_oracle_queries: total_queries,
        final_policy: final_policy.probs().to_vec(),
    };
    Ok(RunOutput {
        spec,
        records,
        summary,
        final_policy,
    })
}

/// Output directory: explicit override, then the config's `output_dir`,
/// then `$INPO_OUTPUT_ROOT/<algorithm>-seed<seed>`, then `runs/...`.
pub fn resolve_output_dir(config: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    if let Some(dir) = &config.output_dir {
        return if dir.is_absolute() {
            dir.clone()
        } else {
            config.base_dir.join(dir)
        };
    }
    let root = std::env::var_os(crate::expt::config::OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{}-seed{}", config.algorithm.name(), config.seed))
}

/// Runs `config` and writes `metrics.jsonl`, `policy.csv`, `summary.json`
/// and `config.txt` into `out_dir`. Metrics are flushed per iteration, so a
/// failed run leaves the records produced before the failure.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), config.to_config_string())?;
    let mut metrics = BufWriter::new(File::create(out_dir.join("metrics.jsonl"))?);
    let mut write_error: Option<std::io::Error> = None;
    let result = execute(config, &mut |record| {
        if write_error.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("metric record serializes");
        if let Err(err) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
            write_error = Some(err);
        }
    });
    metrics.flush()?;
    if let Some(err) = write_error {
        return Err(err.into());
    }
    let output = result?;
    write_policy_csv(
        &output.spec.space,
        &output.final_policy,
        File::create(out_dir.join("policy.csv"))?,
    )?;
    let mut summary = serde_json::to_string_pretty(&output.summary)?;
    summary.push('\n');
    std::fs::write(out_dir.join("summary.json"), summary)?;
    Ok(output)
}

/// One row of the long-format comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub algorithm: String,
    pub t: usize,
    pub oracle_queries: u64,
    pub dual_gap: f64,
}

/// Runs every config on the same game and tabulates dual gap against oracle
/// queries. Runs are independent and execute on separate threads.
pub fn compare_algorithms(configs: &[ExperimentConfig]) -> Result<Vec<ComparisonRow>> {
    if configs.is_empty() {
        return Err(Error::param("configs", "nothing to compare"));
    }
    let first = configs[0].game_spec()?;
    for config in &configs[1..] {
        if config.game_spec()? != first {
            return Err(Error::param(
                "configs",
                "all compared configs must describe the same game",
            ));
        }
    }
    let outputs: Vec<Result<RunOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|config| scope.spawn(move || execute(config, &mut |_| {})))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("comparison run panicked"))
            .collect()
    });
    let mut rows = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for (config, output) in configs.iter().zip(outputs) {
        let output = output?;
        let mut label = config.algorithm.name().to_string();
        if seen.contains(&label) {
            label = format!("{label}#{}", seen.len());
        }
        seen.push(label.clone());
        rows.extend(output.records.iter().map(|r| ComparisonRow {
            algorithm: label.clone(),
            t: r.t,
            oracle_queries: r.oracle_queries_cumulative,
            dual_gap: r.dual_gap,
        }));
    }
    Ok(rows)
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

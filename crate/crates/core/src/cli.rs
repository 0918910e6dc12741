//! The `inpo` command line.
//!
//! Exit codes: 0 success, 1 config or usage error, 2 solver failure,
//! 3 verification failure.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::Error;
use crate::expt::config::{parse_config, ExperimentConfig};
use crate::expt::run::{
    compare_algorithms, resolve_output_dir, run_experiment, write_comparison_csv,
};
use crate::expt::verify::{verify, VerifyOptions};
use crate::game::{duality_gap, nash_solve, GameSpec, Policy};
use crate::io::{load_matrix, read_policy_csv, write_policy_csv};

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_SOLVER: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "inpo", version, about = "Nash policy optimization on tabular preference games")]
struct Cli {
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for `solve`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the regularized Nash policy of a game.
    Solve {
        /// Preference matrix CSV; defaults to the game of --config.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Reference policy CSV (uniform if omitted).
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 1_000_000)]
        max_iters: usize,
    },
    /// Exact mirror-descent planning (omd_exact or greedy configs).
    Plan,
    /// Learning from sampled preferences (inpo_sampled or iterative_dpo configs).
    Learn,
    /// Run several configs on one game and tabulate gap against queries.
    Compare {
        /// Config files; --config, when given, is prepended.
        configs: Vec<PathBuf>,
    },
    /// Run the invariant suite and print a JSON report.
    Verify {
        /// Reduced scale.
        #[arg(long)]
        quick: bool,
        /// Random games per check.
        #[arg(long)]
        games: Option<usize>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::NotConverged { .. } | Error::SingularSystem(_) | Error::Collection(_) => {
                EXIT_SOLVER
            }
            _ => EXIT_CONFIG,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| usage("this command needs --config <file>"))?;
    let mut config = parse_config(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn solve(
    cli: &Cli,
    matrix: Option<&Path>,
    reference: Option<&Path>,
    tau: Option<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(), Failure> {
    let spec = match matrix {
        Some(path) => {
            let (space, pref) = load_matrix(path)?;
            let reference = match reference {
                Some(r) => read_policy_csv(File::open(r).map_err(Error::from)?, &space)?,
                None => Policy::uniform(space.len()),
            };
            let tau = tau.ok_or_else(|| usage("--matrix needs --tau"))?;
            GameSpec::new(space, pref, reference, tau)?
        }
        None => {
            let mut spec = load_config(cli)?.game_spec()?;
            if let Some(tau) = tau {
                spec = GameSpec::new(spec.space, spec.pref, spec.ref_policy, tau)?;
            }
            spec
        }
    };
    let nash = nash_solve(&spec, tol, max_iters)?;
    let gap = duality_gap(&spec, &nash)?;
    match &cli.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(Error::from)?;
            }
            write_policy_csv(&spec.space, &nash, File::create(path).map_err(Error::from)?)?;
        }
        None => write_policy_csv(&spec.space, &nash, std::io::stdout().lock())?,
    }
    log::info!("duality gap {gap:.3e}");
    Ok(())
}

fn run_configured(cli: &Cli, planning: bool) -> Result<(), Failure> {
    let config = load_config(cli)?;
    if config.algorithm.is_planning() != planning {
        let (want, other) = if planning {
            ("plan", "learn")
        } else {
            ("learn", "plan")
        };
        return Err(usage(format!(
            "algorithm `{}` is not run by `{want}`; use `{other}`",
            config.algorithm.name()
        )));
    }
    let dir = resolve_output_dir(&config, cli.out.as_deref());
    let output = run_experiment(&config, &dir)?;
    if !cli.quiet {
        println!(
            "{}: final gap {:.3e}, queries {}, artifacts in {}",
            output.summary.algorithm,
            output.summary.final_dual_gap,
            output.summary.total_oracle_queries,
            dir.display()
        );
    }
    Ok(())
}

fn compare(cli: &Cli, paths: &[PathBuf]) -> Result<(), Failure> {
    let mut configs = Vec::new();
    if cli.config.is_some() {
        configs.push(load_config(cli)?);
    }
    for path in paths {
        let mut config = parse_config(path)?;
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        configs.push(config);
    }
    if configs.is_empty() {
        return Err(usage("compare needs at least one config"));
    }
    let rows = compare_algorithms(&configs)?;
    match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(Error::from)?;
            let path = dir.join("comparison.csv");
            write_comparison_csv(&rows, File::create(&path).map_err(Error::from)?)?;
            if !cli.quiet {
                println!("comparison table in {}", path.display());
            }
        }
        None => write_comparison_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn run_verify(cli: &Cli, quick: bool, games: Option<usize>) -> Result<(), Failure> {
    let mut options = if quick {
        VerifyOptions::quick()
    } else {
        VerifyOptions::default()
    };
    if let Some(games) = games {
        options.games = games;
    }
    if let Some(seed) = cli.seed {
        options.seed = seed;
    }
    let report = verify(&options);
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(Error::from)?;
            std::fs::write(dir.join("verify.json"), format!("{json}\n")).map_err(Error::from)?;
        }
        None => println!("{json}"),
    }
    if !cli.quiet {
        let mut err = std::io::stderr().lock();
        for check in &report.checks {
            let status = match (check.passed, check.gating) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "FAIL (non-gating)",
            };
            let _ = writeln!(
                err,
                "{status:<18} {:<20} measured {:.3e} threshold {:.3e}  {}",
                check.name, check.measured, check.threshold, check.detail
            );
        }
        let _ = writeln!(err, "suite finished in {:.1} s", report.elapsed_ms / 1e3);
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            message: "verification failed".into(),
        })
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let level = if cli.quiet { "error" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();

    let result = match &cli.command {
        Command::Solve {
            matrix,
            reference,
            tau,
            tol,
            max_iters,
        } => solve(
            &cli,
            matrix.as_deref(),
            reference.as_deref(),
            *tau,
            *tol,
            *max_iters,
        ),
        Command::Plan => run_configured(&cli, true),
        Command::Learn => run_configured(&cli, false),
        Command::Compare { configs } => compare(&cli, configs),
        Command::Verify { quick, games } => run_verify(&cli, *quick, *games),
    };
    match result {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            failure.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");

    fn cli(args: &[&str]) -> u8 {
        run(std::iter::once("inpo").chain(args.iter().copied()))
    }

    fn config(name: &str) -> String {
        format!("{CONFIG_DIR}/{name}")
    }

    #[test]
    fn shipped_example_matches_builtin() {
        let shipped = parse_config(Path::new(&config("cyclic_omd.conf"))).unwrap();
        let builtin =
            crate::expt::config::parse_config_str(crate::expt::config::EXAMPLE_CONFIG, Path::new(CONFIG_DIR))
                .unwrap();
        assert_eq!(shipped, builtin);
        for name in ["cyclic_inpo.conf", "cyclic_greedy.conf", "cyclic_dpo.conf"] {
            parse_config(Path::new(&config(name))).unwrap();
        }
    }

    #[test]
    fn plan_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let code = cli(&["--quiet", "--config", &config("cyclic_omd.conf"), "--out", out.to_str().unwrap(), "plan"]);
        assert_eq!(code, 0);
        for file in ["metrics.jsonl", "policy.csv", "summary.json", "config.txt"] {
            assert!(out.join(file).exists(), "{file}");
        }
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["seed"], 7);
        assert!(summary["measured_B"].is_number());
    }

    #[test]
    fn seed_flag_overrides_config() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let args = ["--quiet", "--seed", "99", "--config", &config("cyclic_greedy.conf"), "--out", out.to_str().unwrap(), "plan"];
        assert_eq!(cli(&args), 0);
        let text = std::fs::read_to_string(out.join("config.txt")).unwrap();
        assert!(text.contains("seed = 99"));
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        // wrong subcommand for the algorithm
        assert_eq!(cli(&["--quiet", "--config", &config("cyclic_omd.conf"), "learn"]), EXIT_CONFIG);
        // missing config
        assert_eq!(cli(&["--quiet", "plan"]), EXIT_CONFIG);
        // out-of-range value
        let bad = dir.path().join("bad.conf");
        std::fs::write(&bad, crate::expt::config::EXAMPLE_CONFIG.replace("tau = 0.1", "tau = -1")).unwrap();
        assert_eq!(cli(&["--quiet", "--config", bad.to_str().unwrap(), "plan"]), EXIT_CONFIG);
        // unknown flag
        assert_eq!(cli(&["--quiet", "plan", "--bogus"]), EXIT_CONFIG);
        // solver budget exhausted
        let matrix = dir.path().join("m.csv");
        std::fs::write(&matrix, "a,b,c\n0.5,0.9,0.1\n0.1,0.5,0.9\n0.9,0.1,0.5\n").unwrap();
        let reference = dir.path().join("r.csv");
        std::fs::write(&reference, "response_id,probability\na,0.5\nb,0.3\nc,0.2\n").unwrap();
        let code = cli(&[
            "--quiet", "solve", "--matrix", matrix.to_str().unwrap(), "--ref",
            reference.to_str().unwrap(), "--tau", "0.1", "--max-iters", "3",
        ]);
        assert_eq!(code, EXIT_SOLVER);
    }

    #[test]
    fn solve_writes_the_equilibrium() {
        let dir = tempfile::tempdir().unwrap();
        let matrix = dir.path().join("m.csv");
        std::fs::write(&matrix, "good,bad\n0.5,0.8\n0.2,0.5\n").unwrap();
        let out = dir.path().join("nash.csv");
        let code = cli(&["--quiet", "--out", out.to_str().unwrap(), "solve", "--matrix", matrix.to_str().unwrap(), "--tau", "0.5"]);
        assert_eq!(code, 0);
        let space = crate::game::ResponseSpace::new(vec!["good".into(), "bad".into()]).unwrap();
        let nash = read_policy_csv(File::open(&out).unwrap(), &space).unwrap();
        let q = 1.0 / (1.0 + (-0.6f64).exp());
        assert!((nash.probs()[0] - q).abs() < 1e-6);
    }

    #[test]
    fn compare_writes_long_table() {
        let dir = tempfile::tempdir().unwrap();
        let code = cli(&[
            "--quiet", "--out", dir.path().to_str().unwrap(), "compare",
            &config("cyclic_omd.conf"), &config("cyclic_greedy.conf"),
        ]);
        assert_eq!(code, 0);
        let table = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        assert!(table.starts_with("algorithm,t,oracle_queries,dual_gap\n"));
        assert_eq!(table.lines().count(), 201);
        // the two learners share the query accounting columns
        let code = cli(&[
            "--quiet", "--out", dir.path().to_str().unwrap(), "compare",
            &config("cyclic_inpo.conf"), &config("cyclic_dpo.conf"),
        ]);
        assert_eq!(code, 0);
        // different games are rejected
        let other = dir.path().join("other.conf");
        std::fs::write(&other, crate::expt::config::EXAMPLE_CONFIG.replace("game.p = 0.9", "game.p = 0.7")).unwrap();
        let code = cli(&["--quiet", "compare", &config("cyclic_omd.conf"), other.to_str().unwrap()]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn quick_verify_passes() {
        let dir = tempfile::tempdir().unwrap();
        let code = cli(&["--quiet", "--out", dir.path().to_str().unwrap(), "verify", "--quick", "--games", "1"]);
        assert_eq!(code, 0);
        let report: crate::expt::verify::VerifyReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
        assert!(report.passed);
        assert_eq!(report.checks.len(), crate::expt::verify::check_names().len());
    }
}

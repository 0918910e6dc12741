//! Flat `key = value` experiment configuration with dotted sections.
//!
//! ```text
//! # rock-paper-scissors under exact mirror descent
//! game.kind = cyclic
//! game.m = 3
//! game.p = 0.9
//! ref.kind = uniform
//! tau = 0.1
//! algo.kind = omd_exact
//! algo.schedule = theorem2
//! T = 100
//! seed = 7
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::game::{GameSpec, Policy, PreferenceMatrix, ResponseSpace};
use crate::io::{load_matrix, read_policy_csv};
use crate::omd::{kappa_bound, StepSchedule};
use crate::oracle::{bt_matrix, cyclic_matrix, CollectionMode, OracleKind};

/// Default output root when neither the config nor the command line names one.
pub const OUTPUT_ROOT_ENV: &str = "INPO_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub enum GameSource {
    File(PathBuf),
    BradleyTerry(Vec<f64>),
    Cyclic { m: usize, p: f64 },
    Random { m: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum RefSource {
    Uniform,
    File(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleSpec {
    Theorem2,
    Constant { eta: f64 },
    /// Horizon is `T`, `kappa` comes from the reference policy.
    Lemma1 { log_ratio_bound: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Algorithm {
    OmdExact(ScheduleSpec),
    InpoSampled {
        eta: f64,
        n: usize,
        collection: CollectionMode,
        ridge: f64,
    },
    Greedy,
    IterativeDpo {
        beta: f64,
        n: usize,
        collection: CollectionMode,
        ridge: f64,
    },
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::OmdExact(_) => "omd_exact",
            Algorithm::InpoSampled { .. } => "inpo_sampled",
            Algorithm::Greedy => "greedy",
            Algorithm::IterativeDpo { .. } => "iterative_dpo",
        }
    }

    /// Exact planning (no oracle queries) as opposed to learning from samples.
    pub fn is_planning(&self) -> bool {
        matches!(self, Algorithm::OmdExact(_) | Algorithm::Greedy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub game: GameSource,
    pub reference: RefSource,
    pub tau: f64,
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Clip oracle preferences to 0/1.
    pub hard_oracle: bool,
    /// Adds wall-clock milliseconds to metric records (breaks byte-identical
    /// reruns).
    pub record_timing: bool,
    /// Directory that relative file paths are resolved against.
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Builds the game described by the config.
    pub fn game_spec(&self) -> Result<GameSpec> {
        let (space, pref) = match &self.game {
            GameSource::File(path) => load_matrix(&self.resolve(path))?,
            GameSource::BradleyTerry(rewards) => {
                let pref = bt_matrix(rewards)?;
                (ResponseSpace::indexed(pref.len())?, pref)
            }
            GameSource::Cyclic { m, p } => (ResponseSpace::indexed(*m)?, cyclic_matrix(*m, *p)?),
            GameSource::Random { m, seed } => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                (ResponseSpace::indexed(*m)?, PreferenceMatrix::random(*m, &mut rng))
            }
        };
        let reference = match &self.reference {
            RefSource::Uniform => Policy::uniform(space.len()),
            RefSource::File(path) => {
                read_policy_csv(std::fs::File::open(self.resolve(path))?, &space)?
            }
        };
        GameSpec::new(space, pref, reference, self.tau)
    }

    pub fn oracle_kind(&self, spec: &GameSpec) -> OracleKind {
        match &self.game {
            GameSource::BradleyTerry(rewards) => OracleKind::BradleyTerry {
                rewards: rewards.clone(),
            },
            GameSource::Cyclic { m, p } => OracleKind::Cyclic { m: *m, p: *p },
            _ => OracleKind::Matrix {
                matrix: spec.pref.clone(),
            },
        }
    }

    pub fn schedule(&self, spec: &GameSpec) -> Option<StepSchedule> {
        match self.algorithm {
            Algorithm::OmdExact(ScheduleSpec::Theorem2) => Some(StepSchedule::Theorem2),
            Algorithm::OmdExact(ScheduleSpec::Constant { eta }) => {
                Some(StepSchedule::Constant { eta })
            }
            Algorithm::OmdExact(ScheduleSpec::Lemma1 { log_ratio_bound }) => {
                Some(StepSchedule::Lemma1 {
                    horizon: self.iterations,
                    log_ratio_bound,
                    kappa: kappa_bound(&spec.ref_policy),
                })
            }
            Algorithm::Greedy => Some(StepSchedule::Constant { eta: spec.tau }),
            _ => None,
        }
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &self.game {
            GameSource::File(path) => {
                line("game.kind", "file".into());
                line("game.path", path.display().to_string());
            }
            GameSource::BradleyTerry(rewards) => {
                line("game.kind", "bt".into());
                line(
                    "game.rewards",
                    rewards.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(", "),
                );
            }
            GameSource::Cyclic { m, p } => {
                line("game.kind", "cyclic".into());
                line("game.m", m.to_string());
                line("game.p", p.to_string());
            }
            GameSource::Random { m, seed } => {
                line("game.kind", "random".into());
                line("game.m", m.to_string());
                line("game.seed", seed.to_string());
            }
        }
        match &self.reference {
            RefSource::Uniform => line("ref.kind", "uniform".into()),
            RefSource::File(path) => {
                line("ref.kind", "file".into());
                line("ref.path", path.display().to_string());
            }
        }
        line("tau", self.tau.to_string());
        line("algo.kind", self.algorithm.name().into());
        let collection = |line: &mut dyn FnMut(&str, String), c: &CollectionMode| match c {
            CollectionMode::Plain => line("algo.collection", "plain".into()),
            CollectionMode::Tournament { k } => {
                line("algo.collection", "tournament".into());
                line("algo.k", k.to_string());
            }
        };
        match &self.algorithm {
            Algorithm::OmdExact(schedule) => match schedule {
                ScheduleSpec::Theorem2 => line("algo.schedule", "theorem2".into()),
                ScheduleSpec::Constant { eta } => {
                    line("algo.schedule", "constant".into());
                    line("algo.eta", eta.to_string());
                }
                ScheduleSpec::Lemma1 { log_ratio_bound } => {
                    line("algo.schedule", "lemma1".into());
                    line("algo.B", log_ratio_bound.to_string());
                }
            },
            Algorithm::InpoSampled {
                eta,
                n,
                collection: c,
                ridge,
            } => {
                line("algo.eta", eta.to_string());
                line("algo.n", n.to_string());
                collection(&mut line, c);
                line("algo.ridge", ridge.to_string());
            }
            Algorithm::Greedy => {}
            Algorithm::IterativeDpo {
                beta,
                n,
                collection: c,
                ridge,
            } => {
                line("algo.beta", beta.to_string());
                line("algo.n", n.to_string());
                collection(&mut line, c);
                line("algo.ridge", ridge.to_string());
            }
        }
        line("T", self.iterations.to_string());
        line("seed", self.seed.to_string());
        if let Some(dir) = &self.output_dir {
            line("output_dir", dir.display().to_string());
        }
        if self.hard_oracle {
            line("oracle.hard", "true".into());
        }
        if self.record_timing {
            line("record_timing", "true".into());
        }
        out
    }
}

struct Entries {
    values: BTreeMap<String, (usize, String)>,
    used: std::collections::BTreeSet<String>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                location: format!("line {lineno}"),
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config {
                    location: format!("line {lineno}"),
                    reason: "empty key".into(),
                });
            }
            if let Some((first, _)) = values.get(&key) {
                return Err(Error::Config {
                    location: format!("line {lineno} (`{key}`)"),
                    reason: format!("duplicate key, first set on line {first}"),
                });
            }
            values.insert(key, (lineno, value.trim().to_string()));
        }
        Ok(Self {
            values,
            used: Default::default(),
        })
    }

    fn location(&self, key: &str) -> String {
        match self.values.get(key) {
            Some((line, _)) => format!("line {line} (`{key}`)"),
            None => format!("`{key}`"),
        }
    }

    fn err(&self, key: &str, reason: impl Into<String>) -> Error {
        Error::Config {
            location: self.location(key),
            reason: reason.into(),
        }
    }

    fn optional(&mut self, key: &str) -> Option<String> {
        let value = self.values.get(key).map(|(_, v)| v.clone());
        if value.is_some() {
            self.used.insert(key.to_string());
        }
        value
    }

    fn required(&mut self, key: &str) -> Result<String> {
        self.optional(key)
            .ok_or_else(|| self.err(key, "missing required key"))
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| self.err(key, format!("cannot parse `{raw}`")))
    }

    fn required_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self.required(key)?;
        self.parse_value(key, &raw)
    }

    fn optional_parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.optional(key) {
            Some(raw) => self.parse_value(key, &raw),
            None => Ok(default),
        }
    }

    fn finish(&self) -> Result<()> {
        match self.values.keys().find(|k| !self.used.contains(*k)) {
            Some(key) => Err(self.err(key, "unknown key")),
            None => Ok(()),
        }
    }
}

fn collection_mode(entries: &mut Entries) -> Result<CollectionMode> {
    match entries.optional("algo.collection").as_deref() {
        None | Some("plain") => Ok(CollectionMode::Plain),
        Some("tournament") => {
            let k: usize = entries.optional_parsed("algo.k", 8)?;
            if k < 2 || !k.is_power_of_two() {
                return Err(entries.err("algo.k", "must be a power of two ≥ 2"));
            }
            Ok(CollectionMode::Tournament { k })
        }
        Some(other) => Err(entries.err(
            "algo.collection",
            format!("unknown collection mode `{other}`"),
        )),
    }
}

fn positive(entries: &Entries, key: &str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(entries.err(key, format!("must be > 0, got {value}")))
    }
}

fn non_negative(entries: &Entries, key: &str, value: f64) -> Result<f64> {
    if value >= 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(entries.err(key, format!("must be ≥ 0, got {value}")))
    }
}

/// Parses config text; relative file paths resolve against `base_dir`.
/// Referenced files are loaded and validated before returning.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut e = Entries::parse(text)?;

    let game = match e.required("game.kind")?.as_str() {
        "file" => GameSource::File(PathBuf::from(e.required("game.path")?)),
        "bt" => {
            let raw = e.required("game.rewards")?;
            let rewards = raw
                .split(',')
                .map(|r| e.parse_value::<f64>("game.rewards", r.trim()))
                .collect::<Result<Vec<_>>>()?;
            if rewards.len() < 2 {
                return Err(e.err("game.rewards", "need at least 2 rewards"));
            }
            GameSource::BradleyTerry(rewards)
        }
        "cyclic" => {
            let m: usize = e.required_parsed("game.m")?;
            let p: f64 = e.required_parsed("game.p")?;
            if m < 3 {
                return Err(e.err("game.m", "cyclic game needs m ≥ 3"));
            }
            if !(p > 0.5 && p <= 1.0) {
                return Err(e.err("game.p", "must be in (0.5, 1]"));
            }
            GameSource::Cyclic { m, p }
        }
        "random" => {
            let m: usize = e.required_parsed("game.m")?;
            if m < 2 {
                return Err(e.err("game.m", "need m ≥ 2"));
            }
            GameSource::Random {
                m,
                seed: e.required_parsed("game.seed")?,
            }
        }
        other => return Err(e.err("game.kind", format!("unknown game kind `{other}`"))),
    };

    let reference = match e.optional("ref.kind").as_deref() {
        None | Some("uniform") => RefSource::Uniform,
        Some("file") => RefSource::File(PathBuf::from(e.required("ref.path")?)),
        Some(other) => return Err(e.err("ref.kind", format!("unknown reference `{other}`"))),
    };

    let tau: f64 = e.required_parsed("tau")?;
    let tau = non_negative(&e, "tau", tau)?;

    let algorithm = match e.required("algo.kind")?.as_str() {
        "omd_exact" => {
            let schedule = match e.optional("algo.schedule").as_deref() {
                None | Some("theorem2") => ScheduleSpec::Theorem2,
                Some("constant") => {
                    let eta = e.required_parsed("algo.eta")?;
                    ScheduleSpec::Constant {
                        eta: positive(&e, "algo.eta", eta)?,
                    }
                }
                Some("lemma1") => {
                    let b = e.optional_parsed("algo.B", 0.0)?;
                    ScheduleSpec::Lemma1 {
                        log_ratio_bound: non_negative(&e, "algo.B", b)?,
                    }
                }
                Some(other) => {
                    return Err(e.err("algo.schedule", format!("unknown schedule `{other}`")))
                }
            };
            if schedule == ScheduleSpec::Theorem2 && tau == 0.0 {
                return Err(e.err("tau", "theorem2 schedule needs tau > 0"));
            }
            Algorithm::OmdExact(schedule)
        }
        "inpo_sampled" => {
            let eta = e.required_parsed("algo.eta")?;
            let eta = positive(&e, "algo.eta", eta)?;
            let n: usize = e.required_parsed("algo.n")?;
            if n == 0 {
                return Err(e.err("algo.n", "must be ≥ 1"));
            }
            let collection = collection_mode(&mut e)?;
            let ridge = e.optional_parsed("algo.ridge", crate::learner::SAMPLED_RIDGE)?;
            Algorithm::InpoSampled {
                eta,
                n,
                collection,
                ridge: non_negative(&e, "algo.ridge", ridge)?,
            }
        }
        "greedy" => {
            if tau == 0.0 {
                return Err(e.err("tau", "greedy best response needs tau > 0"));
            }
            Algorithm::Greedy
        }
        "iterative_dpo" => {
            let beta = e.required_parsed("algo.beta")?;
            let beta = positive(&e, "algo.beta", beta)?;
            let n: usize = e.required_parsed("algo.n")?;
            if n == 0 {
                return Err(e.err("algo.n", "must be ≥ 1"));
            }
            let collection = collection_mode(&mut e)?;
            let ridge = e.optional_parsed("algo.ridge", crate::learner::SAMPLED_RIDGE)?;
            Algorithm::IterativeDpo {
                beta,
                n,
                collection,
                ridge: non_negative(&e, "algo.ridge", ridge)?,
            }
        }
        other => return Err(e.err("algo.kind", format!("unknown algorithm `{other}`"))),
    };

    let iterations: usize = e.required_parsed("T")?;
    if iterations < 1 {
        return Err(e.err("T", "must be ≥ 1"));
    }
    let seed: u64 = e.required_parsed("seed")?;
    let output_dir = e.optional("output_dir").map(PathBuf::from);
    let hard_oracle = e.optional_parsed("oracle.hard", false)?;
    let record_timing = e.optional_parsed("record_timing", false)?;
    e.finish()?;

    let config = ExperimentConfig {
        game,
        reference,
        tau,
        algorithm,
        iterations,
        seed,
        output_dir,
        hard_oracle,
        record_timing,
        base_dir: base_dir.to_path_buf(),
    };
    // load referenced files now so a bad matrix fails before any run
    config.game_spec().map_err(|err| {
        let key = match (&config.game, &config.reference) {
            (GameSource::File(_), _) => "game.path",
            (_, RefSource::File(_)) => "ref.path",
            _ => "game.kind",
        };
        e.err(key, err.to_string())
    })?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|err| Error::Config {
        location: path.display().to_string(),
        reason: err.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config_str(&text, base)
}

/// The shipped example config.
pub const EXAMPLE_CONFIG: &str = "\
# rock-paper-scissors under exact mirror descent
game.kind = cyclic
game.m = 3
game.p = 0.9
ref.kind = uniform
tau = 0.1
algo.kind = omd_exact
algo.schedule = theorem2
T = 100
seed = 7
";

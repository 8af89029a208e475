//! Flat `key=value` run configuration with dotted namespaces.
//!
//! Layers, lowest first: built-in defaults, `PAINET_SEED`, the `--config`
//! file, `--set` overrides, then explicit flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use painet::data::SimConfig;
use painet::model::{ModelConfig, TrainConfig};

use crate::error::CliError;

pub const SEED_ENV: &str = "PAINET_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Final frame only.
    S2s,
    /// Every frame up to the horizon.
    S2t,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s2s" => Ok(Self::S2s),
            "s2t" => Ok(Self::S2t),
            other => Err(format!("unknown task {other:?}; expected s2s or s2t")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::S2s => "s2s",
            Self::S2t => "s2t",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub samples: usize,
    /// Train, validation, and test fractions.
    pub split: (f64, f64, f64),
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_path: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub task: Task,
    /// Dataset split evaluated by `eval`.
    pub eval_split: String,
    /// Requested prediction horizon; defaults to the model's own.
    pub eval_horizon: Option<usize>,
    pub suite: String,
    pub trials: Option<usize>,
    pub tolerance: Option<f64>,
    pub scale_particles: Vec<usize>,
    pub scale_horizons: Vec<usize>,
    pub scale_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimConfig::default(),
            samples: 100,
            split: (0.8, 0.1, 0.1),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_path: None,
            model_path: None,
            task: Task::S2t,
            eval_split: "test".into(),
            eval_horizon: None,
            suite: "all".into(),
            trials: None,
            tolerance: None,
            scale_particles: vec![16, 32, 64],
            scale_horizons: vec![5, 10],
            scale_repeats: 5,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("bad value {value:?} for {key}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, String> {
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults with the seed taken from `PAINET_SEED` when set.
    pub fn from_env() -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        if let Some(k) = key.strip_prefix("sim.") {
            return self.sim.set(k, value);
        }
        if let Some(k) = key.strip_prefix("model.") {
            return self.model.set(k, value);
        }
        if let Some(k) = key.strip_prefix("train.") {
            return self.train.set(k, value);
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.samples" => self.samples = parse(key, value)?,
            "data.split" => match parse_list::<f64>(key, value)?.as_slice() {
                &[a, b, c] => self.split = (a, b, c),
                _ => return Err(format!("{key} needs three comma-separated fractions")),
            },
            "io.data" => self.data_path = optional::<PathBuf>(key, value)?,
            "io.model" => self.model_path = optional::<PathBuf>(key, value)?,
            "eval.task" => self.task = value.parse()?,
            "eval.split" => match value {
                "train" | "val" | "test" => self.eval_split = value.into(),
                other => {
                    return Err(format!(
                        "unknown split {other:?}; expected train, val, or test"
                    ))
                }
            },
            "eval.horizon" => self.eval_horizon = optional(key, value)?,
            "verify.suite" => self.suite = value.into(),
            "verify.trials" => self.trials = optional(key, value)?,
            "verify.tolerance" => self.tolerance = optional(key, value)?,
            "scale.particles" => self.scale_particles = parse_list(key, value)?,
            "scale.horizons" => self.scale_horizons = parse_list(key, value)?,
            "scale.repeats" => self.scale_repeats = parse(key, value)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Applies `KEY=VALUE` text, as given to `--set`.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {assignment:?} is not KEY=VALUE")))?;
        self.set(k.trim(), v).map_err(CliError::Usage)
    }

    /// Applies a config file body. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fail = |m: String| CliError::Usage(format!("{origin}:{}: {m}", n + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fail("expected KEY=VALUE".into()))?;
            self.set(k.trim(), v).map_err(fail)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}", path.display()), e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Every key with its resolved value.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![("seed".to_string(), self.seed.to_string())];
        out.extend(
            self.sim
                .entries()
                .into_iter()
                .map(|(k, v)| (format!("sim.{k}"), v)),
        );
        out.push(("data.samples".into(), self.samples.to_string()));
        out.push((
            "data.split".into(),
            format!("{},{},{}", self.split.0, self.split.1, self.split.2),
        ));
        out.extend(
            self.model
                .entries()
                .into_iter()
                .map(|(k, v)| (format!("model.{k}"), v)),
        );
        out.extend(
            self.train
                .entries()
                .into_iter()
                .map(|(k, v)| (format!("train.{k}"), v)),
        );
        out.push((
            "io.data".into(),
            show(&self.data_path.as_ref().map(|p| p.display())),
        ));
        out.push((
            "io.model".into(),
            show(&self.model_path.as_ref().map(|p| p.display())),
        ));
        out.push(("eval.task".into(), self.task.to_string()));
        out.push(("eval.split".into(), self.eval_split.clone()));
        out.push(("eval.horizon".into(), show(&self.eval_horizon)));
        out.push(("verify.suite".into(), self.suite.clone()));
        out.push(("verify.trials".into(), show(&self.trials)));
        out.push(("verify.tolerance".into(), show(&self.tolerance)));
        out.push(("scale.particles".into(), join(&self.scale_particles)));
        out.push(("scale.horizons".into(), join(&self.scale_horizons)));
        out.push(("scale.repeats".into(), self.scale_repeats.to_string()));
        out
    }

    /// Snapshot that reproduces the run when passed back via `--config`.
    pub fn snapshot(&self, command: &str) -> String {
        let mut s = format!("# painet {command}\n");
        for (k, v) in self.entries() {
            writeln!(s, "{k}={v}").expect("string write");
        }
        s
    }
}

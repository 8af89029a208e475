use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "painet",
    version,
    about = "Trajectory prediction with energy-derived attention and an equivariant decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat KEY=VALUE config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Global seed; falls back to PAINET_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving every output of the run.
    #[arg(long, default_value = "painet-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a spring + Coulomb dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_particles: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        spring_k: Option<f64>,
        #[arg(long)]
        coulomb_c: Option<f64>,
        /// Integrator time step.
        #[arg(long)]
        dt: Option<f64>,
        /// Integrator steps between stored frames.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Train, validation, and test fractions, e.g. 0.8,0.1,0.1.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        mlp_hidden: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        num_heads: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Share one attention layer across all steps.
        #[arg(long)]
        tie_steps: bool,
        /// Reuse the initial embeddings at every step.
        #[arg(long)]
        no_attention: bool,
    },
    /// Score a model and the linear baseline on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        /// s2s (final frame) or s2t (whole trajectory).
        #[arg(long)]
        task: Option<String>,
        /// train, val, or test.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Run property suites.
    Verify {
        #[command(flatten)]
        common: Common,
        /// descent, equivariance, gradients, matrix-vs-pairwise, or all.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Time inference over a grid of particle counts and horizons.
    Scale {
        #[command(flatten)]
        common: Common,
        /// Trained model; a seeded random one otherwise.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Comma-separated particle counts.
        #[arg(long)]
        particles: Option<String>,
        /// Comma-separated horizons.
        #[arg(long)]
        horizons: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

struct Flags(Vec<(&'static str, String)>);

impl Flags {
    fn opt<T: ToString>(&mut self, key: &'static str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, v.to_string()));
        }
        self
    }

    fn path(&mut self, key: &'static str, v: &Option<PathBuf>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, v.display().to_string()));
        }
        self
    }

    fn flag(&mut self, key: &'static str, on: bool, value: &str) -> &mut Self {
        if on {
            self.0.push((key, value.to_string()));
        }
        self
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Generate { .. } => "generate",
            Self::Train { .. } => "train",
            Self::Eval { .. } => "eval",
            Self::Verify { .. } => "verify",
            Self::Scale { .. } => "scale",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Self::Generate { common, .. }
            | Self::Train { common, .. }
            | Self::Eval { common, .. }
            | Self::Verify { common, .. }
            | Self::Scale { common, .. } => common,
        }
    }

    /// Explicit flags as config assignments.
    fn flags(&self) -> Vec<(&'static str, String)> {
        let mut f = Flags(Vec::new());
        f.opt("seed", &self.common().seed);
        match self {
            Self::Generate {
                n_particles,
                frames,
                spring_k,
                coulomb_c,
                dt,
                stride,
                samples,
                split,
                ..
            } => {
                f.opt("sim.particles", n_particles)
                    .opt("sim.frames", frames)
                    .opt("sim.spring_k", spring_k)
                    .opt("sim.coulomb_c", coulomb_c)
                    .opt("sim.dt_sim", dt)
                    .opt("sim.stride", stride)
                    .opt("data.samples", samples)
                    .opt("data.split", split);
            }
            Self::Train {
                data,
                hidden,
                mlp_hidden,
                layers,
                horizon,
                eta,
                num_heads,
                lr,
                weight_decay,
                patience,
                epochs,
                batch_size,
                tie_steps,
                no_attention,
                ..
            } => {
                f.path("io.data", data)
                    .opt("model.hidden", hidden)
                    .opt("model.mlp_hidden", mlp_hidden)
                    .opt("model.layers", layers)
                    .opt("model.horizon", horizon)
                    .opt("model.eta", eta)
                    .opt("model.num_heads", num_heads)
                    .opt("train.learning_rate", lr)
                    .opt("train.weight_decay", weight_decay)
                    .opt("train.patience", patience)
                    .opt("train.epochs", epochs)
                    .opt("train.batch_size", batch_size)
                    .flag("model.tie_steps", *tie_steps, "true")
                    .flag("model.attention", *no_attention, "false");
            }
            Self::Eval {
                model,
                data,
                task,
                split,
                horizon,
                ..
            } => {
                f.path("io.model", model)
                    .path("io.data", data)
                    .opt("eval.task", task)
                    .opt("eval.split", split)
                    .opt("eval.horizon", horizon);
            }
            Self::Verify {
                suite,
                trials,
                tolerance,
                ..
            } => {
                f.opt("verify.suite", suite)
                    .opt("verify.trials", trials)
                    .opt("verify.tolerance", tolerance);
            }
            Self::Scale {
                model,
                particles,
                horizons,
                repeats,
                ..
            } => {
                f.path("io.model", model)
                    .opt("scale.particles", particles)
                    .opt("scale.horizons", horizons)
                    .opt("scale.repeats", repeats);
            }
        }
        f.0
    }

    /// Layers defaults, `PAINET_SEED`, `--config`, `--set`, and flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let common = self.common();
        let mut cfg = RunConfig::from_env()?;
        if let Some(path) = &common.config {
            cfg.apply_file(path)?;
        }
        for a in &common.overrides {
            cfg.apply_assignment(a)?;
        }
        for (k, v) in self.flags() {
            cfg.set(k, &v).map_err(CliError::Usage)?;
        }
        Ok(cfg)
    }
}

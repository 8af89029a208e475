//! One function per subcommand. Each writes its outputs and a
//! `resolved.conf` snapshot under the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use painet::data::{self, Dataset, Split};
use painet::metrics::{self, EvalReport};
use painet::model::{self, ModelParams, Trajectory};
use painet::tensor::memory;
use painet::verify::{self, Suite, VerifyOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Task};
use crate::error::CliError;

pub const DATASET_FILE: &str = "dataset.txt";
pub const MODEL_FILE: &str = "model.painet";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VERIFY_FILE: &str = "verify.csv";
pub const SCALING_FILE: &str = "scaling.csv";
pub const SNAPSHOT_FILE: &str = "resolved.conf";

fn prepare_out(out: &Path, cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::io(format!("cannot create {}", out.display()), e))?;
    write_text(&out.join(SNAPSHOT_FILE), &cfg.snapshot(command))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("no {what} given; pass {flag}")))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!(
            "dataset not found: {}",
            path.display()
        )));
    }
    data::read_dataset(path)
        .map_err(|e| CliError::io(format!("cannot load dataset {}", path.display()), e))
}

fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("model not found: {}", path.display())));
    }
    model::load(path).map_err(|e| CliError::io(format!("cannot load model {}", path.display()), e))
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    if cfg.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    cfg.sim
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    data::split_sizes(cfg.samples, cfg.split).map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = data::build_dataset(&cfg.sim, cfg.samples, cfg.split, cfg.seed)?;
    prepare_out(out, cfg, "generate")?;
    let path = out.join(DATASET_FILE);
    data::write_dataset(&ds, &path)
        .map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))?;
    Ok(format!(
        "wrote {} ({} samples: {} train, {} val, {} test; N={}, {} frames)",
        path.display(),
        ds.samples.len(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        ds.particles(),
        ds.frames()
    ))
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let ds = load_dataset(required(&cfg.data_path, "dataset", "--data")?)?;
    let mut mc = cfg.model.clone();
    mc.feature_dim = 1;
    mc.types = ds.sim.types;
    mc.attr_dim = 1;
    mc.frame_dt = ds.sim.frame_dt();
    mc.validate()?;
    cfg.train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if mc.horizon > ds.frames() {
        return Err(CliError::Io(format!(
            "horizon {} exceeds the {} frames stored in the dataset",
            mc.horizon,
            ds.frames()
        )));
    }
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let train = ds.split(Split::Train, mc.horizon);
    let val = ds.split(Split::Val, mc.horizon);

    let mut resolved = cfg.clone();
    resolved.model = mc.clone();
    resolved.sim = ds.sim.clone();
    prepare_out(out, &resolved, "train")?;

    let init = ModelParams::new(mc, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let outcome = model::train(&train, &val, init, &tc).map_err(|e| match e {
        model::ModelError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        other => other.into(),
    })?;
    let model_path = out.join(MODEL_FILE);
    model::save(&outcome.params, &model_path)
        .map_err(|e| CliError::io(format!("cannot write {}", model_path.display()), e))?;
    write_text(&out.join(LOSS_FILE), &outcome.curve_csv())?;
    Ok(format!(
        "trained {} epochs on {} samples; best epoch {} with validation A-MSE {:e}; wrote {}",
        outcome.curve.len(),
        train.len(),
        outcome.best_epoch,
        outcome.best_val,
        model_path.display()
    ))
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split {other:?}"))),
    }
}

/// Model and baseline reports over a dataset split.
pub struct Evaluation {
    pub model: EvalReport,
    pub linear: EvalReport,
    pub samples: usize,
    pub horizon: usize,
}

/// Predictions run on one thread so the tracked peak allocation covers the
/// whole forward pass.
fn timed_reports(
    samples: &[model::Sample],
    predict: impl Fn(&model::Sample) -> Result<Trajectory, CliError> + Sync,
) -> Result<EvalReport, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::Numeric(format!("thread pool: {e}")))?;
    pool.install(|| {
        let base = memory::live_bytes();
        memory::reset_peak();
        let start = Instant::now();
        let mut pairs = Vec::with_capacity(samples.len());
        for s in samples {
            pairs.push((predict(s)?, s.target.clone()));
        }
        let wall = start.elapsed().as_secs_f64();
        let peak = memory::peak_bytes().saturating_sub(base);
        let mut report = EvalReport::from_pairs(&pairs)?;
        report.wall_time_s = wall;
        report.peak_bytes = peak;
        Ok(report)
    })
}

pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    split: Split,
    horizon: usize,
) -> Result<Evaluation, CliError> {
    if horizon != params.config.horizon {
        return Err(CliError::Io(format!(
            "requested horizon {horizon} does not match the model's horizon {}",
            params.config.horizon
        )));
    }
    if horizon > ds.frames() {
        return Err(CliError::Io(format!(
            "horizon {horizon} exceeds the {} frames stored in the dataset",
            ds.frames()
        )));
    }
    let samples = ds.split(split, horizon);
    if samples.is_empty() {
        return Err(CliError::Io("the selected split has no samples".into()));
    }
    let dt = ds.sim.frame_dt();
    let model = timed_reports(&samples, |s| Ok(model::predict(&s.state, params, horizon)?))?;
    let linear = timed_reports(&samples, |s| {
        Ok(data::linear_baseline(&s.state, horizon, dt))
    })?;
    Ok(Evaluation {
        model,
        linear,
        samples: samples.len(),
        horizon,
    })
}

/// `step,mse,linear_mse`; S2S keeps only the final step.
pub fn eval_csv(e: &Evaluation, task: Task) -> String {
    let mut s = String::from("step,mse,linear_mse\n");
    let first = match task {
        Task::S2s => e.horizon - 1,
        Task::S2t => 0,
    };
    for t in first..e.horizon {
        writeln!(
            s,
            "{},{:.17e},{:.17e}",
            t + 1,
            e.model.per_step[t],
            e.linear.per_step[t]
        )
        .expect("string write");
    }
    s
}

/// `metric,model,linear`; S2S omits A-MSE.
pub fn metrics_csv(e: &Evaluation, task: Task) -> String {
    let mut s = String::from("metric,model,linear\n");
    writeln!(s, "f_mse,{:.17e},{:.17e}", e.model.f_mse, e.linear.f_mse).expect("string write");
    if task == Task::S2t {
        writeln!(s, "a_mse,{:.17e},{:.17e}", e.model.a_mse, e.linear.a_mse).expect("string write");
    }
    writeln!(
        s,
        "wall_time_s,{:.6e},{:.6e}",
        e.model.wall_time_s, e.linear.wall_time_s
    )
    .expect("string write");
    writeln!(
        s,
        "peak_bytes,{},{}",
        e.model.peak_bytes, e.linear.peak_bytes
    )
    .expect("string write");
    s
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let params = load_model(required(&cfg.model_path, "model", "--model")?)?;
    let ds = load_dataset(required(&cfg.data_path, "dataset", "--data")?)?;
    let split = parse_split(&cfg.eval_split)?;
    let horizon = cfg.eval_horizon.unwrap_or(params.config.horizon);
    let e = evaluate(&params, &ds, split, horizon)?;
    prepare_out(out, cfg, "eval")?;
    write_text(&out.join(EVAL_FILE), &eval_csv(&e, cfg.task))?;
    write_text(&out.join(METRICS_FILE), &metrics_csv(&e, cfg.task))?;
    let mut msg = format!(
        "task={} split={} samples={} horizon={}\n",
        cfg.task, cfg.eval_split, e.samples, horizon
    );
    for (name, r) in [("model", &e.model), ("linear", &e.linear)] {
        match cfg.task {
            Task::S2s => writeln!(msg, "{name}: F-MSE={:e}", r.f_mse),
            Task::S2t => writeln!(msg, "{name}: F-MSE={:e} A-MSE={:e}", r.f_mse, r.a_mse),
        }
        .expect("string write");
    }
    write!(
        msg,
        "model wall time {:.3} s, peak tensor memory {} bytes",
        e.model.wall_time_s, e.model.peak_bytes
    )
    .expect("string write");
    Ok(msg)
}

/// Runs the property suites. Summary lines are returned even on failure.
pub fn verify(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let suite: Suite = cfg.suite.parse()?;
    let checks = verify::run_suite(
        suite,
        VerifyOptions {
            trials: cfg.trials,
            tolerance: cfg.tolerance,
            seed: cfg.seed,
        },
    )?;
    prepare_out(out, cfg, "verify")?;
    let mut csv = String::from("check,metric,worst,tolerance,trials,status\n");
    for c in &checks {
        writeln!(
            csv,
            "{},{},{:e},{:e},{},{}",
            c.name,
            c.metric,
            c.worst,
            c.tolerance,
            c.trials,
            if c.passed() { "PASS" } else { "FAIL" }
        )
        .expect("string write");
    }
    write_text(&out.join(VERIFY_FILE), &csv)?;
    let lines: Vec<String> = checks.iter().map(|c| c.summary()).collect();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| {
            format!(
                "{} worst {}={:e} (tolerance {:e})",
                c.name, c.metric, c.worst, c.tolerance
            )
        })
        .collect();
    println!("{}", lines.join("\n"));
    if failed.is_empty() {
        Ok(String::new())
    } else {
        Err(CliError::Property(failed))
    }
}

pub fn scale(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let t_max = cfg.scale_horizons.iter().copied().max().unwrap_or(0);
    if cfg.scale_particles.is_empty()
        || t_max == 0
        || cfg.scale_particles.contains(&0)
        || cfg.scale_horizons.contains(&0)
    {
        return Err(CliError::Usage(
            "scaling grid needs positive particle counts and horizons".into(),
        ));
    }
    let params = match &cfg.model_path {
        Some(p) => {
            let params = load_model(p)?;
            if !params.config.tie_steps && t_max > params.config.horizon {
                return Err(CliError::Io(format!(
                    "horizon {t_max} exceeds the model's {} untied steps",
                    params.config.horizon
                )));
            }
            params
        }
        None => {
            let mut mc = cfg.model.clone();
            mc.horizon = mc.horizon.max(t_max);
            ModelParams::new(mc, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?
        }
    };
    let rows = metrics::scaling_probe(
        &params,
        &cfg.scale_particles,
        &cfg.scale_horizons,
        cfg.scale_repeats,
        cfg.seed,
    )?;
    prepare_out(out, cfg, "scale")?;
    let csv = metrics::scaling_csv(&rows);
    write_text(&out.join(SCALING_FILE), &csv)?;
    Ok(csv.trim_end().to_string())
}

//! Synthetic spring + Coulomb trajectories, dataset splits, the text
//! trajectory format, and the inertial baseline.
//!
//! Springs act along a fixed random graph that is handed to the model.
//! Softened Coulomb repulsion acts between every pair and never appears in
//! the observed graph, so a model restricted to observed edges cannot
//! account for it.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::attention::ParticleTypes;
use crate::decoder::ObservedGraph;
use crate::model::{Sample, SystemState, Trajectory};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "PAINET-DATA";
pub const FORMAT_VERSION: u32 = 1;

/// Positions beyond this norm count as a blow-up.
pub const BLOWUP_NORM: f64 = 1e6;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("integration blew up at step {step} (|x| = {norm:e}); try a smaller dt_sim")]
    Unstable { step: usize, norm: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("bad value {value:?} for {key}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub particles: usize,
    pub types: usize,
    /// Charge of each particle type.
    pub charges: Vec<f64>,
    pub mass: f64,
    pub spring_k: f64,
    pub rest_length: f64,
    pub coulomb_c: f64,
    /// Softening length as a fraction of the rest length.
    pub softening: f64,
    /// Springs beyond the random spanning tree.
    pub extra_edges: usize,
    pub dt_sim: f64,
    pub stride: usize,
    pub frames: usize,
    /// Relative jitter of initial spring lengths.
    pub jitter: f64,
    /// Standard deviation of initial velocity components.
    pub speed: f64,
    /// Fixes topology and particle types.
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            particles: 10,
            types: 2,
            charges: vec![1.0, 2.0],
            mass: 1.0,
            spring_k: 10.0,
            rest_length: 1.0,
            coulomb_c: 1.0,
            softening: 0.1,
            extra_edges: 3,
            dt_sim: 0.001,
            stride: 100,
            frames: 10,
            jitter: 0.3,
            speed: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub const KEYS: &'static [&'static str] = &[
        "particles",
        "types",
        "charges",
        "mass",
        "spring_k",
        "rest_length",
        "coulomb_c",
        "softening",
        "extra_edges",
        "dt_sim",
        "stride",
        "frames",
        "jitter",
        "speed",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "particles" => self.particles = parse(key, value)?,
            "types" => self.types = parse(key, value)?,
            "charges" => {
                self.charges = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "mass" => self.mass = parse(key, value)?,
            "spring_k" => self.spring_k = parse(key, value)?,
            "rest_length" => self.rest_length = parse(key, value)?,
            "coulomb_c" => self.coulomb_c = parse(key, value)?,
            "softening" => self.softening = parse(key, value)?,
            "extra_edges" => self.extra_edges = parse(key, value)?,
            "dt_sim" => self.dt_sim = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "jitter" => self.jitter = parse(key, value)?,
            "speed" => self.speed = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(format!("unknown sim key {key:?}")),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let charges: Vec<String> = self.charges.iter().map(f64::to_string).collect();
        let values = [
            self.particles.to_string(),
            self.types.to_string(),
            charges.join(","),
            self.mass.to_string(),
            self.spring_k.to_string(),
            self.rest_length.to_string(),
            self.coulomb_c.to_string(),
            self.softening.to_string(),
            self.extra_edges.to_string(),
            self.dt_sim.to_string(),
            self.stride.to_string(),
            self.frames.to_string(),
            self.jitter.to_string(),
            self.speed.to_string(),
            self.seed.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::Config(m.to_string()));
        if self.particles == 0 {
            return fail("need at least one particle");
        }
        if self.types == 0 || self.charges.len() != self.types {
            return fail("charges must list one value per type");
        }
        if !(self.dt_sim > 0.0) {
            return fail("dt_sim must be positive");
        }
        if self.stride == 0 || self.frames == 0 {
            return fail("stride and frames must be at least 1");
        }
        if !(self.spring_k >= 0.0) || !(self.coulomb_c >= 0.0) {
            return fail("spring_k and coulomb_c must be non-negative");
        }
        if !(self.mass > 0.0) || !(self.rest_length > 0.0) {
            return fail("mass and rest_length must be positive");
        }
        if !(self.softening >= 0.0) || !(self.jitter >= 0.0) || !(self.speed >= 0.0) {
            return fail("softening, jitter, and speed must be non-negative");
        }
        Ok(())
    }

    /// Time between stored frames.
    pub fn frame_dt(&self) -> f64 {
        self.stride as f64 * self.dt_sim
    }
}

/// Forces acting on a set of point masses.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceField {
    pub springs: Vec<(usize, usize)>,
    pub spring_k: f64,
    pub rest_length: f64,
    pub charges: Vec<f64>,
    pub coulomb_c: f64,
    pub softening: f64,
    pub mass: f64,
}

impl ForceField {
    /// Accelerations, written into `out` (`N×3`, row-major).
    fn accelerations(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|a| *a = 0.0);
        let n = x.len() / 3;
        let rel = |i: usize, j: usize| {
            [
                x[3 * i] - x[3 * j],
                x[3 * i + 1] - x[3 * j + 1],
                x[3 * i + 2] - x[3 * j + 2],
            ]
        };
        for &(i, j) in &self.springs {
            let r = rel(i, j);
            let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if len == 0.0 {
                continue;
            }
            let s = -self.spring_k * (len - self.rest_length) / len;
            for c in 0..3 {
                out[3 * i + c] += s * r[c];
                out[3 * j + c] -= s * r[c];
            }
        }
        if self.coulomb_c != 0.0 {
            let eps2 = self.softening * self.softening;
            for i in 0..n {
                for j in i + 1..n {
                    let r = rel(i, j);
                    let d2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + eps2;
                    let s = self.coulomb_c * self.charges[i] * self.charges[j] / (d2 * d2.sqrt());
                    for c in 0..3 {
                        out[3 * i + c] += s * r[c];
                        out[3 * j + c] -= s * r[c];
                    }
                }
            }
        }
        let inv_m = 1.0 / self.mass;
        out.iter_mut().for_each(|a| *a *= inv_m);
    }

    /// Kinetic plus spring plus softened Coulomb energy.
    pub fn energy(&self, x: &Tensor, v: &Tensor) -> f64 {
        let kinetic = 0.5 * self.mass * v.sq_norm();
        let dist =
            |i: usize, j: usize| -> f64 { (0..3).map(|c| (x.at(i, c) - x.at(j, c)).powi(2)).sum() };
        let spring: f64 = self
            .springs
            .iter()
            .map(|&(i, j)| 0.5 * self.spring_k * (dist(i, j).sqrt() - self.rest_length).powi(2))
            .sum();
        let n = x.rows();
        let mut coulomb = 0.0;
        if self.coulomb_c != 0.0 {
            for i in 0..n {
                for j in i + 1..n {
                    coulomb += self.coulomb_c * self.charges[i] * self.charges[j]
                        / (dist(i, j) + self.softening.powi(2)).sqrt();
                }
            }
        }
        kinetic + spring + coulomb
    }
}

/// Positions and velocities at every stored frame, excluding `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub positions: Vec<Tensor>,
    pub velocities: Vec<Tensor>,
}

/// Velocity Verlet from `(x0, v0)`, storing every `stride`-th step.
pub fn integrate(
    field: &ForceField,
    x0: &Tensor,
    v0: &Tensor,
    dt: f64,
    stride: usize,
    frames: usize,
) -> Result<RawTrajectory, DataError> {
    let mut x = x0.data().to_vec();
    let mut v = v0.data().to_vec();
    let n = x0.rows();
    let mut a = vec![0.0; x.len()];
    let mut a_next = vec![0.0; x.len()];
    field.accelerations(&x, &mut a);
    let mut out = RawTrajectory {
        positions: Vec::with_capacity(frames),
        velocities: Vec::with_capacity(frames),
    };
    for step in 1..=frames * stride {
        for k in 0..x.len() {
            x[k] += dt * v[k] + 0.5 * dt * dt * a[k];
        }
        field.accelerations(&x, &mut a_next);
        for k in 0..x.len() {
            v[k] += 0.5 * dt * (a[k] + a_next[k]);
        }
        std::mem::swap(&mut a, &mut a_next);
        if step % stride == 0 {
            let norm = x
                .chunks(3)
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0, f64::max);
            if !(norm <= BLOWUP_NORM) {
                return Err(DataError::Unstable { step, norm });
            }
            out.positions
                .push(Tensor::new(&[n, 3], x.clone()).expect("shape"));
            out.velocities
                .push(Tensor::new(&[n, 3], v.clone()).expect("shape"));
        }
    }
    Ok(out)
}

/// Spring topology and particle types shared by every sample of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub types: Vec<usize>,
    /// Spanning-tree springs `(child, parent)` first, then extra springs.
    pub springs: Vec<(usize, usize)>,
}

impl Topology {
    pub fn generate(cfg: &SimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = cfg.particles;
        let types = (0..n).map(|_| rng.random_range(0..cfg.types)).collect();
        let mut springs: Vec<(usize, usize)> =
            (1..n).map(|i| (i, rng.random_range(0..i))).collect();
        let possible = n * n.saturating_sub(1) / 2;
        let wanted = (springs.len() + cfg.extra_edges).min(possible);
        while springs.len() < wanted {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j
                && !springs
                    .iter()
                    .any(|&(a, b)| (a, b) == (i, j) || (a, b) == (j, i))
            {
                springs.push((i, j));
            }
        }
        Self { types, springs }
    }

    pub fn field(&self, cfg: &SimConfig) -> ForceField {
        ForceField {
            springs: self.springs.clone(),
            spring_k: cfg.spring_k,
            rest_length: cfg.rest_length,
            charges: self.types.iter().map(|&t| cfg.charges[t]).collect(),
            coulomb_c: cfg.coulomb_c,
            softening: cfg.softening * cfg.rest_length,
            mass: cfg.mass,
        }
    }

    /// The observed graph: spring edges in both directions, attribute `1`.
    pub fn graph(&self) -> ObservedGraph {
        ObservedGraph::undirected(self.types.len(), &self.springs)
            .expect("springs reference valid particles")
    }

    fn state(&self, cfg: &SimConfig, x0: Tensor, v0: Tensor) -> SystemState {
        let charges = self.types.iter().map(|&t| cfg.charges[t]).collect();
        SystemState {
            positions: x0,
            velocities: v0,
            features: Tensor::new(&[self.types.len(), 1], charges).expect("shape"),
            types: ParticleTypes::new(self.types.clone(), cfg.types)
                .expect("labels below type count"),
            graph: self.graph(),
        }
    }

    /// Tree springs near rest length with random directions; velocities
    /// Gaussian with zero mean. Retries layouts with near-overlapping
    /// particles.
    fn initial_conditions(&self, cfg: &SimConfig, rng: &mut impl Rng) -> (Tensor, Tensor) {
        let n = self.types.len();
        let tree = n.saturating_sub(1);
        let mut x = Tensor::zeros(&[n, 3]);
        for _attempt in 0..100 {
            for &(child, parent) in &self.springs[..tree] {
                let dir = unit_vector(rng);
                let len = cfg.rest_length * (1.0 + cfg.jitter * rng.random_range(-1.0..1.0));
                for c in 0..3 {
                    let p = x.at(parent, c);
                    x.set(child, c, p + len * dir[c]);
                }
            }
            if min_distance(&x) >= 0.3 * cfg.rest_length {
                break;
            }
        }
        let mut v = Tensor::new(
            &[n, 3],
            (0..3 * n)
                .map(|_| cfg.speed * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
        .expect("shape");
        let mean = v.sum_cols().expect("matrix").scale(1.0 / n as f64);
        for i in 0..n {
            for c in 0..3 {
                let cur = v.at(i, c);
                v.set(i, c, cur - mean.at(0, c));
            }
        }
        let centroid = x.sum_cols().expect("matrix").scale(1.0 / n as f64);
        for i in 0..n {
            for c in 0..3 {
                let cur = x.at(i, c);
                x.set(i, c, cur - centroid.at(0, c));
            }
        }
        (x, v)
    }
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn min_distance(x: &Tensor) -> f64 {
    let n = x.rows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = (0..3).map(|c| (x.at(i, c) - x.at(j, c)).powi(2)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// One simulated sample with initial conditions drawn from `rng`.
pub fn simulate(
    cfg: &SimConfig,
    topology: &Topology,
    rng: &mut impl Rng,
) -> Result<Sample, DataError> {
    cfg.validate()?;
    let (x0, v0) = topology.initial_conditions(cfg, rng);
    let raw = integrate(
        &topology.field(cfg),
        &x0,
        &v0,
        cfg.dt_sim,
        cfg.stride,
        cfg.frames,
    )?;
    Ok(Sample {
        state: topology.state(cfg, x0, v0),
        target: Trajectory::new(raw.positions, cfg.frame_dt()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sim: SimConfig,
    /// Seed for initial conditions and the split shuffle.
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Samples of a split with targets cut to the first `horizon` frames.
    pub fn split(&self, split: Split, horizon: usize) -> Vec<Sample> {
        self.indices(split)
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                Sample {
                    state: s.state.clone(),
                    target: s.target.truncated(horizon),
                }
            })
            .collect()
    }

    pub fn frames(&self) -> usize {
        self.samples.first().map_or(0, |s| s.target.len())
    }

    pub fn particles(&self) -> usize {
        self.samples.first().map_or(0, |s| s.state.particles())
    }
}

/// Split sizes for `n` samples; rounding leftovers go to the test split.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize), DataError> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let train = ((n as f64) * a).round() as usize;
    let val = (((n as f64) * b).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    Ok((train, val, n - train - val))
}

/// `n_samples` independent simulations sharing one topology, split by a
/// seeded shuffle.
pub fn build_dataset(
    cfg: &SimConfig,
    n_samples: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Dataset, DataError> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(DataError::Config("need at least one sample".into()));
    }
    let (n_train, n_val, _) = split_sizes(n_samples, ratios)?;
    let topology = Topology::generate(cfg);
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            simulate(cfg, &topology, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Dataset {
        sim: cfg.clone(),
        seed,
        samples,
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

/// Inertial extrapolation `x⁽⁰⁾ + v⁽⁰⁾·t·dt` for `t = 1..=horizon`.
pub fn linear_baseline(s: &SystemState, horizon: usize, dt: f64) -> Trajectory {
    let frames = (1..=horizon)
        .map(|t| {
            s.positions
                .add(&s.velocities.scale(t as f64 * dt))
                .expect("N×3 positions and velocities")
        })
        .collect();
    Trajectory::new(frames, dt)
}

fn push_floats(line: &mut String, values: &[f64]) {
    for v in values {
        write!(line, " {v:.16e}").expect("string write");
    }
}

/// Serializes a dataset to the line-oriented text format.
pub fn format_dataset(d: &Dataset) -> String {
    let first = d.samples.first();
    let mut out = format!(
        "{FORMAT_TAG} {FORMAT_VERSION} samples={} particles={} frames={} features={} types={} attr_dim={} dt={} seed={}",
        d.samples.len(),
        d.particles(),
        d.frames(),
        first.map_or(0, |s| s.state.features.cols()),
        first.map_or(d.sim.types, |s| s.state.types.count()),
        first.map_or(0, |s| s.state.graph.attr_dim()),
        first.map_or(d.sim.frame_dt(), |s| s.target.dt),
        d.seed
    );
    for (k, v) in d.sim.entries() {
        write!(out, " sim.{k}={v}").expect("string write");
    }
    out.push('\n');
    for (idx, s) in d.samples.iter().enumerate() {
        let st = &s.state;
        out.push_str(&format!("sample {idx}\n"));
        let labels: Vec<String> = st.types.labels().iter().map(usize::to_string).collect();
        out.push_str(&format!("types {}\n", labels.join(" ")));
        let mut line = String::from("features");
        push_floats(&mut line, st.features.data());
        out.push_str(&line);
        out.push('\n');
        let mut line = format!("edges {}", st.graph.edges().len());
        for (k, &(i, j)) in st.graph.edges().iter().enumerate() {
            write!(line, " {i} {j}").expect("string write");
            push_floats(&mut line, st.graph.edge_attrs().row(k));
        }
        out.push_str(&line);
        out.push('\n');
        for (tag, t) in [("x0", &st.positions), ("v0", &st.velocities)] {
            let mut line = String::from(tag);
            push_floats(&mut line, t.data());
            out.push_str(&line);
            out.push('\n');
        }
        for (t, f) in s.target.frames.iter().enumerate() {
            let mut line = format!("frame {}", t + 1);
            push_floats(&mut line, f.data());
            out.push_str(&line);
            out.push('\n');
        }
    }
    for (tag, idx) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
        let ids: Vec<String> = idx.iter().map(usize::to_string).collect();
        let sep = if ids.is_empty() { "" } else { " " };
        out.push_str(&format!("split {tag}{sep}{}\n", ids.join(" ")));
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, line: usize, message: impl Into<String>) -> DataError {
        DataError::Parse {
            line,
            message: message.into(),
        }
    }

    /// Next non-blank line, split into tag and remaining fields.
    fn next(&mut self, tag: &str) -> Result<(usize, Vec<&'a str>), DataError> {
        for (i, raw) in self.inner.by_ref() {
            self.last = i + 1;
            let mut fields = raw.split_whitespace();
            let Some(first) = fields.next() else { continue };
            if first != tag {
                return Err(self.err(i + 1, format!("expected {tag:?} record, found {first:?}")));
            }
            return Ok((i + 1, fields.collect()));
        }
        Err(self.err(
            self.last + 1,
            format!("unexpected end of file, expected {tag:?} record"),
        ))
    }
}

fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, DataError> {
    s.parse().map_err(|_| DataError::Parse {
        line,
        message: format!("cannot parse {s:?} as a number"),
    })
}

fn floats(line: usize, fields: &[&str], count: usize, what: &str) -> Result<Vec<f64>, DataError> {
    if fields.len() != count {
        return Err(DataError::Parse {
            line,
            message: format!("{what}: expected {count} values, found {}", fields.len()),
        });
    }
    fields.iter().map(|f| num(line, f)).collect()
}

/// Parses the text format produced by [`format_dataset`].
pub fn parse_dataset(text: &str) -> Result<Dataset, DataError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let header = loop {
        match lines.inner.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => break (i + 1, l),
            None => return Err(lines.err(1, "missing header")),
        }
    };
    let (hl, header) = header;
    lines.last = hl;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(FORMAT_TAG) {
        return Err(lines.err(hl, "missing header"));
    }
    let version: u32 = num(hl, fields.next().unwrap_or(""))?;
    if version != FORMAT_VERSION {
        return Err(lines.err(hl, format!("unsupported format version {version}")));
    }
    let mut sim = SimConfig::default();
    let (mut samples, mut n, mut frames, mut features, mut types, mut attr_dim, mut dt, mut seed) =
        (None, None, None, None, None, None, None, 0u64);
    for kv in fields {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| lines.err(hl, format!("header field {kv:?} is not key=value")))?;
        match k {
            "samples" => samples = Some(num::<usize>(hl, v)?),
            "particles" => n = Some(num::<usize>(hl, v)?),
            "frames" => frames = Some(num::<usize>(hl, v)?),
            "features" => features = Some(num::<usize>(hl, v)?),
            "types" => types = Some(num::<usize>(hl, v)?),
            "attr_dim" => attr_dim = Some(num::<usize>(hl, v)?),
            "dt" => dt = Some(num::<f64>(hl, v)?),
            "seed" => seed = num(hl, v)?,
            _ => match k.strip_prefix("sim.") {
                Some(key) => sim.set(key, v).map_err(|m| lines.err(hl, m))?,
                None => return Err(lines.err(hl, format!("unknown header key {k:?}"))),
            },
        }
    }
    let need = |v: Option<usize>, k: &str| {
        v.ok_or_else(|| DataError::Parse {
            line: hl,
            message: format!("header lacks {k}"),
        })
    };
    let (count, n, frames, features, types, attr_dim) = (
        need(samples, "samples")?,
        need(n, "particles")?,
        need(frames, "frames")?,
        need(features, "features")?,
        need(types, "types")?,
        need(attr_dim, "attr_dim")?,
    );
    let dt = dt.ok_or_else(|| lines.err(hl, "header lacks dt"))?;

    let mut out = Vec::with_capacity(count);
    for idx in 0..count {
        let (l, f) = lines.next("sample")?;
        if f.len() != 1 || num::<usize>(l, f[0])? != idx {
            return Err(lines.err(l, format!("expected sample {idx}")));
        }
        let (l, f) = lines.next("types")?;
        if f.len() != n {
            return Err(lines.err(l, format!("types: expected {n} labels, found {}", f.len())));
        }
        let labels = f
            .iter()
            .map(|s| num(l, s))
            .collect::<Result<Vec<usize>, _>>()?;
        let labels = ParticleTypes::new(labels, types).map_err(|e| lines.err(l, e.to_string()))?;
        let (l, f) = lines.next("features")?;
        let feats =
            Tensor::new(&[n, features], floats(l, &f, n * features, "features")?).expect("shape");
        let (l, f) = lines.next("edges")?;
        let m: usize = num(l, f.first().copied().unwrap_or(""))?;
        let per = 2 + attr_dim;
        if f.len() != 1 + m * per {
            return Err(lines.err(
                l,
                format!(
                    "edges: expected {} fields for {m} edges, found {}",
                    1 + m * per,
                    f.len()
                ),
            ));
        }
        let mut edges = Vec::with_capacity(m);
        let mut attrs = Vec::with_capacity(m * attr_dim);
        for e in f[1..].chunks(per) {
            edges.push((num(l, e[0])?, num(l, e[1])?));
            for a in &e[2..] {
                attrs.push(num(l, a)?);
            }
        }
        let graph =
            ObservedGraph::new(n, edges, Tensor::new(&[m, attr_dim], attrs).expect("shape"))
                .map_err(|e| lines.err(l, e.to_string()))?;
        let (l, f) = lines.next("x0")?;
        let x0 = Tensor::new(&[n, 3], floats(l, &f, 3 * n, "x0")?).expect("shape");
        let (l, f) = lines.next("v0")?;
        let v0 = Tensor::new(&[n, 3], floats(l, &f, 3 * n, "v0")?).expect("shape");
        let mut traj = Vec::with_capacity(frames);
        for t in 1..=frames {
            let (l, f) = lines.next("frame")?;
            if f.is_empty() || num::<usize>(l, f[0])? != t {
                return Err(lines.err(l, format!("expected frame {t}")));
            }
            traj.push(Tensor::new(&[n, 3], floats(l, &f[1..], 3 * n, "frame")?).expect("shape"));
        }
        out.push(Sample {
            state: SystemState {
                positions: x0,
                velocities: v0,
                features: feats,
                types: labels,
                graph,
            },
            target: Trajectory::new(traj, dt),
        });
    }
    let mut splits = Vec::with_capacity(3);
    for tag in ["train", "val", "test"] {
        let (l, f) = lines.next("split")?;
        if f.first() != Some(&tag) {
            return Err(lines.err(l, format!("expected split {tag}")));
        }
        let ids = f[1..]
            .iter()
            .map(|s| num(l, s))
            .collect::<Result<Vec<usize>, _>>()?;
        if let Some(bad) = ids.iter().find(|&&i| i >= count) {
            return Err(lines.err(l, format!("split index {bad} out of range")));
        }
        splits.push(ids);
    }
    let mut seen = vec![false; count];
    for &i in splits.iter().flatten() {
        if std::mem::replace(&mut seen[i], true) {
            return Err(lines.err(
                lines.last,
                format!("sample {i} appears in more than one split"),
            ));
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(lines.err(lines.last, format!("sample {i} is in no split")));
    }
    for (i, raw) in lines.inner {
        if !raw.trim().is_empty() {
            return Err(DataError::Parse {
                line: i + 1,
                message: "unexpected content after splits".into(),
            });
        }
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        sim,
        seed,
        samples: out,
        train,
        val,
        test,
    })
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, format_dataset(d))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

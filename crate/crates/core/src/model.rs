//! End-to-end model: invariant input encoder, attention unroll, parallel
//! decode, trajectory loss, training loop, and the model file format.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{
    self, AttentionError, AttentionLayerParams, PairwiseMaps, ParticleTypes, UnrollOptions,
};
use crate::decoder::{self, Aggregation, EGNNLayerParams, GraphError, ObservedGraph};
use crate::nn::Mlp;
use crate::tensor::{rowwise_l2_normalize, Tape, Tensor, TensorError, Var, EPS};

pub const MAGIC: &[u8; 4] = b"PAIN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid system state: {0}")]
    State(String),
    #[error("trajectory shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}; try a lower learning rate (current {lr:e})")]
    NonFinite { epoch: usize, lr: f64 },
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture and recorded training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub types: usize,
    pub attr_dim: usize,
    /// Embedding width `d`.
    pub hidden: usize,
    /// Width of the hidden layer inside every MLP.
    pub mlp_hidden: usize,
    /// Decoder depth `L`.
    pub layers: usize,
    /// Prediction horizon `T`.
    pub horizon: usize,
    pub eta: f64,
    pub num_heads: usize,
    pub tie_steps: bool,
    pub aggregation: Aggregation,
    /// Feed raw positions and velocities to the encoder. Breaks invariance.
    pub literal_encoder: bool,
    pub unclamped_maps: bool,
    /// When false, every step reuses the initial embeddings.
    pub attention: bool,
    pub frame_dt: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 1,
            types: 2,
            attr_dim: 1,
            hidden: 16,
            mlp_hidden: 32,
            layers: 3,
            horizon: 5,
            eta: 0.5,
            num_heads: 1,
            tie_steps: false,
            aggregation: Aggregation::Sum,
            literal_encoder: false,
            unclamped_maps: false,
            attention: true,
            frame_dt: 0.1,
            learning_rate: 5e-4,
            weight_decay: 1e-15,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("bad value {value:?} for {key}"))
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "feature_dim",
        "types",
        "attr_dim",
        "hidden",
        "mlp_hidden",
        "layers",
        "horizon",
        "eta",
        "num_heads",
        "tie_steps",
        "aggregation",
        "literal_encoder",
        "unclamped_maps",
        "attention",
        "frame_dt",
        "learning_rate",
        "weight_decay",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "types" => self.types = parse(key, value)?,
            "attr_dim" => self.attr_dim = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "tie_steps" => self.tie_steps = parse(key, value)?,
            "aggregation" => self.aggregation = value.parse()?,
            "literal_encoder" => self.literal_encoder = parse(key, value)?,
            "unclamped_maps" => self.unclamped_maps = parse(key, value)?,
            "attention" => self.attention = parse(key, value)?,
            "frame_dt" => self.frame_dt = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            _ => return Err(format!("unknown model key {key:?}")),
        }
        Ok(())
    }

    /// `(key, value)` pairs in [`Self::KEYS`] order. Floats use the
    /// shortest representation that parses back to the same bits.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.feature_dim.to_string(),
            self.types.to_string(),
            self.attr_dim.to_string(),
            self.hidden.to_string(),
            self.mlp_hidden.to_string(),
            self.layers.to_string(),
            self.horizon.to_string(),
            self.eta.to_string(),
            self.num_heads.to_string(),
            self.tie_steps.to_string(),
            self.aggregation.to_string(),
            self.literal_encoder.to_string(),
            self.unclamped_maps.to_string(),
            self.attention.to_string(),
            self.frame_dt.to_string(),
            self.learning_rate.to_string(),
            self.weight_decay.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.hidden == 0 || self.mlp_hidden == 0 {
            return fail("hidden widths must be positive");
        }
        if self.layers == 0 {
            return fail("decoder needs at least one layer");
        }
        if self.horizon == 0 {
            return fail("horizon must be at least 1");
        }
        if self.types == 0 {
            return fail("at least one particle type is required");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return fail("eta must lie in (0, 1)");
        }
        if self.num_heads == 0 || !self.hidden.is_multiple_of(self.num_heads) {
            return fail("num_heads must divide hidden");
        }
        if !(self.frame_dt > 0.0) {
            return fail("frame_dt must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning rate and weight decay must be non-negative");
        }
        Ok(())
    }

    fn encoder_inputs(&self) -> usize {
        self.feature_dim + if self.literal_encoder { 6 } else { 2 }
    }

    fn attention_layers(&self) -> usize {
        if self.tie_steps {
            1
        } else {
            self.horizon
        }
    }
}

/// Initial condition and static structure of one system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub positions: Tensor,
    pub velocities: Tensor,
    pub features: Tensor,
    pub types: ParticleTypes,
    pub graph: ObservedGraph,
}

impl SystemState {
    pub fn particles(&self) -> usize {
        self.positions.rows()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.positions.rows();
        let bad = |m: String| Err(ModelError::State(m));
        if self.positions.shape() != [n, 3] || self.velocities.shape() != [n, 3] {
            return bad(format!(
                "positions {:?} and velocities {:?} must both be N×3",
                self.positions.shape(),
                self.velocities.shape()
            ));
        }
        if self.features.rank() != 2 || self.features.rows() != n {
            return bad(format!(
                "features {:?} must have {n} rows",
                self.features.shape()
            ));
        }
        if self.types.len() != n || self.graph.particles() != n {
            return bad(format!(
                "{n} particles but {} type labels and a {}-node graph",
                self.types.len(),
                self.graph.particles()
            ));
        }
        if !(self.positions.is_finite() && self.velocities.is_finite() && self.features.is_finite())
        {
            return bad("non-finite entries".into());
        }
        Ok(())
    }
}

/// Positions at `start_time + (t + 1)·dt` for `t = 0..frames.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Tensor>,
    pub dt: f64,
    pub start_time: f64,
}

impl Trajectory {
    pub fn new(frames: Vec<Tensor>, dt: f64) -> Self {
        Self {
            frames,
            dt,
            start_time: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// First `t` frames.
    pub fn truncated(&self, t: usize) -> Self {
        Self {
            frames: self.frames[..t.min(self.frames.len())].to_vec(),
            dt: self.dt,
            start_time: self.start_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: SystemState,
    pub target: Trajectory,
}

/// Every learnable tensor plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Mlp,
    pub attention: Vec<AttentionLayerParams>,
    pub maps: PairwiseMaps,
    pub decoder: Vec<EGNNLayerParams>,
}

impl ModelParams {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.hidden;
        let encoder = Mlp::new(&[config.encoder_inputs(), config.mlp_hidden, d], false, rng);
        let attention = (0..config.attention_layers())
            .map(|_| AttentionLayerParams::random(d, config.eta, rng))
            .collect();
        let mut maps = PairwiseMaps::new(config.types);
        maps.unclamped_maps = config.unclamped_maps;
        let decoder = decoder::new_stack(d, config.attr_dim, config.mlp_hidden, config.layers, rng);
        Ok(Self {
            config,
            encoder,
            attention,
            maps,
            decoder,
        })
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit("encoder", f);
        for (t, a) in self.attention.iter().enumerate() {
            a.visit(&format!("attention.{t}"), f);
        }
        self.maps.visit("maps", f);
        for (l, p) in self.decoder.iter().enumerate() {
            p.visit(&format!("decoder.{l}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut("encoder", f);
        for (t, a) in self.attention.iter_mut().enumerate() {
            a.visit_mut(&format!("attention.{t}"), f);
        }
        self.maps.visit_mut("maps", f);
        for (l, p) in self.decoder.iter_mut().enumerate() {
            p.visit_mut(&format!("decoder.{l}"), f);
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Adds uniform noise in `±scale` to every parameter. Used to leave the
    /// zero-initialized heads before symmetry and gradient checks.
    pub fn perturb(&mut self, rng: &mut impl Rng, scale: f64) {
        self.visit_mut(&mut |_, t| {
            for x in t.data_mut() {
                *x += rng.random_range(-scale..scale);
            }
        });
    }

    fn check_state(&self, s: &SystemState) -> Result<(), ModelError> {
        s.validate()?;
        let c = &self.config;
        if s.features.cols() != c.feature_dim
            || s.types.count() != c.types
            || s.graph.attr_dim() != c.attr_dim
        {
            return Err(ModelError::State(format!(
                "state has {} features, {} types, {} edge attributes; model expects {}, {}, {}",
                s.features.cols(),
                s.types.count(),
                s.graph.attr_dim(),
                c.feature_dim,
                c.types,
                c.attr_dim
            )));
        }
        Ok(())
    }

    fn check_horizon(&self, horizon: usize) -> Result<(), ModelError> {
        if horizon == 0 || (!self.config.tie_steps && horizon > self.attention.len()) {
            return Err(ModelError::Config(format!(
                "horizon {horizon} not supported by a model with {} untied steps",
                self.attention.len()
            )));
        }
        Ok(())
    }
}

/// Per-particle encoder inputs: `[F, ‖v‖, degree]`, or `[F, x, v]` for
/// the literal variant.
pub fn encoder_inputs(s: &SystemState, literal: bool) -> Result<Tensor, ModelError> {
    let n = s.particles();
    if literal {
        return Ok(Tensor::concat_cols(&[
            &s.features,
            &s.positions,
            &s.velocities,
        ])?);
    }
    let speed: Vec<f64> = (0..n)
        .map(|i| {
            s.velocities
                .row(i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let degree: Vec<f64> = s.graph.degrees().iter().map(|&k| k as f64).collect();
    let speed = Tensor::new(&[n, 1], speed)?;
    let degree = Tensor::new(&[n, 1], degree)?;
    Ok(Tensor::concat_cols(&[&s.features, &speed, &degree])?)
}

fn encode_on_tape(tape: &mut Tape, s: &SystemState, p: &ModelParams) -> Result<Var, ModelError> {
    let x = tape.leaf(encoder_inputs(s, p.config.literal_encoder)?);
    let h = p.encoder.forward(tape, x)?;
    Ok(tape.row_normalize(h, EPS)?)
}

/// Unit-norm initial embeddings `H⁽⁰⁾`.
pub fn encode_initial(s: &SystemState, p: &ModelParams) -> Result<Tensor, ModelError> {
    p.check_state(s)?;
    let h = p
        .encoder
        .eval(&encoder_inputs(s, p.config.literal_encoder)?)?;
    Ok(rowwise_l2_normalize(&h, EPS)?)
}

fn embeddings_on_tape(
    tape: &mut Tape,
    s: &SystemState,
    p: &ModelParams,
    horizon: usize,
) -> Result<Vec<Var>, ModelError> {
    let h0 = encode_on_tape(tape, s, p)?;
    if !p.config.attention {
        return Ok(vec![h0; horizon]);
    }
    let (phi, psi) = p.maps.forward(tape, &s.types)?;
    let opts = UnrollOptions {
        heads: p.config.num_heads,
        normalize: true,
    };
    Ok(attention::unroll(
        tape,
        h0,
        &p.attention,
        phi,
        psi,
        horizon,
        opts,
    )?)
}

/// `[H⁽¹⁾, …, H⁽ᵀ⁾]`.
pub fn embeddings(
    s: &SystemState,
    p: &ModelParams,
    horizon: usize,
) -> Result<Vec<Tensor>, ModelError> {
    p.check_state(s)?;
    p.check_horizon(horizon)?;
    let mut tape = Tape::new();
    let seq = embeddings_on_tape(&mut tape, s, p, horizon)?;
    Ok(seq.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Records the full forward pass and returns the predicted frames.
pub fn forward(
    tape: &mut Tape,
    s: &SystemState,
    p: &ModelParams,
    horizon: usize,
) -> Result<Vec<Var>, ModelError> {
    p.check_state(s)?;
    p.check_horizon(horizon)?;
    let hs = embeddings_on_tape(tape, s, p, horizon)?;
    let x0 = tape.leaf(s.positions.clone());
    let v0 = tape.leaf(s.velocities.clone());
    Ok(decoder::decode_sequence(
        tape,
        &hs,
        x0,
        v0,
        &s.graph,
        &p.decoder,
        p.config.aggregation,
    )?)
}

/// Predicts `horizon` frames; the decoder runs over time steps in parallel.
pub fn predict(s: &SystemState, p: &ModelParams, horizon: usize) -> Result<Trajectory, ModelError> {
    let hs = embeddings(s, p, horizon)?;
    let frames = decoder::decode_trajectory(
        &hs,
        &s.positions,
        &s.velocities,
        &s.graph,
        &p.decoder,
        p.config.aggregation,
    )?;
    Ok(Trajectory::new(frames, p.config.frame_dt))
}

fn check_pair(pred: &Trajectory, truth: &Trajectory) -> Result<(), ModelError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} predicted frames vs {} true frames",
            pred.len(),
            truth.len()
        )));
    }
    for (t, (a, b)) in pred.frames.iter().zip(&truth.frames).enumerate() {
        if a.shape() != b.shape() {
            return Err(ModelError::ShapeMismatch(format!(
                "frame {t}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

/// `Σ_t Σ_i ‖x̂_i⁽ᵗ⁾ − x_i⁽ᵗ⁾‖²`, unnormalized.
pub fn trajectory_loss(pred: &Trajectory, truth: &Trajectory) -> Result<f64, ModelError> {
    check_pair(pred, truth)?;
    let mut total = 0.0;
    for (a, b) in pred.frames.iter().zip(&truth.frames) {
        total += a.sub(b)?.sq_norm();
    }
    Ok(total)
}

fn loss_on_tape(tape: &mut Tape, frames: &[Var], truth: &Trajectory) -> Result<Var, ModelError> {
    if frames.len() != truth.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} predicted frames vs {} true frames",
            frames.len(),
            truth.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&f, target) in frames.iter().zip(&truth.frames) {
        let y = tape.leaf(target.clone());
        let diff = tape.sub(f, y)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum_all(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    total.ok_or(ModelError::ShapeMismatch("empty trajectory".into()))
}

/// Training loss of one sample and its gradient for every parameter, in
/// [`ModelParams::visit`] order.
pub fn loss_and_gradients(
    sample: &Sample,
    p: &ModelParams,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let mut tape = Tape::new();
    let frames = forward(&mut tape, &sample.state, p, sample.target.len())?;
    let loss = loss_on_tape(&mut tape, &frames, &sample.target)?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    p.visit(&mut |_, t| out.push(grads.param(&tape, t)));
    Ok((tape.value(loss).item(), out))
}

/// Training loss of one sample without gradients.
pub fn sample_loss(sample: &Sample, p: &ModelParams) -> Result<f64, ModelError> {
    let pred = predict(&sample.state, p, sample.target.len())?;
    trajectory_loss(&pred, &sample.target)
}

/// Mean over samples of `(1/TN) Σ_t Σ_i ‖x̂ − x‖²`.
pub fn mean_a_mse(samples: &[Sample], p: &ModelParams) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let per: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let loss = sample_loss(s, p)?;
            Ok(loss / (s.target.len() * s.state.particles()) as f64)
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Rescale the batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 5e-4,
            weight_decay: 1e-15,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 50,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "beta1",
        "beta2",
        "adam_eps",
        "patience",
        "clip_norm",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "clip_norm" => {
                self.clip_norm = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Err(format!("unknown train key {key:?}")),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            self.weight_decay.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.adam_eps.to_string(),
            self.patience.to_string(),
            self.clip_norm.map_or("none".to_string(), |c| c.to_string()),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning rate and weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return fail("adam moments need beta in [0, 1) and eps > 0");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return fail("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with bias correction and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &[Tensor], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let mut k = 0;
        params.visit_mut(&mut |_, theta| {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (((x, mi), vi), &gi) in theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gi = gi + cfg.weight_decay * *x;
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                *x -= cfg.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
            }
            k += 1;
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train: f64,
    /// Validation A-MSE after the epoch.
    pub val: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,train,val\n");
        for e in &self.curve {
            s.push_str(&format!("{},{:.17e},{:.17e}\n", e.epoch, e.train, e.val));
        }
        s
    }
}

/// Minibatch Adam on the summed trajectory loss with early stopping on
/// validation A-MSE. Per-sample gradients are computed in parallel and
/// reduced in sample order, so runs are reproducible. Returns the
/// parameters from the best validation epoch.
pub fn train(
    train: &[Sample],
    val: &[Sample],
    init: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let val = if val.is_empty() { train } else { val };
    let mut params = init;
    params.config.learning_rate = cfg.learning_rate;
    params.config.weight_decay = cfg.weight_decay;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = (params.clone(), 0usize, mean_a_mse(val, &params)?);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; train.len()];
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| loss_and_gradients(&train[i], &params))
                .collect::<Result<_, _>>()?;
            let mut grads: Vec<Tensor> = results[0]
                .1
                .iter()
                .map(|g| Tensor::zeros(g.shape()))
                .collect();
            for (&i, (loss, g)) in batch.iter().zip(&results) {
                if !loss.is_finite() {
                    return Err(ModelError::NonFinite {
                        epoch,
                        lr: cfg.learning_rate,
                    });
                }
                losses[i] = *loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.add_assign(gi)?;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g = g.scale(scale));
            if let Some(limit) = cfg.clip_norm {
                let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
                if norm > limit {
                    grads.iter_mut().for_each(|g| *g = g.scale(limit / norm));
                }
            }
            adam.update(&mut params, &grads, cfg);
        }
        let val_loss = mean_a_mse(val, &params)?;
        if !val_loss.is_finite() {
            return Err(ModelError::NonFinite {
                epoch,
                lr: cfg.learning_rate,
            });
        }
        curve.push(EpochLoss {
            epoch,
            train: losses.iter().sum::<f64>() / train.len() as f64,
            val: val_loss,
        });
        if val_loss < best.2 {
            best = (params.clone(), epoch, val_loss);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (params, best_epoch, best_val) = best;
    Ok(TrainOutcome {
        params,
        curve,
        best_epoch,
        best_val,
    })
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

/// Writes the model container: magic, version, hyperparameter block, then
/// `(name, rank, dims, little-endian f64 data)` per tensor.
pub fn write_model(w: &mut impl Write, p: &ModelParams) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    write_u32(w, FORMAT_VERSION)?;
    let mut header = String::new();
    for (k, v) in p.config.entries() {
        header.push_str(&format!("{k}={v}\n"));
    }
    write_u64(w, header.len() as u64)?;
    w.write_all(header.as_bytes())?;
    let tensors = p.tensors();
    write_u64(w, tensors.len() as u64)?;
    for (name, t) in tensors {
        write_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_u32(w, t.rank() as u32)?;
        for &dim in t.shape() {
            write_u64(w, dim as u64)?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, ModelError> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => {
                    ModelError::Corrupt(format!("truncated while reading {what}"))
                }
                _ => ModelError::Io(e),
            })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(
            self.bytes(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn len(&mut self, what: &str, limit: u64) -> Result<usize, ModelError> {
        let v = u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes"));
        if v > limit {
            return Err(ModelError::Corrupt(format!(
                "{what} = {v} is implausibly large"
            )));
        }
        Ok(v as usize)
    }
}

pub fn read_model(r: impl Read) -> Result<ModelParams, ModelError> {
    let mut r = Reader { inner: r };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(ModelError::Corrupt("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.len("header length", 1 << 20)?;
    let header = String::from_utf8(r.bytes(header_len, "header")?)
        .map_err(|_| ModelError::Corrupt("header is not UTF-8".into()))?;
    let mut config = ModelConfig::default();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Corrupt(format!("header line {line:?} has no '='")))?;
        config.set(k, v).map_err(ModelError::Corrupt)?;
    }
    let mut params = ModelParams::new(config, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| ModelError::Corrupt(e.to_string()))?;

    let count = r.len("tensor count", 1 << 20)?;
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.len("name length", 4096)?;
        let name = String::from_utf8(r.bytes(name_len, "tensor name")?)
            .map_err(|_| ModelError::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(ModelError::Corrupt(format!("{name}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.len("dimension", 1 << 32)?);
        }
        let numel: usize = dims.iter().product();
        let raw = r.bytes(numel * 8, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push((
            name,
            Tensor::new(&dims, data).map_err(|e| ModelError::Corrupt(e.to_string()))?,
        ));
    }
    if r.inner.read(&mut [0u8])? != 0 {
        return Err(ModelError::Corrupt(
            "trailing bytes after last tensor".into(),
        ));
    }

    let expected = params.tensors().len();
    if loaded.len() != expected {
        return Err(ModelError::Corrupt(format!(
            "{} tensors, expected {expected}",
            loaded.len()
        )));
    }
    let mut failure = None;
    let mut k = 0;
    params.visit_mut(&mut |name, slot| {
        let (got, t) = &loaded[k];
        k += 1;
        if failure.is_some() {
            return;
        }
        if *got != name || t.shape() != slot.shape() {
            failure = Some(format!(
                "expected {name} {:?}, found {got} {:?}",
                slot.shape(),
                t.shape()
            ));
        } else {
            *slot = t.clone();
        }
    });
    match failure {
        Some(msg) => Err(ModelError::Corrupt(msg)),
        None => Ok(params),
    }
}

pub fn save(p: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams, ModelError> {
    read_model(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize, rng: &mut ChaCha8Rng) -> SystemState {
        let rand = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            Tensor::new(
                shape,
                (0..shape.iter().product())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap()
        };
        let pairs: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        SystemState {
            positions: rand(rng, &[n, 3]),
            velocities: rand(rng, &[n, 3]),
            features: rand(rng, &[n, 1]),
            types: ParticleTypes::new((0..n).map(|i| i % 2).collect(), 2).unwrap(),
            graph: ObservedGraph::undirected(n, &pairs).unwrap(),
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            mlp_hidden: 8,
            layers: 2,
            horizon: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn untrained_model_predicts_initial_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = state(5, &mut rng);
        let p = ModelParams::new(small_config(), &mut rng).unwrap();
        let traj = predict(&s, &p, 2).unwrap();
        assert_eq!(traj.len(), 2);
        assert!(traj.frames.iter().all(|f| *f == s.positions));
    }

    #[test]
    fn loss_closed_forms() {
        let a = Trajectory::new(vec![Tensor::zeros(&[4, 3]); 3], 0.1);
        assert_eq!(trajectory_loss(&a, &a).unwrap(), 0.0);
        let b = Trajectory::new(vec![Tensor::full(&[4, 3], 0.5); 3], 0.1);
        assert_eq!(trajectory_loss(&b, &a).unwrap(), 3.0 * 4.0 * 3.0 * 0.25);

        let p = Trajectory::new(
            vec![
                Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap(),
                Tensor::from_rows(&[vec![0.0, 0.0, 3.0], vec![1.0, 1.0, 1.0]]).unwrap(),
            ],
            0.1,
        );
        let t = Trajectory::new(vec![Tensor::zeros(&[2, 3]); 2], 0.1);
        assert_eq!(trajectory_loss(&p, &t).unwrap(), 1.0 + 4.0 + 9.0 + 3.0);
        assert!(trajectory_loss(&p, &t.truncated(1)).is_err());
    }

    #[test]
    fn equal_invariant_inputs_give_equal_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = state(4, &mut rng);
        s.features = Tensor::zeros(&[4, 1]);
        s.velocities = Tensor::zeros(&[4, 3]);
        s.graph = ObservedGraph::undirected(4, &[(0, 1), (2, 3)]).unwrap();
        let p = ModelParams::new(small_config(), &mut rng).unwrap();
        let h = encode_initial(&s, &p).unwrap();
        for i in 1..4 {
            assert_eq!(h.row(i), h.row(0));
        }
        let norm: f64 = h.row(0).iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-14);
    }

    #[test]
    fn translation_leaves_embeddings_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = state(6, &mut rng);
        let p = ModelParams::new(small_config(), &mut rng).unwrap();
        let mut moved = s.clone();
        moved.positions = s.positions.map(|x| x + 17.25);
        assert_eq!(
            encode_initial(&s, &p).unwrap(),
            encode_initial(&moved, &p).unwrap()
        );
    }

    #[test]
    fn horizon_and_state_are_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = state(3, &mut rng);
        let p = ModelParams::new(small_config(), &mut rng).unwrap();
        assert!(matches!(predict(&s, &p, 3), Err(ModelError::Config(_))));
        let mut bad = s.clone();
        bad.features = Tensor::zeros(&[3, 2]);
        assert!(matches!(predict(&bad, &p, 1), Err(ModelError::State(_))));
        let tied = ModelParams::new(
            ModelConfig {
                tie_steps: true,
                ..small_config()
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(tied.attention.len(), 1);
        assert_eq!(predict(&s, &tied, 7).unwrap().len(), 7);
    }

    #[test]
    fn disabled_attention_repeats_initial_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = state(4, &mut rng);
        let p = ModelParams::new(
            ModelConfig {
                attention: false,
                ..small_config()
            },
            &mut rng,
        )
        .unwrap();
        let hs = embeddings(&s, &p, 2).unwrap();
        let h0 = encode_initial(&s, &p).unwrap();
        assert!(hs.iter().all(|h| *h == h0));
    }

    #[test]
    fn config_entries_round_trip() {
        let mut c = ModelConfig {
            eta: 0.1 + 0.2,
            learning_rate: 3e-3,
            aggregation: Aggregation::Mean,
            ..ModelConfig::default()
        };
        c.tie_steps = true;
        let mut back = ModelConfig::default();
        for (k, v) in c.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
        assert!(back.set("nope", "1").is_err());
        assert!(back.set("hidden", "x").is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = state(4, &mut rng);
        let mut p = ModelParams::new(small_config(), &mut rng).unwrap();
        p.perturb(&mut rng, 0.1);
        let target = Trajectory::new(vec![s.positions.map(|x| x + 0.3); 2], 0.1);
        let data = vec![Sample { state: s, target }];
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&data, &data, p.clone(), &cfg).unwrap();
        p.config.learning_rate = 0.0;
        assert_eq!(out.params, p);
        assert!(out.curve.iter().all(|e| e.train == out.curve[0].train));
    }

    #[test]
    fn model_file_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ModelParams::new(small_config(), &mut rng).unwrap();
        p.perturb(&mut rng, 0.3);
        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        assert_eq!(read_model(&buf[..]).unwrap(), p);

        assert!(matches!(
            read_model(&buf[..buf.len() - 5]),
            Err(ModelError::Corrupt(_))
        ));
        assert!(matches!(read_model(&buf[..2]), Err(ModelError::Corrupt(_))));
        let mut future = buf.clone();
        future[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            read_model(&future[..]),
            Err(ModelError::Version { .. })
        ));
        let mut garbage = buf.clone();
        garbage[0] = b'X';
        assert!(matches!(
            read_model(&garbage[..]),
            Err(ModelError::Corrupt(_))
        ));
    }
}

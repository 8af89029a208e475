//! Executable property suites: energy descent, rigid-motion and relabeling
//! symmetry, analytic gradients, and matrix/pairwise attention agreement.
//!
//! Every check reduces its trials to one worst-case number. A check passes
//! when that number is strictly below its tolerance, so a zero tolerance
//! always fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{self, AttentionLayerParams, PairwiseMaps, ParticleTypes};
use crate::decoder::ObservedGraph;
use crate::energy::{self, EnergyConfig, PotentialCoeffs};
use crate::geometry::{Permutation, RigidTransform};
use crate::gradcheck::{five_point_difference, max_relative_error};
use crate::model::{self, ModelConfig, ModelError, ModelParams, Sample, SystemState, Trajectory};
use crate::tensor::{rowwise_l2_normalize, Tensor, EPS};

/// Relative-error floor for gradient comparisons.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Step of the five-point stencil used for end-to-end gradient checks.
/// Smaller steps let cancellation round-off swamp the tiny query/key
/// gradients; larger ones expose curvature of the message MLPs.
pub const GRADIENT_STEP: f64 = 3e-4;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("unknown suite {0:?}; expected descent, equivariance, gradients, matrix-vs-pairwise, or all")]
    UnknownSuite(String),
    #[error("trial failed to run: {0}")]
    Trial(String),
}

impl From<ModelError> for VerifyError {
    fn from(e: ModelError) -> Self {
        Self::Trial(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub metric: &'static str,
    pub worst: f64,
    pub tolerance: f64,
    pub trials: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }

    /// `"<name>: <metric>=<worst> PASS|FAIL"`.
    pub fn summary(&self) -> String {
        format!(
            "{}: {}={:e} {}",
            self.name,
            self.metric,
            self.worst,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Descent,
    Equivariance,
    Gradients,
    MatrixVsPairwise,
    All,
}

impl std::str::FromStr for Suite {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "descent" => Self::Descent,
            "equivariance" => Self::Equivariance,
            "gradients" => Self::Gradients,
            "matrix-vs-pairwise" => Self::MatrixVsPairwise,
            "all" => Self::All,
            other => return Err(VerifyError::UnknownSuite(other.to_string())),
        })
    }
}

/// `None` fields fall back to each check's own default.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyOptions {
    pub trials: Option<usize>,
    pub tolerance: Option<f64>,
    pub seed: u64,
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng
}

fn worst_of(values: Vec<f64>) -> f64 {
    values.into_iter().fold(0.0, |acc: f64, v| {
        if v.is_nan() || acc.is_nan() {
            f64::NAN
        } else {
            acc.max(v)
        }
    })
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("shape")
}

/// Largest energy increase over 20 descent steps from random unit-row
/// embeddings (`N ≤ 16`, `d ≤ 8`, `η = 0.1`, `λ = 1`, `a ≡ 1`, `b ≡ 0.1`).
pub fn descent(trials: usize, tolerance: f64, seed: u64) -> Result<Check, VerifyError> {
    let results: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial);
            let n = rng.random_range(1..=16);
            let d = rng.random_range(1..=8);
            let h =
                rowwise_l2_normalize(&uniform_tensor(&mut rng, &[n, d], 1.0), EPS).expect("matrix");
            let coeffs = PotentialCoeffs::uniform(n, 1.0, 0.1)
                .map_err(|e| VerifyError::Trial(e.to_string()))?;
            let cfg = EnergyConfig::new(1.0, 0.1, coeffs)
                .map_err(|e| VerifyError::Trial(e.to_string()))?;
            let report = energy::certify_descent(&h, &cfg, 20)
                .map_err(|e| VerifyError::Trial(e.to_string()))?;
            Ok(report.max_violation.max(0.0))
        })
        .collect::<Result<_, VerifyError>>()?;
    Ok(Check {
        name: "descent",
        metric: "max_violation",
        worst: worst_of(results),
        tolerance,
        trials,
    })
}

/// Random connected system with `n` particles, two types, one feature.
pub fn random_state(n: usize, rng: &mut impl Rng) -> SystemState {
    let mut pairs: Vec<(usize, usize)> = (1..n).map(|i| (i, rng.random_range(0..i))).collect();
    if n > 3 {
        let (i, j) = (0, n - 1);
        if !pairs.contains(&(j, i)) {
            pairs.push((i, j));
        }
    }
    SystemState {
        positions: uniform_tensor(rng, &[n, 3], 2.0),
        velocities: uniform_tensor(rng, &[n, 3], 1.0),
        features: uniform_tensor(rng, &[n, 1], 1.0),
        types: ParticleTypes::new((0..n).map(|_| rng.random_range(0..2)).collect(), 2)
            .expect("labels"),
        graph: ObservedGraph::undirected(n, &pairs).expect("valid pairs"),
    }
}

/// Untrained model with every parameter, including the zero-initialized
/// heads, moved away from its initial value. The coordinate and velocity
/// heads get small offsets; at the full scale, positions compound across
/// decoder layers to 1e10 and the absolute tolerances measure round-off.
pub fn random_model(config: ModelConfig, rng: &mut impl Rng) -> Result<ModelParams, ModelError> {
    let mut p = ModelParams::new(config, rng)?;
    p.visit_mut(&mut |name, t| {
        let scale = if name.contains(".phi_x") || name.contains(".phi_v") {
            0.02
        } else {
            0.3
        };
        for x in t.data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    });
    Ok(p)
}

fn symmetry_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        mlp_hidden: 16,
        layers: 3,
        horizon: 3,
        num_heads: 2,
        ..ModelConfig::default()
    }
}

fn transform_state(s: &SystemState, tr: &RigidTransform) -> SystemState {
    SystemState {
        positions: tr.apply(&s.positions).expect("N×3"),
        velocities: tr.apply_to_velocity(&s.velocities).expect("N×3"),
        ..s.clone()
    }
}

fn permute_state(s: &SystemState, p: &Permutation) -> SystemState {
    SystemState {
        positions: p.apply_rows(&s.positions).expect("rows"),
        velocities: p.apply_rows(&s.velocities).expect("rows"),
        features: p.apply_rows(&s.features).expect("rows"),
        types: ParticleTypes::new(p.apply_slice(s.types.labels()), s.types.count())
            .expect("labels"),
        graph: s.graph.relabel(p.mapping()).expect("relabel"),
    }
}

fn max_frame_diff(a: &Trajectory, b: &Trajectory) -> f64 {
    worst_of(
        a.frames
            .iter()
            .zip(&b.frames)
            .map(|(x, y)| x.max_abs_diff(y).unwrap_or(f64::NAN))
            .collect(),
    )
}

/// Rigid-motion equivariance of predictions, invariance of initial
/// embeddings, and relabeling equivariance of predictions.
pub fn equivariance(
    trials: usize,
    tolerance: Option<f64>,
    seed: u64,
) -> Result<Vec<Check>, VerifyError> {
    let results: Vec<(f64, f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial);
            let params = random_model(symmetry_config(), &mut rng)?;
            let n = rng.random_range(3..=12);
            let s = random_state(n, &mut rng);
            let base = model::predict(&s, &params, 3)?;

            let tr = RigidTransform::random(&mut rng, 10.0);
            let moved = transform_state(&s, &tr);
            let pred = model::predict(&moved, &params, 3)?;
            let want = Trajectory::new(
                base.frames
                    .iter()
                    .map(|f| tr.apply(f).expect("N×3"))
                    .collect(),
                base.dt,
            );
            let se3 = max_frame_diff(&pred, &want);
            let inv = model::encode_initial(&moved, &params)?
                .max_abs_diff(&model::encode_initial(&s, &params)?)
                .unwrap_or(f64::NAN);

            let perm = Permutation::random(n, &mut rng);
            let pred = model::predict(&permute_state(&s, &perm), &params, 3)?;
            let want = Trajectory::new(
                base.frames
                    .iter()
                    .map(|f| perm.apply_rows(f).expect("rows"))
                    .collect(),
                base.dt,
            );
            Ok((se3, inv, max_frame_diff(&pred, &want)))
        })
        .collect::<Result<_, VerifyError>>()?;
    let pick = |k: usize| worst_of(results.iter().map(|r| [r.0, r.1, r.2][k]).collect());
    Ok(vec![
        Check {
            name: "equivariance",
            metric: "max_deviation",
            worst: pick(0),
            tolerance: tolerance.unwrap_or(1e-9),
            trials,
        },
        Check {
            name: "invariance",
            metric: "max_deviation",
            worst: pick(1),
            tolerance: tolerance.unwrap_or(1e-12),
            trials,
        },
        Check {
            name: "permutation",
            metric: "max_deviation",
            worst: pick(2),
            tolerance: tolerance.unwrap_or(1e-12),
            trials,
        },
    ])
}

/// Tiny end-to-end instance: `N = 4`, `T = 2`, `d = 8`, `L = 2`. Targets
/// sit near the model's own prediction so the loss stays O(1) and
/// round-off in the loss does not hide small gradient entries.
pub fn gradient_instance(rng: &mut impl Rng) -> Result<(ModelParams, Sample), ModelError> {
    let config = ModelConfig {
        hidden: 8,
        mlp_hidden: 8,
        layers: 2,
        horizon: 2,
        num_heads: 2,
        ..ModelConfig::default()
    };
    let params = random_model(config, rng)?;
    let state = random_state(4, rng);
    let pred = model::predict(&state, &params, 2)?;
    let frames = pred
        .frames
        .iter()
        .map(|f| f.add(&uniform_tensor(rng, &[4, 3], 0.1)).expect("N×3"))
        .collect();
    Ok((
        params,
        Sample {
            state,
            target: Trajectory::new(frames, 0.1),
        },
    ))
}

/// Worst relative error between analytic and finite-difference gradients
/// over every parameter tensor of one instance.
pub fn gradient_error(params: &ModelParams, sample: &Sample) -> Result<f64, ModelError> {
    let (_, analytic) = model::loss_and_gradients(sample, params)?;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (k, name) in names.iter().enumerate() {
        let original = params.tensors()[k].1.clone();
        let numeric = five_point_difference(&original, GRADIENT_STEP, |probe| {
            let mut p = params.clone();
            p.visit_mut(&mut |n, t| {
                if n == *name {
                    *t = probe.clone();
                }
            });
            model::sample_loss(sample, &p).unwrap_or(f64::NAN)
        });
        let err = max_relative_error(&analytic[k], &numeric, GRADIENT_FLOOR);
        worst = if err.is_nan() {
            f64::NAN
        } else {
            worst.max(err)
        };
    }
    Ok(worst)
}

pub fn gradients(trials: usize, tolerance: f64, seed: u64) -> Result<Check, VerifyError> {
    let results: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial);
            let (params, sample) = gradient_instance(&mut rng)?;
            Ok(gradient_error(&params, &sample)?)
        })
        .collect::<Result<_, VerifyError>>()?;
    Ok(Check {
        name: "gradients",
        metric: "max_relative_error",
        worst: worst_of(results),
        tolerance,
        trials,
    })
}

/// Largest gap between the matrix and pairwise attention forms on random
/// instances with `N ≤ 32`.
pub fn matrix_vs_pairwise(trials: usize, tolerance: f64, seed: u64) -> Result<Check, VerifyError> {
    let results: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial);
            let n = rng.random_range(1..=32);
            let heads = rng.random_range(1..=4);
            let d = heads * rng.random_range(1..=4);
            let e = rng.random_range(1..=4);
            let h = uniform_tensor(&mut rng, &[n, d], 1.0);
            let layer = AttentionLayerParams::random(d, rng.random_range(0.05..0.95), &mut rng);
            let mut maps = PairwiseMaps::new(e);
            maps.e_phi = uniform_tensor(&mut rng, &[e, e], 2.0);
            maps.e_psi = uniform_tensor(&mut rng, &[e, e], 2.0);
            let types = ParticleTypes::new((0..n).map(|_| rng.random_range(0..e)).collect(), e)
                .expect("labels");
            let run = || -> Result<f64, attention::AttentionError> {
                let (phi, psi) = attention::materialize_maps(&maps, &types)?;
                let a = attention::attention_step_matrix(&h, &layer, &phi, &psi, heads)?;
                let b = attention::attention_step_pairwise(&h, &layer, &phi, &psi, heads)?;
                Ok(a.max_abs_diff(&b)?)
            };
            run().map_err(|e| VerifyError::Trial(e.to_string()))
        })
        .collect::<Result<_, VerifyError>>()?;
    Ok(Check {
        name: "matrix-vs-pairwise",
        metric: "max_abs_diff",
        worst: worst_of(results),
        tolerance,
        trials,
    })
}

pub fn run_suite(suite: Suite, opts: VerifyOptions) -> Result<Vec<Check>, VerifyError> {
    let trials = |default: usize| opts.trials.unwrap_or(default);
    let tol = |default: f64| opts.tolerance.unwrap_or(default);
    let mut out = Vec::new();
    if matches!(suite, Suite::Descent | Suite::All) {
        out.push(descent(trials(100), tol(1e-9), opts.seed)?);
    }
    if matches!(suite, Suite::Equivariance | Suite::All) {
        out.extend(equivariance(trials(20), opts.tolerance, opts.seed)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.push(gradients(trials(2), tol(1e-4), opts.seed)?);
    }
    if matches!(suite, Suite::MatrixVsPairwise | Suite::All) {
        out.push(matrix_vs_pairwise(trials(20), tol(1e-10), opts.seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_format() {
        let c = Check {
            name: "descent",
            metric: "max_violation",
            worst: 0.0,
            tolerance: 1e-9,
            trials: 1,
        };
        assert_eq!(c.summary(), "descent: max_violation=0e0 PASS");
        assert!(!Check {
            tolerance: 0.0,
            ..c.clone()
        }
        .passed());
        assert!(!Check {
            worst: f64::NAN,
            ..c
        }
        .passed());
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!(
            "matrix-vs-pairwise".parse::<Suite>().unwrap(),
            Suite::MatrixVsPairwise
        );
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn small_suites_pass() {
        assert!(descent(5, 1e-9, 1).unwrap().passed());
        assert!(matrix_vs_pairwise(5, 1e-10, 1).unwrap().passed());
        for c in equivariance(3, None, 1).unwrap() {
            assert!(c.passed(), "{}", c.summary());
        }
    }

    #[test]
    fn zero_tolerance_fails() {
        let checks = run_suite(
            Suite::Descent,
            VerifyOptions {
                trials: Some(3),
                tolerance: Some(0.0),
                seed: 0,
            },
        )
        .unwrap();
        assert!(checks.iter().all(|c| !c.passed()));
    }
}

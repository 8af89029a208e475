//! Trajectory error metrics and the inference scaling probe.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::ParticleTypes;
use crate::decoder::ObservedGraph;
use crate::model::{self, ModelError, ModelParams, SystemState, Trajectory};
use crate::tensor::{memory, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no trajectories to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn frame_mse(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(MetricsError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let diff = a
        .sub(b)
        .map_err(|e| MetricsError::ShapeMismatch(e.to_string()))?;
    Ok(diff.sq_norm() / a.rows() as f64)
}

/// `(1/N) Σ_i ‖x̂_i⁽ᵗ⁾ − x_i⁽ᵗ⁾‖²` for every step.
pub fn per_step_mse(pred: &Trajectory, truth: &Trajectory) -> Result<Vec<f64>, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} vs {} frames",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    pred.frames
        .iter()
        .zip(&truth.frames)
        .map(|(a, b)| frame_mse(a, b))
        .collect()
}

/// Final-frame error.
pub fn f_mse(pred: &Trajectory, truth: &Trajectory) -> Result<f64, MetricsError> {
    let steps = per_step_mse(pred, truth)?;
    Ok(*steps.last().expect("non-empty"))
}

/// Error averaged over steps and particles.
pub fn a_mse(pred: &Trajectory, truth: &Trajectory) -> Result<f64, MetricsError> {
    let steps = per_step_mse(pred, truth)?;
    Ok(steps.iter().sum::<f64>() / steps.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Per-step MSE averaged over samples, `t = 1..=T`.
    pub per_step: Vec<f64>,
    pub f_mse: f64,
    pub a_mse: f64,
    pub wall_time_s: f64,
    pub peak_bytes: usize,
}

impl EvalReport {
    /// Aggregates `(prediction, truth)` pairs of equal length.
    pub fn from_pairs(pairs: &[(Trajectory, Trajectory)]) -> Result<Self, MetricsError> {
        let first = pairs.first().ok_or(MetricsError::Empty)?;
        let mut per_step = vec![0.0; first.1.len()];
        for (p, t) in pairs {
            let steps = per_step_mse(p, t)?;
            if steps.len() != per_step.len() {
                return Err(MetricsError::ShapeMismatch(
                    "trajectories have different lengths".into(),
                ));
            }
            per_step
                .iter_mut()
                .zip(&steps)
                .for_each(|(acc, s)| *acc += s);
        }
        let n = pairs.len() as f64;
        per_step.iter_mut().for_each(|s| *s /= n);
        let a_mse = per_step.iter().sum::<f64>() / per_step.len() as f64;
        Ok(Self {
            f_mse: *per_step.last().expect("non-empty"),
            a_mse,
            per_step,
            wall_time_s: 0.0,
            peak_bytes: 0,
        })
    }

    /// `step,mse` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,mse\n");
        for (t, m) in self.per_step.iter().enumerate() {
            s.push_str(&format!("{},{:.17e}\n", t + 1, m));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub particles: usize,
    pub horizon: usize,
    /// Median over repeats.
    pub time_ms: f64,
    pub mem_bytes: usize,
}

/// Random system with a ring of observed springs, sized for `params`.
pub fn synthetic_state(
    params: &ModelParams,
    n: usize,
    rng: &mut impl Rng,
) -> Result<SystemState, ModelError> {
    let c = &params.config;
    let rand = |rng: &mut dyn rand::RngCore, shape: &[usize], scale: f64| {
        let count = shape.iter().product();
        Tensor::new(
            shape,
            (0..count)
                .map(|_| rng.random_range(-scale..scale))
                .collect(),
        )
        .expect("shape")
    };
    let pairs: Vec<(usize, usize)> = if n > 1 {
        (0..n).map(|i| (i, (i + 1) % n)).collect()
    } else {
        vec![]
    };
    let pairs = if n == 2 { vec![(0, 1)] } else { pairs };
    let edges: Vec<(usize, usize)> = pairs.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect();
    let attrs = Tensor::ones(&[edges.len(), c.attr_dim]);
    Ok(SystemState {
        positions: rand(rng, &[n, 3], (n as f64).cbrt()),
        velocities: rand(rng, &[n, 3], 1.0),
        features: rand(rng, &[n, c.feature_dim], 1.0),
        types: ParticleTypes::new((0..n).map(|i| i % c.types).collect(), c.types)?,
        graph: ObservedGraph::new(n, edges, attrs)?,
    })
}

/// Times `predict` over the `(N, T)` grid on a single thread. Repeats are
/// interleaved across cells so slow drifts in machine load hit every cell
/// alike; each cell reports its median time and the peak tracked tensor
/// allocation during one prediction.
pub fn scaling_probe(
    params: &ModelParams,
    ns: &[usize],
    ts: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>, MetricsError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| MetricsError::ShapeMismatch(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells = Vec::new();
        for &n in ns {
            let state = synthetic_state(params, n, &mut rng)?;
            for &t in ts {
                cells.push((n, t, state.clone(), Vec::with_capacity(repeats), 0usize));
            }
        }
        for (_, t, state, _, _) in &cells {
            model::predict(state, params, *t)?;
        }
        for _ in 0..repeats.max(1) {
            for (_, t, state, times, mem) in cells.iter_mut() {
                let base = memory::live_bytes();
                memory::reset_peak();
                let start = Instant::now();
                let out = model::predict(state, params, *t)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                drop(out);
                *mem = (*mem).max(memory::peak_bytes().saturating_sub(base));
            }
        }
        Ok(cells
            .into_iter()
            .map(|(n, t, _, mut times, mem)| {
                times.sort_by(f64::total_cmp);
                ScalingRow {
                    particles: n,
                    horizon: t,
                    time_ms: times[times.len() / 2],
                    mem_bytes: mem,
                }
            })
            .collect())
    })
}

/// `N,T,time_ms,mem_bytes` rows.
pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut s = String::from("N,T,time_ms,mem_bytes\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{}\n",
            r.particles, r.horizon, r.time_ms, r.mem_bytes
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Permutation;
    use crate::model::ModelConfig;

    fn traj(frames: Vec<Vec<Vec<f64>>>) -> Trajectory {
        Trajectory::new(
            frames
                .iter()
                .map(|f| Tensor::from_rows(f).unwrap())
                .collect(),
            0.1,
        )
    }

    #[test]
    fn exact_prediction_scores_zero() {
        let t = traj(vec![vec![vec![1.0, 2.0, 3.0], vec![0.5, 0.0, -1.0]]; 3]);
        assert_eq!(a_mse(&t, &t).unwrap(), 0.0);
        assert_eq!(f_mse(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset() {
        let truth = Trajectory::new(vec![Tensor::zeros(&[5, 3]); 4], 0.1);
        let pred = Trajectory::new(vec![Tensor::full(&[5, 3], 0.5); 4], 0.1);
        assert_eq!(f_mse(&pred, &truth).unwrap(), 3.0 * 0.25);
        assert_eq!(a_mse(&pred, &truth).unwrap(), 3.0 * 0.25);
    }

    #[test]
    fn hand_computed_two_particle_two_step() {
        let truth = traj(vec![vec![vec![0.0; 3]; 2]; 2]);
        let pred = traj(vec![
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]],
            vec![vec![0.0, 0.0, 3.0], vec![1.0, 1.0, 1.0]],
        ]);
        assert_eq!(per_step_mse(&pred, &truth).unwrap(), vec![2.5, 6.0]);
        assert_eq!(f_mse(&pred, &truth).unwrap(), 6.0);
        assert_eq!(a_mse(&pred, &truth).unwrap(), 4.25);
        let one = pred.truncated(1);
        assert_eq!(
            a_mse(&one, &truth.truncated(1)).unwrap(),
            f_mse(&one, &truth.truncated(1)).unwrap()
        );
        assert!(a_mse(&pred, &one).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rand = |rng: &mut ChaCha8Rng| {
            Tensor::new(
                &[6, 3],
                (0..18).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let pred = Trajectory::new((0..3).map(|_| rand(&mut rng)).collect(), 0.1);
        let truth = Trajectory::new((0..3).map(|_| rand(&mut rng)).collect(), 0.1);
        let p = Permutation::random(6, &mut rng);
        let perm = |t: &Trajectory| {
            Trajectory::new(
                t.frames.iter().map(|f| p.apply_rows(f).unwrap()).collect(),
                0.1,
            )
        };
        let a = a_mse(&pred, &truth).unwrap();
        let b = a_mse(&perm(&pred), &perm(&truth)).unwrap();
        assert!((a - b).abs() <= 1e-15 * a.max(1.0));
    }

    #[test]
    fn report_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rand = |rng: &mut ChaCha8Rng| {
            Tensor::new(
                &[4, 3],
                (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let pairs: Vec<_> = (0..5)
            .map(|_| {
                (
                    Trajectory::new((0..4).map(|_| rand(&mut rng)).collect(), 0.1),
                    Trajectory::new((0..4).map(|_| rand(&mut rng)).collect(), 0.1),
                )
            })
            .collect();
        let r = EvalReport::from_pairs(&pairs).unwrap();
        let mean = r.per_step.iter().sum::<f64>() / 4.0;
        assert!((r.a_mse - mean).abs() <= 1e-12);
        assert_eq!(r.f_mse, r.per_step[3]);
        let avg_a = pairs.iter().map(|(p, t)| a_mse(p, t).unwrap()).sum::<f64>() / 5.0;
        assert!((r.a_mse - avg_a).abs() <= 1e-12);
        assert_eq!(r.to_csv().lines().count(), 5);
    }

    #[test]
    fn probe_emits_one_row_per_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig {
            hidden: 8,
            mlp_hidden: 8,
            layers: 1,
            horizon: 4,
            ..ModelConfig::default()
        };
        let params = ModelParams::new(cfg, &mut rng).unwrap();
        let rows = scaling_probe(&params, &[6], &[2], 1, 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].mem_bytes > 0 && rows[0].time_ms >= 0.0);
        let rows = scaling_probe(&params, &[4, 8], &[2, 4], 3, 0).unwrap();
        assert_eq!(rows.len(), 4);
        let csv = scaling_csv(&rows);
        assert!(csv.starts_with("N,T,time_ms,mem_bytes\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}

//! Latent-structure energy over particle embeddings and the attention-style
//! fixed-point iterate that descends it.
//!
//! For embeddings `H` anchored at a reference `H_ref`:
//!
//! ```text
//! E(H; H_ref) = Σ_i ||h_i − h_ref_i||² + λ Σ_{i,j} ρ_ij(||h_i − h_j||²)
//! ρ_ij(u)     = a_ij·u − b_ij·u²        (concave in u = squared distance)
//! f_ij(u)     = ρ'_ij(u) = a_ij − 2·b_ij·u
//! ```
//!
//! The pair sum runs over all ordered pairs including `i = j`; the diagonal
//! contributes `ρ(0) = 0` to the energy and `f_ii = a_ii` to the mixing
//! weights.

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnergyError {
    #[error("invalid energy configuration: {0}")]
    InvalidConfig(String),
    #[error("embeddings {h:?} and reference {reference:?} differ in shape")]
    ShapeMismatch {
        h: Vec<usize>,
        reference: Vec<usize>,
    },
    #[error("coefficients are {coeffs}×{coeffs} but there are {particles} particles")]
    ParticleCount { coeffs: usize, particles: usize },
    #[error("non-positive mixing weight ω[{i},{j}] = {value}; are the embeddings row-normalized?")]
    NonPositiveWeight { i: usize, j: usize, value: f64 },
    #[error("steps must be at least 1")]
    NoSteps,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Coefficients of the quadratic pair potential `ρ_ij(u) = a_ij u − b_ij u²`.
///
/// Invariants: both matrices symmetric, `b_ij > 0`, `a_ij > 8·b_ij`. The last
/// keeps `f_ij` positive for any two unit vectors, whose squared distance is
/// at most 4.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialCoeffs {
    coeff_a: Tensor,
    coeff_b: Tensor,
}

impl PotentialCoeffs {
    pub fn new(coeff_a: Tensor, coeff_b: Tensor) -> Result<Self, EnergyError> {
        let (n, m) = coeff_a.dims2()?;
        if n != m || coeff_b.shape() != coeff_a.shape() {
            return Err(EnergyError::InvalidConfig(format!(
                "coefficient matrices must be square and equal-shaped, got {:?} and {:?}",
                coeff_a.shape(),
                coeff_b.shape()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (coeff_a.at(i, j), coeff_b.at(i, j));
                if a != coeff_a.at(j, i) || b != coeff_b.at(j, i) {
                    return Err(EnergyError::InvalidConfig(format!(
                        "coefficients not symmetric at ({i},{j})"
                    )));
                }
                if !(b > 0.0) {
                    return Err(EnergyError::InvalidConfig(format!(
                        "b[{i},{j}] = {b} must be positive"
                    )));
                }
                if !(a > 8.0 * b) {
                    return Err(EnergyError::InvalidConfig(format!(
                        "a[{i},{j}] = {a} must exceed 8·b = {}",
                        8.0 * b
                    )));
                }
            }
        }
        Ok(Self { coeff_a, coeff_b })
    }

    /// Same `a`, `b` for every pair.
    pub fn uniform(n: usize, a: f64, b: f64) -> Result<Self, EnergyError> {
        Self::new(Tensor::full(&[n, n], a), Tensor::full(&[n, n], b))
    }

    pub fn particles(&self) -> usize {
        self.coeff_a.rows()
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.coeff_a.at(i, j)
    }

    pub fn b(&self, i: usize, j: usize) -> f64 {
        self.coeff_b.at(i, j)
    }

    pub fn rho(&self, i: usize, j: usize, sq_dist: f64) -> f64 {
        self.a(i, j) * sq_dist - self.b(i, j) * sq_dist * sq_dist
    }

    /// Derivative of `ρ_ij` with respect to the squared distance.
    pub fn weight(&self, i: usize, j: usize, sq_dist: f64) -> f64 {
        self.a(i, j) - 2.0 * self.b(i, j) * sq_dist
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyConfig {
    pub lambda: f64,
    pub eta: f64,
    pub coeffs: PotentialCoeffs,
}

impl EnergyConfig {
    pub fn new(lambda: f64, eta: f64, coeffs: PotentialCoeffs) -> Result<Self, EnergyError> {
        let cfg = Self {
            lambda,
            eta,
            coeffs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        if !(self.lambda > 0.0) {
            return Err(EnergyError::InvalidConfig(format!(
                "lambda = {} must be positive",
                self.lambda
            )));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(EnergyError::InvalidConfig(format!(
                "eta = {} must lie in (0, 1)",
                self.eta
            )));
        }
        Ok(())
    }

    fn check_particles(&self, h: &Tensor) -> Result<usize, EnergyError> {
        let (n, _) = h.dims2()?;
        if n != self.coeffs.particles() {
            return Err(EnergyError::ParticleCount {
                coeffs: self.coeffs.particles(),
                particles: n,
            });
        }
        Ok(n)
    }
}

/// All pairwise squared distances `||h_i − h_j||²` through the Gram matrix,
/// clamped at zero against cancellation.
pub fn squared_distances(h: &Tensor) -> Result<Tensor, TensorError> {
    let gram = h.matmul_nt(h)?;
    let n = gram.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let d = if i == j {
                0.0
            } else {
                gram.at(i, i) + gram.at(j, j) - 2.0 * gram.at(i, j)
            };
            out.set(i, j, d.max(0.0));
        }
    }
    Ok(out)
}

/// `Σ_{i,j} ρ_ij(||h_i − h_j||²)` over ordered pairs.
pub fn pair_energy(h: &Tensor, coeffs: &PotentialCoeffs) -> Result<f64, TensorError> {
    let d = squared_distances(h)?;
    let n = d.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += coeffs.rho(i, j, d.at(i, j));
        }
    }
    Ok(total)
}

/// `E(H; H_ref)`.
pub fn evaluate_energy(h: &Tensor, h_ref: &Tensor, cfg: &EnergyConfig) -> Result<f64, EnergyError> {
    cfg.validate()?;
    if h.shape() != h_ref.shape() {
        return Err(EnergyError::ShapeMismatch {
            h: h.shape().to_vec(),
            reference: h_ref.shape().to_vec(),
        });
    }
    cfg.check_particles(h)?;
    let anchor = h.sub(h_ref)?.sq_norm();
    Ok(anchor + cfg.lambda * pair_energy(h, &cfg.coeffs)?)
}

/// Row-normalized mixing weights `ω_ij / Σ_m ω_im` with `ω_ij = f_ij(||h_i − h_j||²)`.
pub fn mixing_weights(h: &Tensor, coeffs: &PotentialCoeffs) -> Result<Tensor, EnergyError> {
    let d = squared_distances(h)?;
    let n = d.rows();
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mut total = 0.0;
        for j in 0..n {
            let value = coeffs.weight(i, j, d.at(i, j));
            if !(value > 0.0) {
                return Err(EnergyError::NonPositiveWeight { i, j, value });
            }
            w.set(i, j, value);
            total += value;
        }
        for x in w.row_mut(i) {
            *x /= total;
        }
    }
    Ok(w)
}

/// One descent iterate: `h'_i = (1 − η) h_i + η Σ_j (ω_ij / Σ_m ω_im) h_j`.
pub fn descent_step(h: &Tensor, cfg: &EnergyConfig) -> Result<Tensor, EnergyError> {
    cfg.validate()?;
    cfg.check_particles(h)?;
    let mix = mixing_weights(h, &cfg.coeffs)?.matmul(h)?;
    Ok(h.scale(1.0 - cfg.eta).add(&mix.scale(cfg.eta))?)
}

/// Energy trace of repeated [`descent_step`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    /// `E(H^(t), t)` for `t = 0..=steps`, each iterate anchored at itself.
    pub energies: Vec<f64>,
    /// `max_t (E_{t+1} − E_t)`; non-positive when every step descends.
    pub max_violation: f64,
}

impl DescentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,energy\n");
        for (t, e) in self.energies.iter().enumerate() {
            out.push_str(&format!("{t},{e:.17e}\n"));
        }
        out
    }
}

/// Iterates [`descent_step`] and records `E(H^(t), t)`, where the energy at
/// step `t` takes `H^(t)` as both argument and anchor. The anchor term then
/// vanishes and each entry is `λ Σ ρ_ij` of the current iterate.
pub fn certify_descent(
    h0: &Tensor,
    cfg: &EnergyConfig,
    steps: usize,
) -> Result<DescentReport, EnergyError> {
    if steps == 0 {
        return Err(EnergyError::NoSteps);
    }
    let mut h = h0.clone();
    let mut energies = Vec::with_capacity(steps + 1);
    energies.push(evaluate_energy(&h, &h, cfg)?);
    for _ in 0..steps {
        h = descent_step(&h, cfg)?;
        energies.push(evaluate_energy(&h, &h, cfg)?);
    }
    let max_violation = energies
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(DescentReport {
        energies,
        max_violation,
    })
}

//! All-pair attention layer over particle embeddings.
//!
//! One step mixes every particle with every other:
//!
//! ```text
//! w_ij = φ_ij + ψ_ij · (q̃_i · k̃_j)
//! h'_i = (1 − η) h_i + η Σ_j w_ij (W_V h_j) / Σ_m w_im
//! ```
//!
//! where `q̃`, `k̃` are the L2-normalized rows of `W_Q H`, `W_K H` and
//! `Φ`, `Ψ` come from type-dependent lookup tables. The matrix form
//! ([`attention_step`]) is the production path; [`attention_step_pairwise`]
//! is a direct double loop kept as an oracle.

use rand::Rng;

use crate::tensor::{Tape, Tensor, TensorError, Var, EPS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("attention normalizer for particle {row} is {value}, expected positive")]
    NonPositiveDenominator { row: usize, value: f64 },
    #[error("embedding width {width} is not divisible by {heads} heads")]
    Heads { width: usize, heads: usize },
    #[error("eta = {0} must lie in (0, 1)")]
    Eta(f64),
    #[error("type index {index} out of range for {count} types")]
    TypeIndex { index: usize, count: usize },
    #[error("no attention layers given for horizon {0}")]
    NoLayers(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-step query/key/value weights. Rows transform as `q_i = W_Q h_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub eta: f64,
}

impl AttentionLayerParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, eta: f64) -> Result<Self, AttentionError> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(AttentionError::Eta(eta));
        }
        let d = w_q.rows();
        for w in [&w_q, &w_k, &w_v] {
            if w.shape() != [d, d] {
                return Err(TensorError::Shape {
                    op: "attention weights",
                    lhs: vec![d, d],
                    rhs: w.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(Self { w_q, w_k, w_v, eta })
    }

    /// Uniform `±1/sqrt(d)` query/key weights; value weights start near the
    /// identity so early steps roughly preserve embeddings.
    pub fn random(d: usize, eta: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = || {
            Tensor::new(
                &[d, d],
                (0..d * d)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            )
            .expect("shape")
        };
        let w_q = draw();
        let w_k = draw();
        let w_v = Tensor::identity(d).add(&draw().scale(0.5)).expect("shape");
        Self { w_q, w_k, w_v, eta }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
    }
}

/// Particle type labels; the one-hot matrix `Z` is derived on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticleTypes {
    labels: Vec<usize>,
    count: usize,
}

impl ParticleTypes {
    pub fn new(labels: Vec<usize>, count: usize) -> Result<Self, AttentionError> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= count) {
            return Err(AttentionError::TypeIndex { index: bad, count });
        }
        Ok(Self { labels, count })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of distinct types `E`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `N×E` one-hot matrix `Z`.
    pub fn one_hot(&self) -> Tensor {
        let mut z = Tensor::zeros(&[self.labels.len(), self.count]);
        for (i, &l) in self.labels.iter().enumerate() {
            z.set(i, l, 1.0);
        }
        z
    }
}

/// Learnable type-pair lookup tables and scales for `Φ` and `Ψ`.
///
/// `s₁`, `s₂` are stored as logarithms so they stay positive. Unless
/// `unclamped_maps` is set, `s₂` is capped at materialization time so every
/// `ψ_ij` stays strictly below every `φ_ij`, which keeps all attention
/// weights positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMaps {
    pub e_phi: Tensor,
    pub e_psi: Tensor,
    pub log_s1: Tensor,
    pub log_s2: Tensor,
    pub unclamped_maps: bool,
}

impl PairwiseMaps {
    /// Zero tables (so `Φ ≡ s₁/2`), `s₁ = 1`, `s₂ = 1/4`.
    pub fn new(types: usize) -> Self {
        Self {
            e_phi: Tensor::zeros(&[types, types]),
            e_psi: Tensor::zeros(&[types, types]),
            log_s1: Tensor::scalar(0.0),
            log_s2: Tensor::scalar(0.25f64.ln()),
            unclamped_maps: false,
        }
    }

    pub fn types(&self) -> usize {
        self.e_phi.rows()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.e_phi"), &self.e_phi);
        f(format!("{prefix}.e_psi"), &self.e_psi);
        f(format!("{prefix}.log_s1"), &self.log_s1);
        f(format!("{prefix}.log_s2"), &self.log_s2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.e_phi"), &mut self.e_phi);
        f(format!("{prefix}.e_psi"), &mut self.e_psi);
        f(format!("{prefix}.log_s1"), &mut self.log_s1);
        f(format!("{prefix}.log_s2"), &mut self.log_s2);
    }

    /// Records `Φ = s₁·σ(Z E_φ Zᵀ)` and `Ψ = s₂·σ(Z E_ψ Zᵀ)` on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        types: &ParticleTypes,
    ) -> Result<(Var, Var), AttentionError> {
        if types.count() != self.types() {
            return Err(AttentionError::TypeIndex {
                index: types.count(),
                count: self.types(),
            });
        }
        let z = tape.leaf(types.one_hot());
        let sig = |tape: &mut Tape, table: &Tensor| -> Result<Var, TensorError> {
            let e = tape.param(table);
            let ze = tape.matmul(z, e)?;
            let logits = tape.matmul_nt(ze, z)?;
            Ok(tape.sigmoid(logits))
        };
        let sig_phi = sig(tape, &self.e_phi)?;
        let sig_psi = sig(tape, &self.e_psi)?;
        let log_s1 = tape.param(&self.log_s1);
        let s1 = tape.exp(log_s1);
        let log_s2 = tape.param(&self.log_s2);
        let mut s2 = tape.exp(log_s2);
        if !self.unclamped_maps {
            let min_phi = tape.min_all(sig_phi);
            let cap = tape.mul_scalar(min_phi, s1)?;
            s2 = tape.minimum(s2, cap)?;
        }
        let phi = tape.mul_scalar(sig_phi, s1)?;
        let psi = tape.mul_scalar(sig_psi, s2)?;
        Ok((phi, psi))
    }
}

/// Materialized `(Φ, Ψ)` as plain values.
pub fn materialize_maps(
    maps: &PairwiseMaps,
    types: &ParticleTypes,
) -> Result<(Tensor, Tensor), AttentionError> {
    let mut tape = Tape::new();
    let (phi, psi) = maps.forward(&mut tape, types)?;
    Ok((tape.value(phi).clone(), tape.value(psi).clone()))
}

fn head_width(d: usize, heads: usize) -> Result<usize, AttentionError> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(AttentionError::Heads { width: d, heads });
    }
    Ok(d / heads)
}

/// One attention step in matrix form, recorded on the tape:
///
/// ```text
/// D  = diag⁻¹(Φ1 + (Ψ ⊙ Q̃K̃ᵀ)1)
/// H' = (1 − η) H + η D (Φ V + (Ψ ⊙ Q̃K̃ᵀ) V)
/// ```
///
/// With several heads, `Q`, `K`, `V` are split into equal column slices that
/// share `Φ` and `Ψ`, and the mixed slices are concatenated.
pub fn attention_step(
    tape: &mut Tape,
    h: Var,
    layer: &AttentionLayerParams,
    phi: Var,
    psi: Var,
    heads: usize,
) -> Result<Var, AttentionError> {
    let d = tape.value(h).cols();
    let width = head_width(d, heads)?;
    let wq = tape.param(&layer.w_q);
    let wk = tape.param(&layer.w_k);
    let wv = tape.param(&layer.w_v);
    let q = tape.matmul_nt(h, wq)?;
    let k = tape.matmul_nt(h, wk)?;
    let v = tape.matmul_nt(h, wv)?;

    let mut mixed = Vec::with_capacity(heads);
    for head in 0..heads {
        let (lo, hi) = (head * width, (head + 1) * width);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, lo, hi)?,
                tape.slice_cols(k, lo, hi)?,
                tape.slice_cols(v, lo, hi)?,
            )
        };
        let qn = tape.row_normalize(qh, EPS)?;
        let kn = tape.row_normalize(kh, EPS)?;
        let sim = tape.matmul_nt(qn, kn)?;
        let gated = tape.mul(psi, sim)?;
        let weights = tape.add(phi, gated)?;
        let denom = tape.sum_rows(weights)?;
        if let Some((row, &value)) = tape
            .value(denom)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &x)| !(x > 0.0))
        {
            return Err(AttentionError::NonPositiveDenominator { row, value });
        }
        let inv = tape.recip(denom, EPS);
        let agg = tape.matmul(weights, vh)?;
        mixed.push(tape.mul_col(agg, inv)?);
    }
    let mix = if heads == 1 {
        mixed[0]
    } else {
        tape.concat_cols(&mixed)?
    };
    let keep = tape.scale(h, 1.0 - layer.eta);
    let step = tape.scale(mix, layer.eta);
    Ok(tape.add(keep, step)?)
}

/// [`attention_step`] on plain values.
pub fn attention_step_matrix(
    h: &Tensor,
    layer: &AttentionLayerParams,
    phi: &Tensor,
    psi: &Tensor,
    heads: usize,
) -> Result<Tensor, AttentionError> {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let pv = tape.leaf(phi.clone());
    let sv = tape.leaf(psi.clone());
    let out = attention_step(&mut tape, hv, layer, pv, sv, heads)?;
    Ok(tape.value(out).clone())
}

fn mat_vec_rows(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    v.iter().map(|x| x / n).collect()
}

/// Direct per-pair evaluation of one attention step. Quadratic loops, no
/// tape; used as the reference for [`attention_step`].
pub fn attention_step_pairwise(
    h: &Tensor,
    layer: &AttentionLayerParams,
    phi: &Tensor,
    psi: &Tensor,
    heads: usize,
) -> Result<Tensor, AttentionError> {
    let (n, d) = h.dims2()?;
    let width = head_width(d, heads)?;
    let q: Vec<Vec<f64>> = (0..n).map(|i| mat_vec_rows(&layer.w_q, h.row(i))).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|i| mat_vec_rows(&layer.w_k, h.row(i))).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|i| mat_vec_rows(&layer.w_v, h.row(i))).collect();

    let mut out = h.scale(1.0 - layer.eta);
    for head in 0..heads {
        let cols = head * width..(head + 1) * width;
        let qn: Vec<Vec<f64>> = q.iter().map(|r| unit(&r[cols.clone()])).collect();
        let kn: Vec<Vec<f64>> = k.iter().map(|r| unit(&r[cols.clone()])).collect();
        for i in 0..n {
            let mut total = 0.0;
            let mut acc = vec![0.0; width];
            for j in 0..n {
                let cos: f64 = qn[i].iter().zip(&kn[j]).map(|(a, b)| a * b).sum();
                let w = phi.at(i, j) + psi.at(i, j) * cos;
                total += w;
                for (a, x) in acc.iter_mut().zip(&v[j][cols.clone()]) {
                    *a += w * x;
                }
            }
            if !(total > 0.0) {
                return Err(AttentionError::NonPositiveDenominator {
                    row: i,
                    value: total,
                });
            }
            for (c, a) in cols.clone().zip(&acc) {
                let cur = out.at(i, c);
                out.set(i, c, cur + layer.eta * a / total);
            }
        }
    }
    Ok(out)
}

/// Normalized single-head mixing matrix `w_ij / Σ_m w_im`.
pub fn mixing_matrix(
    h: &Tensor,
    layer: &AttentionLayerParams,
    phi: &Tensor,
    psi: &Tensor,
) -> Result<Tensor, AttentionError> {
    let q = crate::tensor::rowwise_l2_normalize(&h.matmul_nt(&layer.w_q)?, EPS)?;
    let k = crate::tensor::rowwise_l2_normalize(&h.matmul_nt(&layer.w_k)?, EPS)?;
    let mut w = phi.add(&psi.mul(&q.matmul_nt(&k)?)?)?;
    for i in 0..w.rows() {
        let total: f64 = w.row(i).iter().sum();
        w.row_mut(i).iter_mut().for_each(|x| *x /= total);
    }
    Ok(w)
}

/// How the encoder is unrolled over time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnrollOptions {
    pub heads: usize,
    /// Project each step's output back onto the unit sphere.
    pub normalize: bool,
}

impl Default for UnrollOptions {
    fn default() -> Self {
        Self {
            heads: 1,
            normalize: true,
        }
    }
}

/// Runs `horizon` attention steps from `h0`, one step per predicted frame,
/// and returns `[H¹, …, Hᵀ]`. Step `t` uses `layers[t]`, or `layers[0]`
/// for every step when a single (tied) layer is given.
pub fn unroll(
    tape: &mut Tape,
    h0: Var,
    layers: &[AttentionLayerParams],
    phi: Var,
    psi: Var,
    horizon: usize,
    opts: UnrollOptions,
) -> Result<Vec<Var>, AttentionError> {
    if layers.is_empty() || (layers.len() != 1 && layers.len() < horizon) {
        return Err(AttentionError::NoLayers(horizon));
    }
    let mut out = Vec::with_capacity(horizon);
    let mut h = h0;
    for t in 0..horizon {
        let layer = if layers.len() == 1 {
            &layers[0]
        } else {
            &layers[t]
        };
        h = attention_step(tape, h, layer, phi, psi, opts.heads)?;
        if opts.normalize {
            h = tape.row_normalize(h, EPS)?;
        }
        out.push(h);
    }
    Ok(out)
}

/// [`unroll`] on plain values.
pub fn unroll_encoder(
    h0: &Tensor,
    layers: &[AttentionLayerParams],
    maps: &PairwiseMaps,
    types: &ParticleTypes,
    horizon: usize,
    opts: UnrollOptions,
) -> Result<Vec<Tensor>, AttentionError> {
    let mut tape = Tape::new();
    let (phi, psi) = maps.forward(&mut tape, types)?;
    let h = tape.leaf(h0.clone());
    let seq = unroll(&mut tape, h, layers, phi, psi, horizon, opts)?;
    Ok(seq.into_iter().map(|v| tape.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Permutation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_h(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(
            &[n, d],
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_maps(rng: &mut ChaCha8Rng, e: usize) -> PairwiseMaps {
        let mut m = PairwiseMaps::new(e);
        let draw = |rng: &mut ChaCha8Rng| {
            Tensor::new(
                &[e, e],
                (0..e * e).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap()
        };
        m.e_phi = draw(rng);
        m.e_psi = draw(rng);
        m.log_s1 = Tensor::scalar(rng.random_range(-0.5..0.5));
        m.log_s2 = Tensor::scalar(rng.random_range(-1.5..0.0));
        m
    }

    fn random_types(rng: &mut ChaCha8Rng, n: usize, e: usize) -> ParticleTypes {
        ParticleTypes::new((0..n).map(|_| rng.random_range(0..e)).collect(), e).unwrap()
    }

    #[test]
    fn zero_table_gives_half_scale() {
        let mut maps = PairwiseMaps::new(2);
        maps.log_s1 = Tensor::scalar(3.0f64.ln());
        let types = ParticleTypes::new(vec![0, 1, 1], 2).unwrap();
        let (phi, _) = materialize_maps(&maps, &types).unwrap();
        assert!(phi.data().iter().all(|&x| (x - 1.5).abs() < 1e-15));
    }

    #[test]
    fn type_pair_lookup() {
        let mut maps = PairwiseMaps::new(2);
        maps.e_phi = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, -2.0]]).unwrap();
        let types = ParticleTypes::new(vec![0, 1, 0], 2).unwrap();
        let (phi, psi) = materialize_maps(&maps, &types).unwrap();
        let s2 = 1.0 / (1.0 + 2f64.exp());
        assert!((phi.at(0, 2) - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert!((phi.at(1, 1) - 0.119_202_922_022_117_7).abs() < 1e-15);
        assert!((phi.at(0, 1) - 0.5).abs() < 1e-15 && (phi.at(1, 0) - 0.5).abs() < 1e-15);
        // s₂ = 1/4 sits above min Φ = σ(−2) ≈ 0.1192, so it is capped there.
        assert!((psi.at(0, 0) - 0.5 * s2).abs() < 1e-15);
        assert!(psi.max_abs() < phi.data().iter().cloned().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn strict_mode_skips_the_cap() {
        let mut maps = PairwiseMaps::new(2);
        maps.e_phi = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, -2.0]]).unwrap();
        maps.unclamped_maps = true;
        let types = ParticleTypes::new(vec![0, 1], 2).unwrap();
        let (_, psi) = materialize_maps(&maps, &types).unwrap();
        assert!((psi.at(0, 0) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn symmetric_table_gives_symmetric_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut maps = random_maps(&mut rng, 3);
        maps.e_phi = maps.e_phi.add(&maps.e_phi.transpose().unwrap()).unwrap();
        let types = random_types(&mut rng, 7, 3);
        let (phi, _) = materialize_maps(&maps, &types).unwrap();
        assert_eq!(phi, phi.transpose().unwrap());
    }

    #[test]
    fn rejects_out_of_range_type() {
        assert!(ParticleTypes::new(vec![0, 2], 2).is_err());
    }

    #[test]
    fn small_eta_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_h(&mut rng, 5, 4);
        let mut layer = AttentionLayerParams::random(4, 0.5, &mut rng);
        layer.eta = 1e-6;
        let (phi, psi) =
            materialize_maps(&random_maps(&mut rng, 2), &random_types(&mut rng, 5, 2)).unwrap();
        let out = attention_step_pairwise(&h, &layer, &phi, &psi, 1).unwrap();
        assert!(out.max_abs_diff(&h).unwrap() <= 1e-5);
    }

    #[test]
    fn uniform_phi_without_psi_mixes_to_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_h(&mut rng, 6, 3);
        let mut layer = AttentionLayerParams::random(3, 0.3, &mut rng);
        layer.w_v = Tensor::identity(3);
        let phi = Tensor::full(&[6, 6], 0.7);
        let psi = Tensor::zeros(&[6, 6]);
        let out = attention_step_pairwise(&h, &layer, &phi, &psi, 1).unwrap();
        let mean = h.sum_cols().unwrap().scale(1.0 / 6.0);
        for i in 0..6 {
            for c in 0..3 {
                let want = 0.7 * h.at(i, c) + 0.3 * mean.at(0, c);
                assert!((out.at(i, c) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn three_particle_matrix_matches_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_h(&mut rng, 3, 2);
        let layer = AttentionLayerParams::random(2, 0.4, &mut rng);
        let (phi, psi) =
            materialize_maps(&random_maps(&mut rng, 2), &random_types(&mut rng, 3, 2)).unwrap();
        let a = attention_step_matrix(&h, &layer, &phi, &psi, 1).unwrap();
        let b = attention_step_pairwise(&h, &layer, &phi, &psi, 1).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);
    }

    #[test]
    fn matrix_matches_pairwise_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(1..=32);
            let heads = rng.random_range(1..=4);
            let d = heads * rng.random_range(1..=4);
            let e = rng.random_range(1..=4);
            let h = random_h(&mut rng, n, d);
            let layer = AttentionLayerParams::random(d, rng.random_range(0.05..0.95), &mut rng);
            let (phi, psi) =
                materialize_maps(&random_maps(&mut rng, e), &random_types(&mut rng, n, e)).unwrap();
            let a = attention_step_matrix(&h, &layer, &phi, &psi, heads).unwrap();
            let b = attention_step_pairwise(&h, &layer, &phi, &psi, heads).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn mixing_rows_are_stochastic_when_phi_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = rng.random_range(2..=16);
            let h = random_h(&mut rng, n, 4);
            let layer = AttentionLayerParams::random(4, 0.5, &mut rng);
            let (phi, psi) =
                materialize_maps(&random_maps(&mut rng, 3), &random_types(&mut rng, n, 3)).unwrap();
            let min_phi = phi.data().iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min_phi > psi.max_abs());
            let w = mixing_matrix(&h, &layer, &phi, &psi).unwrap();
            for i in 0..n {
                assert!(w.row(i).iter().all(|&x| x >= 0.0));
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn permuting_particles_permutes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 9;
        let h = random_h(&mut rng, n, 4);
        let layer = AttentionLayerParams::random(4, 0.5, &mut rng);
        let maps = random_maps(&mut rng, 3);
        let types = random_types(&mut rng, n, 3);
        let (phi, psi) = materialize_maps(&maps, &types).unwrap();
        let out = attention_step_matrix(&h, &layer, &phi, &psi, 2).unwrap();

        let p = Permutation::random(n, &mut rng);
        let ptypes = ParticleTypes::new(p.apply_slice(types.labels()), 3).unwrap();
        let (pphi, ppsi) = materialize_maps(&maps, &ptypes).unwrap();
        let pout =
            attention_step_matrix(&p.apply_rows(&h).unwrap(), &layer, &pphi, &ppsi, 2).unwrap();
        assert!(pout.max_abs_diff(&p.apply_rows(&out).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn non_positive_denominator_is_an_error() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let layer = AttentionLayerParams::new(
            Tensor::identity(2),
            Tensor::identity(2),
            Tensor::identity(2),
            0.5,
        )
        .unwrap();
        let phi = Tensor::full(&[2, 2], 0.1);
        // row 0: 0.1 + 0.1·1 + 0.1 + 2·(−1) < 0
        let psi = Tensor::from_rows(&[vec![0.1, 2.0], vec![2.0, 0.1]]).unwrap();
        assert!(matches!(
            attention_step_matrix(&h, &layer, &phi, &psi, 1),
            Err(AttentionError::NonPositiveDenominator { .. })
        ));
        assert!(matches!(
            attention_step_pairwise(&h, &layer, &phi, &psi, 1),
            Err(AttentionError::NonPositiveDenominator { .. })
        ));
    }

    #[test]
    fn unroll_one_step_equals_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_h(&mut rng, 5, 4);
        let layer = AttentionLayerParams::random(4, 0.5, &mut rng);
        let maps = random_maps(&mut rng, 2);
        let types = random_types(&mut rng, 5, 2);
        let opts = UnrollOptions {
            heads: 1,
            normalize: false,
        };
        let seq = unroll_encoder(&h, std::slice::from_ref(&layer), &maps, &types, 1, opts).unwrap();
        let (phi, psi) = materialize_maps(&maps, &types).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(
            seq[0],
            attention_step_matrix(&h, &layer, &phi, &psi, 1).unwrap()
        );
    }

    #[test]
    fn unroll_fixed_point_propagates() {
        let row = vec![0.0, 0.6, 0.8, 0.0];
        let h = Tensor::from_rows(&vec![row; 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layer = AttentionLayerParams::random(4, 0.5, &mut rng);
        layer.w_v = Tensor::identity(4);
        let maps = random_maps(&mut rng, 2);
        let types = random_types(&mut rng, 5, 2);
        let seq = unroll_encoder(
            &h,
            &[layer.clone(), layer.clone(), layer],
            &maps,
            &types,
            3,
            UnrollOptions::default(),
        )
        .unwrap();
        for s in &seq {
            assert!(s.max_abs_diff(&h).unwrap() <= 1e-15);
        }
    }

    #[test]
    fn unroll_three_steps_matches_manual_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = random_h(&mut rng, 6, 4);
        let layers: Vec<_> = (0..3)
            .map(|_| AttentionLayerParams::random(4, 0.5, &mut rng))
            .collect();
        let maps = random_maps(&mut rng, 2);
        let types = random_types(&mut rng, 6, 2);
        let seq = unroll_encoder(&h, &layers, &maps, &types, 3, UnrollOptions::default()).unwrap();
        let (phi, psi) = materialize_maps(&maps, &types).unwrap();
        let mut cur = h;
        for (t, layer) in layers.iter().enumerate() {
            let next = attention_step_matrix(&cur, layer, &phi, &psi, 1).unwrap();
            cur = crate::tensor::rowwise_l2_normalize(&next, EPS).unwrap();
            assert_eq!(seq[t], cur);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let h = Tensor::zeros(&[2, 6]);
        let layer = AttentionLayerParams::new(
            Tensor::identity(6),
            Tensor::identity(6),
            Tensor::identity(6),
            0.5,
        )
        .unwrap();
        let phi = Tensor::ones(&[2, 2]);
        assert!(matches!(
            attention_step_matrix(&h, &layer, &phi, &Tensor::zeros(&[2, 2]), 4),
            Err(AttentionError::Heads { .. })
        ));
    }
}

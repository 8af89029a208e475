//! Rigid motions of 3D point sets and particle relabelings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Tensor, TensorError};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("rotation is not orthogonal (max |QᵀQ − I| = {0:e})")]
    NotOrthogonal(f64),
    #[error("rotation has determinant {0}, expected +1")]
    Improper(f64),
    #[error("mapping is not a bijection on 0..{0}")]
    NotBijection(usize),
    #[error("expected an N×3 array, got {0:?}")]
    NotPoints(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

const GROUP_TOL: f64 = 1e-10;

/// Proper rigid motion `x ↦ Qx + g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(m) {
        *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
    }
    out
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn determinant(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Largest entry of `|QᵀQ − I|`.
pub fn orthogonality_defect(q: &Mat3) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| q[k][i] * q[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Uniform rotation on SO(3): a normalized 4D Gaussian is a uniform unit
/// quaternion.
pub fn random_rotation(seed: u64) -> Mat3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_rotation(&mut rng)
}

pub fn sample_rotation(rng: &mut impl rand::Rng) -> Mat3 {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return quaternion_to_matrix(q.map(|v| v / norm));
        }
    }
}

/// Rodrigues rotation by `angle` radians about `axis`.
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|v| v / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn check_points(x: &Tensor) -> Result<usize, GeometryError> {
    match x.shape() {
        [n, 3] => Ok(*n),
        s => Err(GeometryError::NotPoints(s.to_vec())),
    }
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let defect = orthogonality_defect(&rotation);
        if defect > GROUP_TOL {
            return Err(GeometryError::NotOrthogonal(defect));
        }
        let det = determinant(&rotation);
        if (det - 1.0).abs() > GROUP_TOL {
            return Err(GeometryError::Improper(det));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(g: Vec3) -> Self {
        Self {
            translation: g,
            ..Self::identity()
        }
    }

    /// Random rotation plus a Gaussian translation of standard deviation `spread`.
    pub fn random(rng: &mut impl rand::Rng, spread: f64) -> Self {
        let rotation = sample_rotation(rng);
        let translation: Vec3 = std::array::from_fn(|_| {
            let z: f64 = StandardNormal.sample(rng);
            spread * z
        });
        Self {
            rotation,
            translation,
        }
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> Self {
        let rotation = mat_mul(&self.rotation, &first.rotation);
        let moved = mat_vec(&self.rotation, &first.translation);
        let translation = std::array::from_fn(|k| moved[k] + self.translation[k]);
        Self {
            rotation,
            translation,
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        std::array::from_fn(|k| r[k] + self.translation[k])
    }

    /// Positions: each row `x ↦ Qx + g`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, GeometryError> {
        let n = check_points(x)?;
        let mut out = x.clone();
        for i in 0..n {
            let p = [x.at(i, 0), x.at(i, 1), x.at(i, 2)];
            out.row_mut(i).copy_from_slice(&self.apply_point(&p));
        }
        Ok(out)
    }

    /// Velocities: each row `v ↦ Qv`; translation does not act.
    pub fn apply_to_velocity(&self, v: &Tensor) -> Result<Tensor, GeometryError> {
        let n = check_points(v)?;
        let mut out = v.clone();
        for i in 0..n {
            let p = [v.at(i, 0), v.at(i, 1), v.at(i, 2)];
            out.row_mut(i).copy_from_slice(&mat_vec(&self.rotation, &p));
        }
        Ok(out)
    }
}

/// Relabeling of `N` particles: new index `i` takes old index `mapping[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self, GeometryError> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(GeometryError::NotBijection(n));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn random(n: usize, rng: &mut impl rand::Rng) -> Self {
        use rand::seq::SliceRandom;
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// Where old index `old` lands after relabeling.
    pub fn new_index(&self, old: usize) -> usize {
        self.inverse().mapping[old]
    }

    /// Permutes the rows of `a` (`P·a`).
    pub fn apply_rows(&self, a: &Tensor) -> Result<Tensor, GeometryError> {
        Ok(a.permute_rows(&self.mapping)?)
    }

    /// Permutes rows and columns of a square matrix (`P·a·Pᵀ`).
    pub fn apply_square(&self, a: &Tensor) -> Result<Tensor, GeometryError> {
        let rows = a.permute_rows(&self.mapping)?;
        let cols = rows.transpose()?.permute_rows(&self.mapping)?;
        Ok(cols.transpose()?)
    }

    pub fn apply_slice<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.mapping.iter().map(|&m| items[m].clone()).collect()
    }
}

/// Largest change in any pairwise distance between two point sets.
pub fn pairwise_distance_defect(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows();
    let dist = |x: &Tensor, i: usize, j: usize| {
        (0..3)
            .map(|k| (x.at(i, k) - x.at(j, k)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((dist(a, i, j) - dist(b, i, j)).abs());
        }
    }
    worst
}

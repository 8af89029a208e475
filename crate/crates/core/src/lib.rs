//! PAINET: an energy-derived all-pair attention encoder with a parallel
//! SE(3)-equivariant decoder for 3D multi-body trajectory prediction.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` arrays and reverse-mode differentiation
//! - [`geometry`]: rigid motions and permutations used by the symmetry checks
//! - [`energy`]: the latent-structure energy and its descent iterate
//! - [`attention`]: the attention layer (pairwise and matrix forms) and encoder unroll
//! - [`decoder`]: EGNN layers and the per-step parallel decoder
//! - [`model`]: end-to-end assembly, training, and the model file format
//! - [`data`]: synthetic spring + Coulomb simulator and the trajectory file format
//! - [`metrics`]: F-MSE / A-MSE and the scaling probe
//! - [`verify`]: property suites exposed by the command line

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod data;
pub mod decoder;
pub mod energy;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod verify;

pub use tensor::{Tape, Tensor, TensorError, Var};

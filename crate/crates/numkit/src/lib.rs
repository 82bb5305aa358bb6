//! Minimal dense-tensor substrate: row-major tensors, a differentiation tape,
//! seeded randomness, AdamW, and a finite-difference gradient oracle.

mod error;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod rng;
mod scalar;
pub mod tape;
mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{grad_check, GradCheck};
pub use kernels::attention::NeighborTable;
pub use kernels::image::{PatchGeometry, ResizeGeometry};
pub use params::{AdamW, AdamWConfig, Binding, ParamId, ParamStore};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul_plain, numel, Tensor};

/// Tensor filled with `U(lo, hi)` draws.
pub fn rng_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let data = (0..numel(shape)).map(|_| T::from_f64(rng.uniform_range(lo, hi))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Tensor filled with `N(0, std^2)` draws.
pub fn rng_normal<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let data = (0..numel(shape)).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

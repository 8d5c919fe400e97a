//! Minimal deterministic tensor runtime.
//!
//! [`Tensor`] is a plain shape + f32 buffer used for parameter storage.
//! Differentiation happens on a per-step [`Graph`] (see [`graph`]); the
//! [`optim`] module provides AdamW with per-group ascent support.

pub mod gradcheck;
mod graph;
mod kernels;
pub mod optim;

pub use graph::{Graph, NodeId};
pub use kernels::{fast_exp, gemm_nn, gemm_nt, gemm_tn, sigmoid};

use crate::error::{Error, Result};
use rand::RngExt;

/// Dense row-major f32 tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                details: format!("shape {:?} does not hold {} values", shape, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    /// Gaussian init via Box-Muller, deterministic for a given rng state.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut impl rand::Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u1: f32 = rng.random_range(f32::EPSILON..1.0);
                let u2: f32 = rng.random_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos() * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut impl rand::Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }
}

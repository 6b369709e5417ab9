//! Minimal differentiable-computation substrate.
//!
//! A [`tape::Tape`] records forward operations on dynamic-dimensional
//! arrays and replays them in reverse for gradients. The layer set is
//! exactly what the two network stages need: dense, 2-D convolution,
//! nearest-upsample, layer/group normalization, multi-head self-attention,
//! and GELU/SiLU activations. Training runs in f32; gradient verification
//! runs the same generic code in f64.

pub mod adam;
pub mod bundle;
pub mod embed;
pub mod gradcheck;
pub mod layers;
pub mod tape;

pub use adam::{adam_step, AdamParams, AdamState};
pub use bundle::{ArchDescriptor, ModelBundle, TrainMeta};
pub use embed::time_embed;
pub use gradcheck::{grad_check, grad_check_in, grad_check_ref, scalarize};
pub use layers::{Binding, Conv2d, Dense, GroupNorm, LayerNorm, Mhsa, ParamId, ParamSet};
pub use tape::{Tape, Var};

use ndarray::Array4;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("tensor dimensions must all be at least 1, got {0:?}")]
    DegenerateShape(Vec<usize>),
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("embedding dimension must be even, got {0}")]
    OddEmbedDim(usize),
    #[error("time step {t} outside [0, {max}]")]
    TimeOutOfRange { t: usize, max: usize },
    #[error("weight/gradient/state length mismatch: {weights} weights, {grads} grads, {state} state")]
    LengthMismatch { weights: usize, grads: usize, state: usize },
    #[error("non-finite intermediate during {0}")]
    NonFiniteIntermediate(String),
    #[error("model bundle malformed: {0}")]
    BadBundle(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Element type of the substrate: f32 for training, f64 for verification.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn cast(v: f64) -> f32 {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn cast(v: f64) -> f64 {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A 4-D tensor (batch, channels, rows, cols) with an autodiff opt-in flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<A: Scalar = f32> {
    data: Array4<A>,
    pub requires_grad: bool,
}

impl<A: Scalar> Tensor4<A> {
    /// Validates that every dimension is at least 1 and every value finite.
    pub fn new(data: Array4<A>) -> Result<Tensor4<A>, NnError> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(NnError::DegenerateShape(data.shape().to_vec()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(Tensor4 { data, requires_grad: false })
    }

    pub fn with_grad(mut self) -> Tensor4<A> {
        self.requires_grad = true;
        self
    }

    pub fn data(&self) -> &Array4<A> {
        &self.data
    }

    pub fn into_data(self) -> Array4<A> {
        self.data
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

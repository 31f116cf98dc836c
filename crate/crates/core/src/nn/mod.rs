//! Minimal CNN machinery: layers, networks, losses, SGD.
//!
//! Everything is generic over [`Scalar`] so the production pipeline can run
//! in `f32` while numerical tests instantiate the same code in `f64`.
//! Networks hold parameters only; per-batch caches live on an external
//! [`network::Tape`], so a frozen network can be evaluated from many threads
//! at once.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod sgd;

pub use layers::{Conv2d, Dropout, Fc, Flatten, Layer, MaxPool, Relu, Softmax, TConv2d};
pub use network::{Network, Tape};

use ndarray::{Array2, Array4};

/// Element type of all tensors in a network.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn cast_from(v: f64) -> Self;
    fn cast_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    #[inline]
    fn cast_from(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn cast_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    #[inline]
    fn cast_from(v: f64) -> Self {
        v
    }
    #[inline]
    fn cast_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Caches for backprop; dropout samples a fresh mask from the given rng.
    Train,
    /// No caches, dropout inactive, deterministic.
    Eval,
}

/// Activations flowing between layers: image-shaped or flat.
#[derive(Debug, Clone)]
pub enum TensorBatch<E: Scalar> {
    Nchw(Array4<E>),
    Nd(Array2<E>),
}

impl<E: Scalar> TensorBatch<E> {
    pub fn batch_len(&self) -> usize {
        match self {
            TensorBatch::Nchw(a) => a.shape()[0],
            TensorBatch::Nd(a) => a.shape()[0],
        }
    }

    pub fn as_nchw(&self) -> Option<&Array4<E>> {
        match self {
            TensorBatch::Nchw(a) => Some(a),
            TensorBatch::Nd(_) => None,
        }
    }

    pub fn as_nd(&self) -> Option<&Array2<E>> {
        match self {
            TensorBatch::Nd(a) => Some(a),
            TensorBatch::Nchw(_) => None,
        }
    }

    pub fn into_nd(self) -> Option<Array2<E>> {
        match self {
            TensorBatch::Nd(a) => Some(a),
            TensorBatch::Nchw(_) => None,
        }
    }

    pub fn into_nchw(self) -> Option<Array4<E>> {
        match self {
            TensorBatch::Nchw(a) => Some(a),
            TensorBatch::Nd(_) => None,
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<E: Scalar> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: Vec<E>,
}

impl<E: Scalar> Param<E> {
    pub fn zeros(name: &'static str, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![E::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// The flattened bottleneck of the autoencoder: the manipulation action
/// space. Values are post-ReLU activations in channel-major (c, y, x) order,
/// matching the flatten layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck(pub Vec<f32>);

impl Bottleneck {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

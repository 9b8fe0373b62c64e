//! A small reverse-mode differentiation layer.
//!
//! Values live in row-major [`Tensor`]s. A [`Graph`] records every operation
//! of one forward pass as a node; [`Graph::backward`] walks the nodes in
//! reverse and accumulates gradients. Learnable state is kept outside the
//! graph in a [`ParamStore`], and each forward pass binds the parameters it
//! touches as leaf nodes.
//!
//! Everything is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` wherever gradients are checked against finite
//! differences.
//!
//! ```
//! use neural_scoring::substrate::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::<f64>::new();
//! let w = store.insert("w", Tensor::new(vec![2, 1], vec![3.0, -1.0]).unwrap()).unwrap();
//!
//! let mut g = Graph::new(&store);
//! let x = g.constant(Tensor::new(vec![1, 2], vec![2.0, 5.0]).unwrap());
//! let wv = g.param(w);
//! let y = g.matmul(x, wv).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//!
//! assert_eq!(g.value(loss).data(), &[1.0]);
//! assert_eq!(grads.param(w).unwrap().data(), &[2.0, 5.0]);
//! ```

mod attention;
mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{ensure, Result};

pub use attention::{ffn, linear, masked_mha, sinusoidal_pe, FeedForward, Linear, MhaWeights};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckFailure, GradCheckReport};
pub use graph::{Backward, ConvGeom, Graph, Var, PROB_CLAMP};
pub use optim::{adam_step, Adam, AdamState};
pub use params::{Gradients, ParamId, ParamStore, Parameter};

/// Floating-point element type of tensors: implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Additive pre-softmax bias for disallowed attention pairs.
    fn mask_bias() -> Self {
        lit(-1e9)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Shape,
            "shape {:?} needs {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `[rows.len(), width]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == width), Shape, "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension, treating a 1-D tensor as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.data.len(),
            Shape,
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

//! Differentiable tensor operations behind a backend-neutral trait.
//!
//! Network blocks are written once against [`Ops`]. [`Eager`] evaluates
//! values directly and frees intermediates as soon as they are dropped;
//! [`Tape`] records every operation for reverse-mode differentiation.

pub mod kernels;
mod eager;
mod tape;

pub use eager::Eager;
pub use tape::{Gradients, Tape, Var};

use crate::params::ParamId;
use crate::tensor::{Scalar, Shape, Tensor};

pub trait Ops<T: Scalar> {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    fn shape(&self, v: &Self::V) -> Shape {
        self.value(v).shape()
    }

    /// Input that never receives a gradient.
    fn constant(&mut self, t: Tensor<T>) -> Self::V;

    fn param(&mut self, id: ParamId) -> Self::V;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, pad: usize) -> Self::V;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// `a * b` where `b` may have unit dims broadcast against `a`.
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, s: T) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, s: T) -> Self::V;
    fn abs(&mut self, a: &Self::V) -> Self::V;

    fn leaky_relu(&mut self, a: &Self::V, slope: T) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;

    fn concat(&mut self, parts: &[Self::V]) -> Self::V;
    fn avg_pool(&mut self, a: &Self::V, factor: usize) -> Self::V;
    fn upsample_nearest(&mut self, a: &Self::V, factor: usize) -> Self::V;

    fn global_avg_pool(&mut self, a: &Self::V) -> Self::V;
    fn global_max_pool(&mut self, a: &Self::V) -> Self::V;
    fn channel_mean(&mut self, a: &Self::V) -> Self::V;
    fn channel_max(&mut self, a: &Self::V) -> Self::V;

    /// Valid correlation of every row with a fixed 1-D kernel.
    fn filter_rows(&mut self, a: &Self::V, k: &[T]) -> Self::V;
    /// Valid correlation of every column with a fixed 1-D kernel.
    fn filter_cols(&mut self, a: &Self::V, k: &[T]) -> Self::V;

    /// Mean of all elements as a `[1, 1, 1, 1]` tensor.
    fn mean_all(&mut self, a: &Self::V) -> Self::V;

    fn scalar(&self, v: &Self::V) -> T {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }
}

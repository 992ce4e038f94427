use std::rc::Rc;

use super::kernels as k;
use super::Ops;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Direct evaluation without gradient bookkeeping.
pub struct Eager<'a, T> {
    store: &'a ParamStore<T>,
    cache: Vec<Option<Rc<Tensor<T>>>>,
}

impl<'a, T: Scalar> Eager<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            cache: vec![None; store.len()],
        }
    }
}

fn wrap<T>(t: Tensor<T>) -> Rc<Tensor<T>> {
    Rc::new(t)
}

impl<T: Scalar> Ops<T> for Eager<'_, T> {
    type V = Rc<Tensor<T>>;

    fn value<'b>(&'b self, v: &'b Self::V) -> &'b Tensor<T> {
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Self::V {
        wrap(t)
    }

    fn param(&mut self, id: ParamId) -> Self::V {
        self.cache[id.0]
            .get_or_insert_with(|| Rc::new(self.store.get(id).clone()))
            .clone()
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, pad: usize) -> Self::V {
        wrap(k::conv2d(x, w, b.map(|b| &**b), pad))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        wrap(a.zip_map(b, |x, y| x + y))
    }

    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        wrap(a.zip_map(b, |x, y| x - y))
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        wrap(k::mul_broadcast(a, b))
    }

    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        wrap(a.zip_map(b, |x, y| x / y))
    }

    fn scale(&mut self, a: &Self::V, s: T) -> Self::V {
        wrap(a.map(|x| x * s))
    }

    fn add_scalar(&mut self, a: &Self::V, s: T) -> Self::V {
        wrap(a.map(|x| x + s))
    }

    fn abs(&mut self, a: &Self::V) -> Self::V {
        wrap(a.map(|x| x.abs()))
    }

    fn leaky_relu(&mut self, a: &Self::V, slope: T) -> Self::V {
        wrap(a.map(|x| if x > T::zero() { x } else { x * slope }))
    }

    fn sigmoid(&mut self, a: &Self::V) -> Self::V {
        wrap(a.map(sigmoid))
    }

    fn concat(&mut self, parts: &[Self::V]) -> Self::V {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &**p).collect();
        wrap(k::concat_channels(&refs))
    }

    fn avg_pool(&mut self, a: &Self::V, factor: usize) -> Self::V {
        wrap(k::avg_pool(a, factor))
    }

    fn upsample_nearest(&mut self, a: &Self::V, factor: usize) -> Self::V {
        wrap(k::upsample_nearest(a, factor))
    }

    fn global_avg_pool(&mut self, a: &Self::V) -> Self::V {
        wrap(k::global_avg_pool(a))
    }

    fn global_max_pool(&mut self, a: &Self::V) -> Self::V {
        wrap(k::global_max_pool(a).0)
    }

    fn channel_mean(&mut self, a: &Self::V) -> Self::V {
        wrap(k::channel_mean(a))
    }

    fn channel_max(&mut self, a: &Self::V) -> Self::V {
        wrap(k::channel_max(a).0)
    }

    fn filter_rows(&mut self, a: &Self::V, kernel: &[T]) -> Self::V {
        wrap(k::filter_rows(a, kernel))
    }

    fn filter_cols(&mut self, a: &Self::V, kernel: &[T]) -> Self::V {
        wrap(k::filter_cols(a, kernel))
    }

    fn mean_all(&mut self, a: &Self::V) -> Self::V {
        wrap(Tensor::from_vec([1, 1, 1, 1], vec![a.mean()]))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

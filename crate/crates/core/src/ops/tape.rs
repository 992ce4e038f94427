use super::eager::sigmoid;
use super::kernels as k;
use super::Ops;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a recorded value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, pad: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Concat(Vec<Var>),
    AvgPool(Var, usize),
    Upsample(Var, usize),
    GlobalAvg(Var),
    GlobalMax(Var, Vec<usize>),
    ChannelMean(Var),
    ChannelMax(Var, Vec<usize>),
    FilterRows(Var, Vec<T>),
    FilterCols(Var, Vec<T>),
    MeanAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<'a, T> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    vars: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter, or `None` if it did not take part in the forward pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].as_ref()
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.params[id.0].as_mut()
    }

    /// Gradient of a [`Tape::variable`] input.
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    /// Input that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// Back-propagates from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.val(out).len(), 1, "backward needs a scalar output");
        let n = out.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.val(out).shape(), T::one()));
        let mut params: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Param(id) => params[id.0] = Some(g),
                Op::Conv { x, w, b, pad } => {
                    let (gx, gw, gb) =
                        k::conv2d_backward(self.val(*x), self.val(*w), *pad, &g, self.rg(*x));
                    if let Some(gx) = gx {
                        send(*x, gx, &mut grads);
                    }
                    send(*w, gw, &mut grads);
                    if let Some(b) = b {
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (ga, gb) = k::mul_broadcast_backward(self.val(*a), self.val(*b), &g);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let ga = g.zip_map(bv, |gv, bv| gv / bv);
                    let gb = Tensor::from_fn(bv.shape(), |idx| {
                        let o = bv.offset(idx);
                        let (gv, x, y) = (g.data()[o], av.data()[o], bv.data()[o]);
                        -gv * x / (y * y)
                    });
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    send(*a, g.map(|v| v * s), &mut grads);
                }
                Op::AddScalar(a) => send(*a, g, &mut grads),
                Op::Abs(a) => {
                    let x = self.val(*a);
                    send(*a, g.zip_map(x, |gv, xv| gv * sign(xv)), &mut grads);
                }
                Op::LeakyRelu(a, slope) => {
                    let (x, slope) = (self.val(*a), *slope);
                    let ga = g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { gv * slope });
                    send(*a, ga, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)), &mut grads);
                }
                Op::Concat(parts) => {
                    let chans: Vec<usize> = parts.iter().map(|p| self.val(*p).channels()).collect();
                    for (p, gp) in parts.iter().zip(k::split_channels(&g, &chans)) {
                        send(*p, gp, &mut grads);
                    }
                }
                Op::AvgPool(a, f) => {
                    let shape = self.val(*a).shape();
                    send(*a, k::avg_pool_backward(&g, *f, shape), &mut grads);
                }
                Op::Upsample(a, f) => send(*a, k::upsample_nearest_backward(&g, *f), &mut grads),
                Op::GlobalAvg(a) => {
                    let shape = self.val(*a).shape();
                    send(*a, k::global_avg_pool_backward(&g, shape), &mut grads);
                }
                Op::GlobalMax(a, arg) | Op::ChannelMax(a, arg) => {
                    let shape = self.val(*a).shape();
                    send(*a, k::scatter_argmax(&g, arg, shape), &mut grads);
                }
                Op::ChannelMean(a) => {
                    let shape = self.val(*a).shape();
                    send(*a, k::channel_mean_backward(&g, shape), &mut grads);
                }
                Op::FilterRows(a, kern) => {
                    let shape = self.val(*a).shape();
                    send(*a, k::filter_rows_backward(&g, kern, shape), &mut grads);
                }
                Op::FilterCols(a, kern) => {
                    let shape = self.val(*a).shape();
                    send(*a, k::filter_cols_backward(&g, kern, shape), &mut grads);
                }
                Op::MeanAll(a) => {
                    let shape: Shape = self.val(*a).shape();
                    let inv = T::one() / T::from_usize(self.val(*a).len()).unwrap();
                    send(*a, Tensor::full(shape, g.data()[0] * inv), &mut grads);
                }
            }
        }
        Gradients {
            params,
            vars: leaves,
        }
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> Ops<T> for Tape<'_, T> {
    type V = Var;

    fn value<'b>(&'b self, v: &'b Var) -> &'b Tensor<T> {
        self.val(*v)
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, pad: usize) -> Var {
        let out = k::conv2d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), pad);
        let rg = self.rg(*x) || self.rg(*w) || b.is_some_and(|b| self.rg(*b));
        self.push(
            out,
            Op::Conv {
                x: *x,
                w: *w,
                b: b.copied(),
                pad,
            },
            rg,
        )
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).zip_map(self.val(*b), |x, y| x + y);
        self.binary(*a, *b, v, Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).zip_map(self.val(*b), |x, y| x - y);
        self.binary(*a, *b, v, Op::Sub(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let v = k::mul_broadcast(self.val(*a), self.val(*b));
        self.binary(*a, *b, v, Op::Mul(*a, *b))
    }

    fn div(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).zip_map(self.val(*b), |x, y| x / y);
        self.binary(*a, *b, v, Op::Div(*a, *b))
    }

    fn scale(&mut self, a: &Var, s: T) -> Var {
        let v = self.val(*a).map(|x| x * s);
        self.unary(*a, v, Op::Scale(*a, s))
    }

    fn add_scalar(&mut self, a: &Var, s: T) -> Var {
        let v = self.val(*a).map(|x| x + s);
        self.unary(*a, v, Op::AddScalar(*a))
    }

    fn abs(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(|x| x.abs());
        self.unary(*a, v, Op::Abs(*a))
    }

    fn leaky_relu(&mut self, a: &Var, slope: T) -> Var {
        let v = self
            .val(*a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.unary(*a, v, Op::LeakyRelu(*a, slope))
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(sigmoid);
        self.unary(*a, v, Op::Sigmoid(*a))
    }

    fn concat(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.val(*p)).collect();
        let v = k::concat_channels(&refs);
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::Concat(parts.to_vec()), rg)
    }

    fn avg_pool(&mut self, a: &Var, factor: usize) -> Var {
        let v = k::avg_pool(self.val(*a), factor);
        self.unary(*a, v, Op::AvgPool(*a, factor))
    }

    fn upsample_nearest(&mut self, a: &Var, factor: usize) -> Var {
        let v = k::upsample_nearest(self.val(*a), factor);
        self.unary(*a, v, Op::Upsample(*a, factor))
    }

    fn global_avg_pool(&mut self, a: &Var) -> Var {
        let v = k::global_avg_pool(self.val(*a));
        self.unary(*a, v, Op::GlobalAvg(*a))
    }

    fn global_max_pool(&mut self, a: &Var) -> Var {
        let (v, arg) = k::global_max_pool(self.val(*a));
        self.unary(*a, v, Op::GlobalMax(*a, arg))
    }

    fn channel_mean(&mut self, a: &Var) -> Var {
        let v = k::channel_mean(self.val(*a));
        self.unary(*a, v, Op::ChannelMean(*a))
    }

    fn channel_max(&mut self, a: &Var) -> Var {
        let (v, arg) = k::channel_max(self.val(*a));
        self.unary(*a, v, Op::ChannelMax(*a, arg))
    }

    fn filter_rows(&mut self, a: &Var, kern: &[T]) -> Var {
        let v = k::filter_rows(self.val(*a), kern);
        self.unary(*a, v, Op::FilterRows(*a, kern.to_vec()))
    }

    fn filter_cols(&mut self, a: &Var, kern: &[T]) -> Var {
        let v = k::filter_cols(self.val(*a), kern);
        self.unary(*a, v, Op::FilterCols(*a, kern.to_vec()))
    }

    fn mean_all(&mut self, a: &Var) -> Var {
        let v = Tensor::from_vec([1, 1, 1, 1], vec![self.val(*a).mean()]);
        self.unary(*a, v, Op::MeanAll(*a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Eager;

    #[test]
    fn product_rule_through_shared_input() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.variable(Tensor::from_vec([1, 1, 1, 2], vec![3.0, -2.0]));
        let y = tape.mul(&x, &x);
        let m = tape.mean_all(&y);
        let g = tape.backward(m);
        // d/dx mean(x^2) = x
        assert_eq!(g.var(x).unwrap().data(), &[3.0, -2.0]);
    }

    #[test]
    fn tape_and_eager_agree_bitwise() {
        let mut store = ParamStore::<f32>::new();
        let w = store.push("w", Tensor::from_fn([2, 3, 3, 3], |[a, b, c, d]| {
            ((a * 7 + b * 5 + c * 3 + d) as f32 * 0.37).sin()
        }));
        let x = Tensor::from_fn([1, 3, 5, 5], |[_, c, y, xx]| ((c + y * xx) as f32 * 0.1).cos());
        let run = |ops: &mut dyn FnMut(Tensor<f32>) -> Tensor<f32>| ops(x.clone());
        let eager_out = run(&mut |x| {
            let mut e = Eager::new(&store);
            let xv = e.constant(x);
            let wv = e.param(w);
            let y = e.conv2d(&xv, &wv, None, 1);
            let y = e.sigmoid(&y);
            (*y).clone()
        });
        let tape_out = run(&mut |x| {
            let mut t = Tape::new(&store);
            let xv = t.constant(x);
            let wv = t.param(w);
            let y = t.conv2d(&xv, &wv, None, 1);
            let y = t.sigmoid(&y);
            t.value(&y).clone()
        });
        assert_eq!(eager_out, tape_out);
    }
}

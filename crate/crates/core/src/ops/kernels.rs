//! Forward and backward kernels shared by both backends.
//!
//! Every reduction runs in a fixed sequential order, so results are
//! bit-reproducible for a given input.

use crate::tensor::{Scalar, Shape, Tensor};

/// Output spatial size of a stride-1 convolution.
pub fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> (usize, usize) {
    (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw)
}

/// Unfolds one sample (`c × h × w`) into a `(c·kh·kw) × (oh·ow)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    col: &mut [T],
) {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, pad);
    let npix = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * npix..(row + 1) * npix];
                // valid ox range: 0 <= ox + kx - pad < w
                let x_lo = pad.saturating_sub(kx).min(ow);
                let x_hi = (w + pad).saturating_sub(kx).min(ow).max(x_lo);
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                    line[..x_lo].fill(T::zero());
                    line[x_hi..].fill(T::zero());
                    if x_lo == x_hi {
                        continue;
                    }
                    let sx = x_lo + kx - pad;
                    line[x_lo..x_hi].copy_from_slice(&src[sx..sx + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Folds a column matrix back, accumulating into `x` (inverse-adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    x: &mut [T],
) {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, pad);
    let npix = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * npix..(row + 1) * npix];
                let x_lo = pad.saturating_sub(kx).min(ow);
                let x_hi = (w + pad).saturating_sub(kx).min(ow).max(x_lo);
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h || x_lo == x_hi {
                        continue;
                    }
                    let dst = &mut plane[(iy - pad) * w..(iy - pad + 1) * w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let sx = x_lo + kx - pad;
                    for (d, &s) in dst[sx..sx + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&line[x_lo..x_hi])
                    {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, pad: usize) -> bool {
    kh == 1 && kw == 1 && pad == 0
}

/// Stride-1 zero-padded convolution. `w` is `[out, in, kh, kw]`, `b` is `[1, out, 1, 1]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, pad: usize) -> Tensor<T> {
    let [n, c, h, wd] = x.shape();
    let [co, ci, kh, kw] = w.shape();
    assert_eq!(c, ci, "conv2d: input has {c} channels, kernel expects {ci}");
    if let Some(b) = b {
        assert_eq!(b.shape(), [1, co, 1, 1], "conv2d: bias shape");
    }
    let (oh, ow) = conv_out_dims(h, wd, kh, kw, pad);
    let npix = oh * ow;
    let rows = ci * kh * kw;
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let pointwise = is_pointwise(kh, kw, pad);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); rows * npix] };
    for s in 0..n {
        let xs = x.sample(s);
        let lhs: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, c, h, wd, kh, kw, pad, &mut col);
            &col
        };
        let out_s = out.sample_mut(s);
        if let Some(b) = b {
            for (o, chunk) in out_s.chunks_mut(npix).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            co,
            rows,
            npix,
            T::one(),
            w.data(),
            rows as isize,
            1,
            lhs,
            npix as isize,
            1,
            beta,
            out_s,
            npix as isize,
            1,
        );
    }
    out
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c, h, wd] = x.shape();
    let [co, ci, kh, kw] = w.shape();
    let (oh, ow) = conv_out_dims(h, wd, kh, kw, pad);
    let npix = oh * ow;
    let rows = ci * kh * kw;
    let pointwise = is_pointwise(kh, kw, pad);
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros([1, co, 1, 1]);
    let mut gx = if need_input { Some(Tensor::zeros(x.shape())) } else { None };
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); rows * npix] };
    let mut dcol = if pointwise || !need_input {
        Vec::new()
    } else {
        vec![T::zero(); rows * npix]
    };
    for s in 0..n {
        let xs = x.sample(s);
        let go = grad_out.sample(s);
        for (o, chunk) in go.chunks(npix).enumerate() {
            let acc: T = chunk.iter().copied().sum();
            gb.data_mut()[o] = gb.data()[o] + acc;
        }
        let lhs: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, c, h, wd, kh, kw, pad, &mut col);
            &col
        };
        // gw[o, r] += sum_p go[o, p] * col[r, p]
        T::gemm(
            co,
            npix,
            rows,
            T::one(),
            go,
            npix as isize,
            1,
            lhs,
            1,
            npix as isize,
            T::one(),
            gw.data_mut(),
            rows as isize,
            1,
        );
        if let Some(gx) = gx.as_mut() {
            // dcol[r, p] = sum_o w[o, r] * go[o, p]
            if pointwise {
                T::gemm(
                    rows,
                    co,
                    npix,
                    T::one(),
                    w.data(),
                    1,
                    rows as isize,
                    go,
                    npix as isize,
                    1,
                    T::zero(),
                    gx.sample_mut(s),
                    npix as isize,
                    1,
                );
            } else {
                T::gemm(
                    rows,
                    co,
                    npix,
                    T::one(),
                    w.data(),
                    1,
                    rows as isize,
                    go,
                    npix as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    npix as isize,
                    1,
                );
                col2im(&dcol, c, h, wd, kh, kw, pad, gx.sample_mut(s));
            }
        }
    }
    (gx, gw, gb)
}

pub fn avg_pool<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / f, w / f);
    let inv = T::one() / T::from_usize(f * f).unwrap();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..f {
                    let row = &src[(oy * f + dy) * w + ox * f..(oy * f + dy) * w + ox * f + f];
                    for &v in row {
                        acc = acc + v;
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(grad: &Tensor<T>, f: usize, in_shape: Shape) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (h / f, w / f);
    let inv = T::one() / T::from_usize(f * f).unwrap();
    let mut gx = Tensor::zeros(in_shape);
    for nc in 0..n * c {
        let g = &grad.data()[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut gx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for y in 0..oh * f {
            for x in 0..ow * f {
                dst[y * w + x] = g[(y / f) * ow + x / f] * inv;
            }
        }
    }
    gx
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * f, w * f);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / f) * w + xx / f];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(grad: &Tensor<T>, f: usize) -> Tensor<T> {
    let [n, c, oh, ow] = grad.shape();
    let (h, w) = (oh / f, ow / f);
    let mut gx = Tensor::zeros([n, c, h, w]);
    for nc in 0..n * c {
        let g = &grad.data()[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut gx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let d = &mut dst[(y / f) * w + xx / f];
                *d = *d + g[y * ow + xx];
            }
        }
    }
    gx
}

/// Offsets into a broadcast operand whose dims are each either equal to `shape` or 1.
fn broadcast_strides(shape: Shape, b: Shape) -> [usize; 4] {
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        assert!(
            b[d] == shape[d] || b[d] == 1,
            "broadcast: {b:?} does not broadcast to {shape:?}"
        );
        strides[d] = if b[d] == 1 { 0 } else { acc };
        acc *= b[d];
    }
    strides
}

fn for_each_broadcast(shape: Shape, b: Shape, mut f: impl FnMut(usize, usize)) {
    let st = broadcast_strides(shape, b);
    let mut i = 0;
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            for y in 0..shape[2] {
                let base = n * st[0] + c * st[1] + y * st[2];
                for x in 0..shape[3] {
                    f(i, base + x * st[3]);
                    i += 1;
                }
            }
        }
    }
}

/// Elementwise `a * b` with `b` broadcast over its unit dims.
pub fn mul_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(a.shape());
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast(a.shape(), b.shape(), |i, j| od[i] = ad[i] * bd[j]);
    out
}

pub fn mul_broadcast_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    {
        let gad = ga.data_mut();
        let gbd = gb.data_mut();
        for_each_broadcast(a.shape(), b.shape(), |i, j| {
            gad[i] = gd[i] * bd[j];
            gbd[j] = gbd[j] + gd[i] * ad[i];
        });
    }
    (ga, gb)
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let [n, _, h, w] = parts[0].shape();
    let total: usize = parts
        .iter()
        .map(|p| {
            let s = p.shape();
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat: spatial/batch mismatch");
            s[1]
        })
        .sum();
    let mut data = Vec::with_capacity(n * total * h * w);
    for s in 0..n {
        for p in parts {
            data.extend_from_slice(p.sample(s));
        }
    }
    Tensor::from_vec([n, total, h, w], data)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let [n, _, h, w] = grad.shape();
    let plane = h * w;
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
    for s in 0..n {
        let mut start = 0;
        let src = grad.sample(s);
        for (k, &c) in channels.iter().enumerate() {
            outs[k].extend_from_slice(&src[start * plane..(start + c) * plane]);
            start += c;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec([n, c, h, w], d))
        .collect()
}

/// Mean over spatial dims: `[n, c, h, w] -> [n, c, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(grad: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let [_, _, h, w] = in_shape;
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut gx = Tensor::zeros(in_shape);
    for (p, &g) in gx.data_mut().chunks_mut(h * w).zip(grad.data()) {
        p.fill(g * inv);
    }
    gx
}

/// Max over spatial dims with the first maximal position as argmax.
pub fn global_max_pool<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let mut vals = Vec::with_capacity(n * c);
    let mut arg = Vec::with_capacity(n * c);
    for (k, p) in x.data().chunks(h * w).enumerate() {
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        vals.push(p[best]);
        arg.push(k * h * w + best);
    }
    (Tensor::from_vec([n, c, 1, 1], vals), arg)
}

pub fn scatter_argmax<T: Scalar>(grad: &Tensor<T>, argmax: &[usize], in_shape: Shape) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_shape);
    for (&g, &i) in grad.data().iter().zip(argmax) {
        gx.data_mut()[i] = gx.data()[i] + g;
    }
    gx
}

/// Mean over channels: `[n, c, h, w] -> [n, 1, h, w]`.
pub fn channel_mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let inv = T::one() / T::from_usize(c).unwrap();
    let plane = h * w;
    let mut out = Tensor::zeros([n, 1, h, w]);
    for s in 0..n {
        let src = x.sample(s);
        let dst = out.sample_mut(s);
        for ch in 0..c {
            for (d, &v) in dst.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
                *d = *d + v;
            }
        }
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
    out
}

pub fn channel_mean_backward<T: Scalar>(grad: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let inv = T::one() / T::from_usize(c).unwrap();
    let plane = h * w;
    let mut gx = Tensor::zeros(in_shape);
    for s in 0..n {
        let g = grad.sample(s);
        let dst = gx.sample_mut(s);
        for ch in 0..c {
            for (d, &v) in dst[ch * plane..(ch + 1) * plane].iter_mut().zip(g) {
                *d = v * inv;
            }
        }
    }
    gx
}

/// Max over channels with the first maximal channel as argmax.
pub fn channel_max<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([n, 1, h, w]);
    let mut arg = vec![0usize; n * plane];
    for s in 0..n {
        let src = x.sample(s);
        let dst = out.sample_mut(s);
        for p in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if src[ch * plane + p] > src[best * plane + p] {
                    best = ch;
                }
            }
            dst[p] = src[best * plane + p];
            arg[s * plane + p] = s * c * plane + best * plane + p;
        }
    }
    (out, arg)
}

/// Valid 1-D correlation along the width axis.
pub fn filter_rows<T: Scalar>(x: &Tensor<T>, k: &[T]) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let ow = w + 1 - k.len();
    let mut out = Tensor::zeros([n, c, h, ow]);
    for (src, dst) in x.data().chunks(w).zip(out.data_mut().chunks_mut(ow)) {
        for (ox, d) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &kv) in k.iter().enumerate() {
                acc = acc + kv * src[ox + j];
            }
            *d = acc;
        }
    }
    out
}

pub fn filter_rows_backward<T: Scalar>(grad: &Tensor<T>, k: &[T], in_shape: Shape) -> Tensor<T> {
    let w = in_shape[3];
    let ow = grad.width();
    let mut gx = Tensor::zeros(in_shape);
    for (g, dst) in grad.data().chunks(ow).zip(gx.data_mut().chunks_mut(w)) {
        for (ox, &gv) in g.iter().enumerate() {
            for (j, &kv) in k.iter().enumerate() {
                dst[ox + j] = dst[ox + j] + kv * gv;
            }
        }
    }
    gx
}

/// Valid 1-D correlation along the height axis.
pub fn filter_cols<T: Scalar>(x: &Tensor<T>, k: &[T]) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let oh = h + 1 - k.len();
    let mut out = Tensor::zeros([n, c, oh, w]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * w)) {
        for oy in 0..oh {
            let line = &mut dst[oy * w..(oy + 1) * w];
            for (j, &kv) in k.iter().enumerate() {
                let row = &src[(oy + j) * w..(oy + j + 1) * w];
                for (d, &v) in line.iter_mut().zip(row) {
                    *d = *d + kv * v;
                }
            }
        }
    }
    out
}

pub fn filter_cols_backward<T: Scalar>(grad: &Tensor<T>, k: &[T], in_shape: Shape) -> Tensor<T> {
    let [_, _, h, w] = in_shape;
    let oh = grad.height();
    let mut gx = Tensor::zeros(in_shape);
    for (g, dst) in grad.data().chunks(oh * w).zip(gx.data_mut().chunks_mut(h * w)) {
        for oy in 0..oh {
            let line = &g[oy * w..(oy + 1) * w];
            for (j, &kv) in k.iter().enumerate() {
                let row = &mut dst[(oy + j) * w..(oy + j + 1) * w];
                for (d, &v) in row.iter_mut().zip(line) {
                    *d = *d + kv * v;
                }
            }
        }
    }
    gx
}

//! Training objectives: L1, SSIM and their weighted sum.
//!
//! Each loss exists in a graph form (generic over [`Ops`], used for
//! training) and a plain form over tensors (used for reporting).

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{Eager, Ops};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Weight of the SSIM term in the hybrid objective.
pub const DEFAULT_LAMBDA: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            v.push(format!("ssim window_size must be odd and >= 3 (got {})", self.window_size));
        }
        if !(self.sigma > 0.0) {
            v.push(format!("ssim sigma must be > 0 (got {})", self.sigma));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps.
    pub fn gaussian(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as f64;
        let taps: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - r;
                (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / total).collect()
    }
}

/// The three components of the hybrid objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ssim_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// `total` is always recomputed as `l1 + lambda * ssim_loss`.
    pub fn new(l1: f64, ssim_loss: f64, lambda: f64) -> Self {
        Self {
            l1,
            ssim_loss,
            total: l1 + lambda * ssim_loss,
            lambda,
        }
    }
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::pre(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_window(shape: [usize; 4], p: &SsimParams) -> Result<()> {
    p.validate()?;
    if shape[2] < p.window_size || shape[3] < p.window_size {
        return Err(Error::pre(format!(
            "image {}x{} is smaller than the {}x{} ssim window",
            shape[2], shape[3], p.window_size, p.window_size
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_graph<T: Scalar, O: Ops<T>>(ops: &mut O, r: &O::V, gt: &O::V) -> O::V {
    let d = ops.sub(r, gt);
    let a = ops.abs(&d);
    ops.mean_all(&a)
}

fn blur<T: Scalar, O: Ops<T>>(ops: &mut O, x: &O::V, taps: &[T]) -> O::V {
    let h = ops.filter_rows(x, taps);
    ops.filter_cols(&h, taps)
}

/// Mean SSIM over every valid window position of every channel, using
/// separable Gaussian filtering.
pub fn ssim_graph<T: Scalar, O: Ops<T>>(ops: &mut O, x: &O::V, y: &O::V, p: &SsimParams) -> O::V {
    let taps: Vec<T> = p.gaussian().into_iter().map(T::from_f64_lossy).collect();
    let c1 = T::from_f64_lossy(p.c1());
    let c2 = T::from_f64_lossy(p.c2());
    let two = T::from_f64_lossy(2.0);

    let mu_x = blur(ops, x, &taps);
    let mu_y = blur(ops, y, &taps);
    let xx = ops.mul(x, x);
    let yy = ops.mul(y, y);
    let xy = ops.mul(x, y);
    let e_xx = blur(ops, &xx, &taps);
    let e_yy = blur(ops, &yy, &taps);
    let e_xy = blur(ops, &xy, &taps);

    let mu_x2 = ops.mul(&mu_x, &mu_x);
    let mu_y2 = ops.mul(&mu_y, &mu_y);
    let mu_xy = ops.mul(&mu_x, &mu_y);
    let var_x = ops.sub(&e_xx, &mu_x2);
    let var_y = ops.sub(&e_yy, &mu_y2);
    let cov = ops.sub(&e_xy, &mu_xy);

    let a = ops.scale(&mu_xy, two);
    let a = ops.add_scalar(&a, c1);
    let b = ops.scale(&cov, two);
    let b = ops.add_scalar(&b, c2);
    let num = ops.mul(&a, &b);

    let c = ops.add(&mu_x2, &mu_y2);
    let c = ops.add_scalar(&c, c1);
    let d = ops.add(&var_x, &var_y);
    let d = ops.add_scalar(&d, c2);
    let den = ops.mul(&c, &d);

    let map = ops.div(&num, &den);
    ops.mean_all(&map)
}

/// `1 - SSIM`.
pub fn ssim_loss_graph<T: Scalar, O: Ops<T>>(ops: &mut O, x: &O::V, y: &O::V, p: &SsimParams) -> O::V {
    let s = ssim_graph(ops, x, y, p);
    let neg = ops.scale(&s, -T::one());
    ops.add_scalar(&neg, T::one())
}

/// Hybrid objective in graph form. Returns the differentiable total and the
/// breakdown of its components.
pub fn hybrid_graph<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    r: &O::V,
    gt: &O::V,
    lambda: f64,
    p: &SsimParams,
) -> Result<(O::V, LossBreakdown)> {
    let (rs, gs) = (ops.shape(r), ops.shape(gt));
    if rs != gs {
        return Err(Error::pre(format!("shape mismatch: {rs:?} vs {gs:?}")));
    }
    check_window(rs, p)?;
    if !(lambda >= 0.0) {
        return Err(Error::pre(format!("lambda must be >= 0, got {lambda}")));
    }
    let l1 = l1_graph(ops, r, gt);
    let sl = ssim_loss_graph(ops, r, gt, p);
    let weighted = ops.scale(&sl, T::from_f64_lossy(lambda));
    let total = ops.add(&l1, &weighted);
    let breakdown = LossBreakdown::new(
        ops.scalar(&l1).to_f64_lossy(),
        ops.scalar(&sl).to_f64_lossy(),
        lambda,
    );
    Ok((total, breakdown))
}

fn eval_scalar<T: Scalar>(
    r: &Tensor<T>,
    gt: &Tensor<T>,
    f: impl FnOnce(&mut Eager<'_, f64>, &Rc<Tensor<f64>>, &Rc<Tensor<f64>>) -> Rc<Tensor<f64>>,
) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut ops = Eager::new(&store);
    let a = ops.constant(r.cast());
    let b = ops.constant(gt.cast());
    let out = f(&mut ops, &a, &b);
    ops.scalar(&out)
}

/// Mean absolute difference over all elements, evaluated in double precision.
pub fn l1_loss<T: Scalar>(r: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_pair(r, gt)?;
    Ok(eval_scalar(r, gt, |ops, a, b| l1_graph(ops, a, b)))
}

/// Mean Gaussian-windowed SSIM over all channels, evaluated in double precision.
pub fn ssim_index<T: Scalar>(r: &Tensor<T>, gt: &Tensor<T>, p: &SsimParams) -> Result<f64> {
    check_pair(r, gt)?;
    check_window(r.shape(), p)?;
    Ok(eval_scalar(r, gt, |ops, a, b| ssim_graph(ops, a, b, p)))
}

pub fn ssim_loss<T: Scalar>(r: &Tensor<T>, gt: &Tensor<T>, p: &SsimParams) -> Result<f64> {
    Ok(1.0 - ssim_index(r, gt, p)?)
}

pub fn hybrid_loss<T: Scalar>(r: &Tensor<T>, gt: &Tensor<T>, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::pre(format!("lambda must be >= 0, got {lambda}")));
    }
    let p = SsimParams::default();
    Ok(LossBreakdown::new(l1_loss(r, gt)?, ssim_loss(r, gt, &p)?, lambda))
}

/// Direct per-window SSIM: every window's weighted statistics are computed
/// from scratch with centred moments. Slow; used only to cross-check
/// [`ssim_index`].
pub fn ssim_reference(r: &Tensor<f64>, gt: &Tensor<f64>, p: &SsimParams) -> Result<f64> {
    check_pair(r, gt)?;
    check_window(r.shape(), p)?;
    let g = p.gaussian();
    let k = p.window_size;
    let [n, c, h, w] = r.shape();
    let (c1, c2) = (p.c1(), p.c2());
    let mut total = 0.0;
    let mut count = 0usize;
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..=h - k {
                for ox in 0..=w - k {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            let wt = g[i] * g[j];
                            mx += wt * r.at([s, ch, oy + i, ox + j]);
                            my += wt * gt.at([s, ch, oy + i, ox + j]);
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wt = g[i] * g[j];
                            let dx = r.at([s, ch, oy + i, ox + j]) - mx;
                            let dy = gt.at([s, ch, oy + i, ox + j]) - my;
                            vx += wt * dx * dx;
                            vy += wt * dy * dy;
                            cxy += wt * dx * dy;
                        }
                    }
                    total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_img(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn l1_examples() {
        let a = rand_img([1, 3, 8, 8], 1);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let z = Tensor::<f64>::zeros([1, 3, 8, 8]);
        let o = Tensor::<f64>::full([1, 3, 8, 8], 0.1);
        assert!((l1_loss(&o, &z).unwrap() - 0.1).abs() < 1e-15);
        let b = rand_img([2, 3, 9, 7], 2);
        let c = rand_img([2, 3, 9, 7], 3);
        let mut brute = 0.0;
        for (x, y) in b.data().iter().zip(c.data()) {
            brute += (x - y).abs();
        }
        brute /= b.len() as f64;
        assert!((l1_loss(&b, &c).unwrap() - brute).abs() < 1e-12);
        assert!(l1_loss(&b, &a).is_err());
    }

    #[test]
    fn ssim_self_similarity_and_symmetry() {
        let p = SsimParams::default();
        let a = rand_img([1, 3, 16, 16], 4);
        let b = rand_img([1, 3, 16, 16], 5);
        assert!((ssim_index(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim_index(&a, &b, &p).unwrap(), ssim_index(&b, &a, &p).unwrap());
    }

    #[test]
    fn ssim_rejects_small_images_and_bad_windows() {
        let p = SsimParams::default();
        let a = rand_img([1, 1, 10, 16], 6);
        assert!(matches!(ssim_index(&a, &a, &p), Err(Error::Precondition(_))));
        let even = SsimParams { window_size: 4, ..p };
        let big = rand_img([1, 1, 16, 16], 7);
        assert!(matches!(ssim_index(&big, &big, &even), Err(Error::Config(_))));
    }

    #[test]
    fn ssim_loss_within_range() {
        let p = SsimParams::default();
        for seed in 0..10 {
            let a = rand_img([1, 3, 12, 12], 100 + seed);
            let b = rand_img([1, 3, 12, 12], 200 + seed).map(|v| 1.0 - v);
            let l = ssim_loss(&a, &b, &p).unwrap();
            assert!((0.0..=2.0).contains(&l), "{l}");
        }
        let a = rand_img([1, 3, 12, 12], 9);
        assert!(ssim_loss(&a, &a, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hybrid_examples() {
        assert_eq!(DEFAULT_LAMBDA, 0.2);
        let a = rand_img([1, 3, 12, 12], 10);
        let b = rand_img([1, 3, 12, 12], 11);
        let same = hybrid_loss(&a, &a, DEFAULT_LAMBDA).unwrap();
        assert!(same.total.abs() < 1e-12);
        let zero = hybrid_loss(&a, &b, 0.0).unwrap();
        assert_eq!(zero.total, zero.l1);
        let full = hybrid_loss(&a, &b, 0.2).unwrap();
        assert_eq!(full.total, full.l1 + 0.2 * full.ssim_loss);
        assert!(hybrid_loss(&a, &b, -1.0).is_err());
    }

    #[test]
    fn vectorized_ssim_matches_reference() {
        let p = SsimParams::default();
        let a = rand_img([1, 2, 16, 14], 12);
        let b = a.zip_map(&rand_img([1, 2, 16, 14], 13), |x, n| (x + 0.3 * n).min(1.0));
        let fast = ssim_index(&a, &b, &p).unwrap();
        let slow = ssim_reference(&a, &b, &p).unwrap();
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }
}

//! Fusion of the original, extracted and distilled feature maps.

use crate::error::Result;
use crate::ops::Ops;
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Scalar;

use super::attention::check_same_shapes;
use super::config::FusionMode;
use super::layers::ConvParams;

#[derive(Clone, Debug, PartialEq)]
pub struct RpfParams {
    /// Applied to `L_e - L_d`.
    pub residual: ConvParams,
    /// Back-projection of the fused feature.
    pub project: ConvParams,
    pub out: ConvParams,
}

impl RpfParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        b.scoped(name, |b| RpfParams {
            residual: ConvParams::build(b, "residual", channels, channels, 3),
            project: ConvParams::build(b, "project", channels, channels, 3),
            out: ConvParams::build(b, "out", channels, channels, 3),
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.residual.ids(), self.project.ids(), self.out.ids()].concat()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionParams {
    Rpf(RpfParams),
    /// 3×3 conv over `L_o + L_e + L_d`.
    Add(ConvParams),
    /// 1×1 conv over the `3C`-channel concatenation.
    Concat(ConvParams),
}

impl FusionParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, mode: FusionMode, channels: usize) -> Self {
        match mode {
            FusionMode::Rpf => FusionParams::Rpf(RpfParams::build(b, name, channels)),
            FusionMode::Add => FusionParams::Add(ConvParams::build(b, name, channels, channels, 3)),
            FusionMode::Concat => {
                FusionParams::Concat(ConvParams::build(b, name, 3 * channels, channels, 1))
            }
        }
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            FusionParams::Rpf(_) => FusionMode::Rpf,
            FusionParams::Add(_) => FusionMode::Add,
            FusionParams::Concat(_) => FusionMode::Concat,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            FusionParams::Rpf(p) => p.ids(),
            FusionParams::Add(c) | FusionParams::Concat(c) => c.ids().to_vec(),
        }
    }
}

/// `R_ed = L_e - L_d`.
pub fn rpf_residual<T: Scalar, O: Ops<T>>(ops: &mut O, l_e: &O::V, l_d: &O::V) -> O::V {
    ops.sub(l_e, l_d)
}

/// `F_ed = conv(L_e - L_d) + L_e`, `L* = conv(L_o - conv(F_ed))`.
pub fn rpf_fuse<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    l_o: &O::V,
    l_e: &O::V,
    l_d: &O::V,
    p: &RpfParams,
) -> Result<O::V> {
    check_same_shapes(ops, &[l_o, l_e, l_d], "rpf")?;
    let r_ed = rpf_residual(ops, l_e, l_d);
    let r = p.residual.apply(ops, &r_ed);
    let f_ed = ops.add(&r, l_e);
    let back = p.project.apply(ops, &f_ed);
    let diff = ops.sub(l_o, &back);
    Ok(p.out.apply(ops, &diff))
}

/// Plain addition or concatenation fusion used by the ablation variants.
pub fn fuse_baseline<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    l_o: &O::V,
    l_e: &O::V,
    l_d: &O::V,
    conv: &ConvParams,
    mode: FusionMode,
) -> Result<O::V> {
    check_same_shapes(ops, &[l_o, l_e, l_d], "fusion")?;
    let merged = match mode {
        FusionMode::Add => {
            let s = ops.add(l_o, l_e);
            ops.add(&s, l_d)
        }
        FusionMode::Concat => ops.concat(&[l_o.clone(), l_e.clone(), l_d.clone()]),
        FusionMode::Rpf => {
            return Err(crate::error::Error::pre(
                "baseline fusion supports only add and concat",
            ))
        }
    };
    Ok(conv.apply(ops, &merged))
}

pub fn fuse<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    l_o: &O::V,
    l_e: &O::V,
    l_d: &O::V,
    p: &FusionParams,
) -> Result<O::V> {
    match p {
        FusionParams::Rpf(r) => rpf_fuse(ops, l_o, l_e, l_d, r),
        FusionParams::Add(c) => fuse_baseline(ops, l_o, l_e, l_d, c, FusionMode::Add),
        FusionParams::Concat(c) => fuse_baseline(ops, l_o, l_e, l_d, c, FusionMode::Concat),
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;
    use crate::ops::Eager;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn params(mode: FusionMode) -> (ParamStore<f64>, FusionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = FusionParams::build(&mut ParamBuilder::new(&mut store, &mut rng), "fusion", mode, 4);
        (store, p)
    }

    #[test]
    fn equal_extracted_and_distilled_give_zero_residual() {
        let store = ParamStore::<f64>::new();
        let mut e = Eager::new(&store);
        let l = e.constant(rand_tensor([1, 4, 8, 8], 1));
        let r = rpf_residual(&mut e, &l, &l);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_rpf_parameters_output_zero() {
        let (mut store, p) = params(FusionMode::Rpf);
        store.zero_all();
        let mut e = Eager::new(&store);
        let xs: Vec<_> = (0..3).map(|i| e.constant(rand_tensor([2, 4, 8, 8], i))).collect();
        let out = fuse(&mut e, &xs[0], &xs[1], &xs[2], &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_mode_on_zero_input_broadcasts_bias() {
        let (store, p) = params(FusionMode::Add);
        let FusionParams::Add(conv) = &p else { unreachable!() };
        let bias = store.get(conv.bias).clone();
        let mut e = Eager::new(&store);
        let z = e.constant(Tensor::zeros([1, 4, 8, 8]));
        let out = fuse(&mut e, &z, &z, &z, &p).unwrap();
        for c in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(out.at([0, c, y, x]), bias.at([0, c, 0, 0]));
                }
            }
        }
    }

    #[test]
    fn additive_inverse_cancels_before_conv() {
        let store = ParamStore::<f64>::new();
        let mut e = Eager::new(&store);
        let a = rand_tensor([1, 4, 4, 4], 3);
        let av = e.constant(a.clone());
        let neg = e.constant(a.map(|v| -v));
        let zero = e.constant(Tensor::zeros([1, 4, 4, 4]));
        let s = e.add(&av, &neg);
        let s = e.add(&s, &zero);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_mode_keeps_width_and_rejects_mismatch() {
        let (store, p) = params(FusionMode::Concat);
        let mut e = Eager::new(&store);
        let xs: Vec<_> = (0..3).map(|i| e.constant(rand_tensor([1, 4, 8, 8], i))).collect();
        assert_eq!(fuse(&mut e, &xs[0], &xs[1], &xs[2], &p).unwrap().shape(), [1, 4, 8, 8]);
        let small = e.constant(Tensor::zeros([1, 4, 4, 4]));
        assert!(matches!(
            fuse(&mut e, &xs[0], &small, &xs[2], &p),
            Err(Error::Precondition(_))
        ));
    }
}

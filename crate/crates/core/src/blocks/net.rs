use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{Eager, Ops};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

use super::attention::{hadb_forward, HadbParams};
use super::config::ModelConfig;
use super::fusion::{fuse, FusionParams};
use super::hourglass::{shg_forward, MhebParams};
use super::layers::ConvParams;

/// How the hierarchical features become the distilled feature `L_d`.
#[derive(Clone, Debug, PartialEq)]
pub enum DistillParams {
    Hadb(HadbParams),
    /// 3×3 conv over the plain concatenation (no bottleneck, no attention).
    Concat(ConvParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetLayout {
    pub head: ConvParams,
    pub shg: Vec<MhebParams>,
    pub distill: DistillParams,
    pub fusion: FusionParams,
    pub tail: ConvParams,
}

impl NetLayout {
    fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Self {
        let c = cfg.base_channels;
        let head = ConvParams::build(b, "head", 3, c, 3);
        let shg = (0..cfg.num_mheb)
            .map(|i| MhebParams::build(b, &format!("shg.mheb{i}"), c, cfg.growth(), cfg.dcr_units_per_stream))
            .collect();
        let levels = cfg.num_mheb - 1;
        let distill = if cfg.use_hadb {
            DistillParams::Hadb(HadbParams::build(b, "hadb", levels, c, cfg.attention_reduction))
        } else {
            DistillParams::Concat(ConvParams::build(b, "distill_concat", levels * c, c, 3))
        };
        let fusion = FusionParams::build(b, "fusion", cfg.fusion_mode, c);
        let tail = ConvParams::build(b, "tail", c, 3, 3);
        NetLayout {
            head,
            shg,
            distill,
            fusion,
            tail,
        }
    }
}

/// The full deraining network: parameters plus the layout that indexes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mh2fNet<T> {
    pub config: ModelConfig,
    pub layout: NetLayout,
    pub params: ParamStore<T>,
}

/// Checks the `ImageTensor` contract: 3 channels, values in `[0, 1]`, spatial
/// dims at least 8 and divisible by 4.
pub fn validate_image<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    let [_, c, h, w] = t.shape();
    if c != 3 {
        return Err(Error::pre(format!("image must have 3 channels, got {c}")));
    }
    if h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::pre(format!(
            "image dims {h}x{w} must be >= 8 and divisible by 4"
        )));
    }
    if !t.data().iter().all(|v| v.is_finite() && *v >= T::zero() && *v <= T::one()) {
        return Err(Error::pre("image values must be finite and within [0, 1]"));
    }
    Ok(())
}

impl<T: Scalar> Mh2fNet<T> {
    /// Allocates and initializes all parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = NetLayout::build(&mut ParamBuilder::new(&mut params, &mut rng), &config);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a network around existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config)?;
        let want = fresh.params.manifest();
        let got = params.manifest();
        if want != got {
            let detail = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", want.len(), got.len()));
            return Err(Error::CorruptCheckpoint(format!("shape manifest mismatch: {detail}")));
        }
        Ok(Self {
            config: fresh.config,
            layout: fresh.layout,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn shapes(&self) -> Vec<(String, Shape)> {
        self.params.manifest()
    }

    /// Differentiable forward pass; no clamping.
    pub fn forward<O: Ops<T>>(&self, ops: &mut O, rainy: &O::V) -> Result<O::V> {
        let [_, c, h, w] = ops.shape(rainy);
        if c != 3 {
            return Err(Error::Config(vec![format!(
                "network input must have 3 channels, got {c}"
            )]));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::pre(format!(
                "network input dims {h}x{w} must be divisible by 4"
            )));
        }
        let l_o = conv_head(ops, rainy, &self.layout.head)?;
        let (l_e, hierarchy) = shg_forward(ops, &l_o, &self.layout.shg)?;
        let l_d = match &self.layout.distill {
            DistillParams::Hadb(p) => hadb_forward(ops, &hierarchy, p)?,
            DistillParams::Concat(conv) => {
                let cat = if hierarchy.len() == 1 {
                    hierarchy[0].clone()
                } else {
                    ops.concat(&hierarchy)
                };
                conv.apply(ops, &cat)
            }
        };
        let fused = fuse(ops, &l_o, &l_e, &l_d, &self.layout.fusion)?;
        Ok(self.layout.tail.apply(ops, &fused))
    }

    /// Forward pass on a valid image batch, clamped to `[0, 1]`.
    pub fn infer(&self, rainy: &Tensor<T>) -> Result<Tensor<T>> {
        validate_image(rainy)?;
        let mut ops = Eager::new(&self.params);
        let x = ops.constant(rainy.clone());
        let y = self.forward(&mut ops, &x)?;
        Ok(y.clamp(T::zero(), T::one()))
    }

    /// Like [`infer`](Self::infer) for any image size: reflection-pads each
    /// spatial dim up to a multiple of 4 (and at least 8), then crops back.
    pub fn derain(&self, rainy: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = rainy.shape();
        let ph = padded_dim(h);
        let pw = padded_dim(w);
        if ph == h && pw == w {
            return self.infer(rainy);
        }
        let padded = reflect_pad(rainy, ph, pw);
        let out = self.infer(&padded)?;
        Ok(crop(&out, h, w))
    }

    /// Ids of every parameter in the network.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }
}

/// `L_o`: 3×3 convolution from RGB to the base width.
pub fn conv_head<T: Scalar, O: Ops<T>>(ops: &mut O, image: &O::V, p: &ConvParams) -> Result<O::V> {
    let c = ops.shape(image)[1];
    if c != p.in_channels {
        return Err(Error::Config(vec![format!(
            "head convolution expects {} channels, image has {c}",
            p.in_channels
        )]));
    }
    Ok(p.apply(ops, image))
}

/// Total scalar parameter count of the network described by `config`.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(Mh2fNet::<f32>::new(config.clone())?.param_count())
}

fn padded_dim(n: usize) -> usize {
    n.div_ceil(4).max(2) * 4
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Mirror padding on the bottom and right edges.
pub fn reflect_pad<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, sh, sw] = t.shape();
    Tensor::from_fn([n, c, h, w], |[s, ch, y, x]| {
        t.at([s, ch, reflect(y as isize, sh), reflect(x as isize, sw)])
    })
}

pub fn crop<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, _, _] = t.shape();
    Tensor::from_fn([n, c, h, w], |idx| t.at(idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::config::FusionMode;

    #[test]
    fn default_network_maps_images_to_images() {
        let net = Mh2fNet::<f32>::new(ModelConfig::default()).unwrap();
        assert_eq!(net.layout.shg.len(), 8);
        let img = Tensor::from_fn([1, 3, 64, 64], |[_, c, y, x]| ((c + x + y) % 7) as f32 / 7.0);
        let a = net.infer(&img).unwrap();
        let b = net.infer(&img).unwrap();
        assert_eq!(a.shape(), [1, 3, 64, 64]);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_image_with_zero_head_bias_gives_zero_features() {
        let mut net = Mh2fNet::<f64>::new(ModelConfig::micro(2, 8)).unwrap();
        net.params.get_mut(net.layout.head.bias).data_mut().fill(0.0);
        let mut e = Eager::new(&net.params);
        let x = e.constant(Tensor::zeros([1, 3, 8, 8]));
        let l_o = conv_head(&mut e, &x, &net.layout.head).unwrap();
        assert_eq!(l_o.shape(), [1, 8, 8, 8]);
        assert!(l_o.data().iter().all(|&v| v == 0.0));
        let bad = e.constant(Tensor::zeros([1, 4, 8, 8]));
        assert!(matches!(conv_head(&mut e, &bad, &net.layout.head), Err(Error::Config(_))));
    }

    #[test]
    fn image_contract_is_enforced() {
        let net = Mh2fNet::<f32>::new(ModelConfig::micro(2, 8)).unwrap();
        assert!(net.infer(&Tensor::full([1, 3, 8, 8], 1.5)).is_err());
        assert!(net.infer(&Tensor::full([1, 3, 10, 8], 0.5)).is_err());
        assert!(net.infer(&Tensor::full([1, 1, 8, 8], 0.5)).is_err());
    }

    #[test]
    fn derain_pads_and_crops_odd_sizes() {
        let net = Mh2fNet::<f32>::new(ModelConfig::micro(2, 8)).unwrap();
        let img = Tensor::from_fn([1, 3, 63, 63], |[_, c, y, x]| ((c * 3 + x * y) % 11) as f32 / 11.0);
        let out = net.derain(&img).unwrap();
        assert_eq!(out.shape(), [1, 3, 63, 63]);
        let padded = reflect_pad(&img, 64, 64);
        let full = net.infer(&padded).unwrap();
        assert_eq!(crop(&full, 63, 63), out);
        let tiny = Tensor::full([1, 3, 5, 3], 0.25f32);
        assert_eq!(net.derain(&tiny).unwrap().shape(), [1, 3, 5, 3]);
    }

    #[test]
    fn reflection_mirrors_without_repeating_edge() {
        let t = Tensor::from_vec([1, 1, 1, 3], vec![1.0f64, 2.0, 3.0]);
        let p = reflect_pad(&t, 1, 8);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn param_count_is_pure_and_grows_with_depth() {
        let base = ModelConfig::default();
        assert_eq!(param_count(&base).unwrap(), param_count(&base).unwrap());
        let mut last = 0;
        for n in 2..=10 {
            let c = param_count(&ModelConfig { num_mheb: n, ..base.clone() }).unwrap();
            assert!(c > last);
            last = c;
        }
    }

    #[test]
    fn distillation_uses_fewer_parameters_than_plain_concat() {
        for fusion_mode in [FusionMode::Rpf, FusionMode::Add, FusionMode::Concat] {
            let with = ModelConfig { fusion_mode, ..ModelConfig::default() };
            let without = ModelConfig { use_hadb: false, ..with.clone() };
            assert!(param_count(&with).unwrap() < param_count(&without).unwrap());
        }
    }

    #[test]
    fn shapes_are_a_function_of_config() {
        let a = Mh2fNet::<f32>::new(ModelConfig::default()).unwrap();
        let b = Mh2fNet::<f32>::new(ModelConfig { seed: 99, ..ModelConfig::default() }).unwrap();
        assert_eq!(a.shapes(), b.shapes());
        assert_ne!(a.params, b.params);
        let c = Mh2fNet::<f32>::new(ModelConfig::default()).unwrap();
        assert_eq!(a.params, c.params);
    }
}

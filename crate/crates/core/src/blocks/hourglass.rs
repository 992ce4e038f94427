//! Densely connected residual units, the three-stream hourglass block and
//! the stacked hourglass group.

use crate::error::{Error, Result};
use crate::ops::Ops;
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Scalar;

use super::config::DCR_DENSE_LAYERS;
use super::layers::{act, ConvParams};

#[derive(Clone, Debug, PartialEq)]
pub struct DcrParams {
    pub channels: usize,
    pub growth: usize,
    pub dense: Vec<ConvParams>,
    /// 1×1 projection of the full concatenation back to `channels`.
    pub fuse: ConvParams,
}

impl DcrParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, growth: usize) -> Self {
        b.scoped(name, |b| {
            let dense = (0..DCR_DENSE_LAYERS)
                .map(|i| ConvParams::build(b, &format!("dense{i}"), channels + i * growth, growth, 3))
                .collect();
            let fuse = ConvParams::build(b, "fuse", channels + DCR_DENSE_LAYERS * growth, channels, 1);
            DcrParams {
                channels,
                growth,
                dense,
                fuse,
            }
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.dense
            .iter()
            .chain(std::iter::once(&self.fuse))
            .flat_map(|c| c.ids())
            .collect()
    }
}

fn check_channels<T: Scalar, O: Ops<T>>(ops: &O, x: &O::V, want: usize, what: &str) -> Result<()> {
    let c = ops.shape(x)[1];
    if c != want {
        return Err(Error::Config(vec![format!(
            "{what}: input has {c} channels, parameters expect {want}"
        )]));
    }
    Ok(())
}

/// Dense conv layers over the growing concatenation, a 1×1 projection and a
/// residual addition of the block input.
pub fn dcr_forward<T: Scalar, O: Ops<T>>(ops: &mut O, x: &O::V, p: &DcrParams) -> Result<O::V> {
    check_channels(ops, x, p.channels, "dcr")?;
    let mut feats = vec![x.clone()];
    for layer in &p.dense {
        let inp = if feats.len() == 1 {
            feats[0].clone()
        } else {
            ops.concat(&feats)
        };
        let y = layer.apply(ops, &inp);
        feats.push(act(ops, &y));
    }
    let all = ops.concat(&feats);
    let proj = p.fuse.apply(ops, &all);
    Ok(ops.add(x, &proj))
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 2 || factor == 4 {
        Ok(())
    } else {
        Err(Error::pre(format!("scale factor must be 2 or 4, got {factor}")))
    }
}

/// Average pooling with window = stride = `factor`.
pub fn downsample<T: Scalar, O: Ops<T>>(ops: &mut O, x: &O::V, factor: usize) -> Result<O::V> {
    check_factor(factor)?;
    let [_, _, h, w] = ops.shape(x);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::pre(format!(
            "downsample by {factor}: spatial dims {h}x{w} are not divisible"
        )));
    }
    Ok(ops.avg_pool(x, factor))
}

pub fn nearest_upsample<T: Scalar, O: Ops<T>>(ops: &mut O, x: &O::V, factor: usize) -> Result<O::V> {
    check_factor(factor)?;
    Ok(ops.upsample_nearest(x, factor))
}

/// Parameters of one multi-scale hourglass extraction block.
#[derive(Clone, Debug, PartialEq)]
pub struct MhebParams {
    pub channels: usize,
    /// DCR chains at scales 1, 1/2 and 1/4.
    pub streams: [Vec<DcrParams>; 3],
    pub merge_half: ConvParams,
    pub merge_full: ConvParams,
}

impl MhebParams {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        growth: usize,
        units: usize,
    ) -> Self {
        b.scoped(name, |b| {
            let stream = |b: &mut ParamBuilder<'_, T>, s: usize| {
                (0..units)
                    .map(|u| DcrParams::build(b, &format!("s{s}.dcr{u}"), channels, growth))
                    .collect::<Vec<_>>()
            };
            let streams = [stream(b, 0), stream(b, 1), stream(b, 2)];
            let merge_half = ConvParams::build(b, "merge_half", channels, channels, 3);
            let merge_full = ConvParams::build(b, "merge_full", channels, channels, 3);
            MhebParams {
                channels,
                streams,
                merge_half,
                merge_full,
            }
        })
    }

    /// Parameter ids grouped by stream (index 3 holds the merge convolutions).
    pub fn stream_ids(&self) -> [Vec<ParamId>; 4] {
        let ids = |s: &[DcrParams]| s.iter().flat_map(|d| d.ids()).collect::<Vec<_>>();
        let mut merge = self.merge_half.ids().to_vec();
        merge.extend(self.merge_full.ids());
        [ids(&self.streams[0]), ids(&self.streams[1]), ids(&self.streams[2]), merge]
    }
}

fn run_stream<T: Scalar, O: Ops<T>>(ops: &mut O, x: O::V, units: &[DcrParams]) -> Result<O::V> {
    units.iter().try_fold(x, |h, u| dcr_forward(ops, &h, u))
}

/// Three parallel DCR streams at full, half and quarter scale merged
/// bottom-up: `m½ = conv(s½ + up(s¼))`, `out = x + conv(s₁ + up(m½))`.
pub fn mheb_forward<T: Scalar, O: Ops<T>>(ops: &mut O, x: &O::V, p: &MhebParams) -> Result<O::V> {
    check_channels(ops, x, p.channels, "mheb")?;
    let [_, _, h, w] = ops.shape(x);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::pre(format!(
            "hourglass block needs spatial dims divisible by 4, got {h}x{w}"
        )));
    }
    let half = downsample(ops, x, 2)?;
    let quarter = downsample(ops, x, 4)?;
    let s_full = run_stream(ops, x.clone(), &p.streams[0])?;
    let s_half = run_stream(ops, half, &p.streams[1])?;
    let s_quarter = run_stream(ops, quarter, &p.streams[2])?;

    let up = nearest_upsample(ops, &s_quarter, 2)?;
    let sum = ops.add(&s_half, &up);
    let m_half = p.merge_half.apply(ops, &sum);

    let up = nearest_upsample(ops, &m_half, 2)?;
    let sum = ops.add(&s_full, &up);
    let m_full = p.merge_full.apply(ops, &sum);
    Ok(ops.add(x, &m_full))
}

/// Runs the blocks in sequence and returns the last output together with
/// the outputs of every block but the last.
pub fn shg_forward<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    l_o: &O::V,
    blocks: &[MhebParams],
) -> Result<(O::V, Vec<O::V>)> {
    if blocks.is_empty() {
        return Err(Error::Config(vec![
            "stacked hourglass group needs at least one block".into(),
        ]));
    }
    let mut hierarchy = Vec::with_capacity(blocks.len() - 1);
    let mut h = l_o.clone();
    for (i, block) in blocks.iter().enumerate() {
        h = mheb_forward(ops, &h, block)?;
        if i + 1 < blocks.len() {
            hierarchy.push(h.clone());
        }
    }
    Ok((h, hierarchy))
}

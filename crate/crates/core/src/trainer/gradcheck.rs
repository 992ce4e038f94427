//! Central finite differences against the tape's analytic gradients.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    channel_attention, conv_head, dcr_forward, fuse, hadb_forward, mheb_forward, shg_forward,
    spatial_attention, ChannelAttentionParams, ConvParams, DcrParams, FusionMode, FusionParams,
    HadbParams, Mh2fNet, MhebParams, ModelConfig, SpatialAttentionParams,
};
use crate::error::{Error, Result};
use crate::losses::{hybrid_graph, SsimParams, DEFAULT_LAMBDA};
use crate::ops::{Eager, Ops, Tape};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;
/// Entries probed per parameter tensor; inputs are probed exhaustively.
pub const PARAM_PROBES: usize = 12;

pub const BLOCKS: [&str; 12] = [
    "conv_head",
    "dcr",
    "mheb",
    "shg",
    "spatial_attention",
    "channel_attention",
    "hadb",
    "rpf",
    "fuse_add",
    "fuse_concat",
    "mh2f",
    "hybrid_loss",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub tensor: String,
    pub checked: usize,
    pub total: usize,
    /// Probes whose ±h interval straddles a kink (see [`probe_error`]).
    pub kinked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub block: String,
    pub input_shape: Shape,
    /// Inputs first, then one row per parameter tensor.
    pub rows: Vec<GradRow>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{} {:<18} max rel err {:.3e} (tol {:.0e}, {} tensors, {} kinked probes)",
            if self.passed { "PASS" } else { "FAIL" },
            self.block,
            self.max_rel_error,
            self.tolerance,
            self.rows.len(),
            self.rows.iter().map(|r| r.kinked).sum::<usize>()
        )
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "  {:<40} {:>5}/{:<6} {:.3e}  kinked {}",
                r.tensor, r.checked, r.total, r.max_rel_error, r.kinked
            );
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckOptions {
    /// Perturbs one analytic gradient entry so the check must fail.
    pub corrupt: bool,
    pub seed: u64,
}

/// Input shape each block is checked at by default.
pub fn default_shape(block: &str) -> Result<Shape> {
    match block {
        "conv_head" | "mh2f" => Ok([1, 3, 8, 8]),
        "hybrid_loss" => Ok([1, 3, 12, 12]),
        b if BLOCKS.contains(&b) => Ok([1, 8, 8, 8]),
        other => Err(unknown(other)),
    }
}

fn unknown(name: &str) -> Error {
    Error::UnknownBlock {
        name: name.to_string(),
        valid: BLOCKS.iter().map(|s| s.to_string()).collect(),
    }
}

enum Block {
    ConvHead(ConvParams),
    Dcr(DcrParams),
    Mheb(MhebParams),
    Shg(Vec<MhebParams>),
    Spatial(SpatialAttentionParams),
    Channel(ChannelAttentionParams),
    Hadb(HadbParams),
    Fusion(FusionParams),
    Net(Box<Mh2fNet<f64>>),
    Hybrid,
}

const REDUCTION: usize = 4;

impl Block {
    /// Parameters, layout and the number of inputs.
    fn build(name: &str, shape: Shape, rng: &mut ChaCha8Rng) -> Result<(ParamStore<f64>, Block, usize)> {
        let c = shape[1];
        let need_rgb = |what: &str| -> Result<()> {
            if c != 3 {
                return Err(Error::pre(format!("{what} takes 3-channel input, got {c}")));
            }
            Ok(())
        };
        match name {
            "mh2f" => {
                need_rgb(name)?;
                let net = Mh2fNet::new(ModelConfig {
                    dcr_units_per_stream: 1,
                    seed: rng.gen(),
                    ..ModelConfig::micro(2, 8)
                })?;
                return Ok((net.params.clone(), Block::Net(Box::new(net)), 1));
            }
            "hybrid_loss" => return Ok((ParamStore::new(), Block::Hybrid, 2)),
            _ => {}
        }
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, rng);
        let growth = (c / 2).max(1);
        let (block, inputs) = match name {
            "conv_head" => {
                need_rgb(name)?;
                (Block::ConvHead(ConvParams::build(&mut b, "head", 3, 8, 3)), 1)
            }
            "dcr" => (Block::Dcr(DcrParams::build(&mut b, "dcr", c, growth)), 1),
            "mheb" => (Block::Mheb(MhebParams::build(&mut b, "mheb", c, growth, 1)), 1),
            "shg" => (
                Block::Shg((0..2).map(|i| MhebParams::build(&mut b, &format!("mheb{i}"), c, growth, 1)).collect()),
                1,
            ),
            "spatial_attention" => (Block::Spatial(SpatialAttentionParams::build(&mut b, "spatial")), 1),
            "channel_attention" => (Block::Channel(ChannelAttentionParams::build(&mut b, "channel", c, REDUCTION)), 1),
            "hadb" => (Block::Hadb(HadbParams::build(&mut b, "hadb", 2, c, REDUCTION)), 2),
            "rpf" => (Block::Fusion(FusionParams::build(&mut b, "rpf", FusionMode::Rpf, c)), 3),
            "fuse_add" => (Block::Fusion(FusionParams::build(&mut b, "add", FusionMode::Add, c)), 3),
            "fuse_concat" => (Block::Fusion(FusionParams::build(&mut b, "concat", FusionMode::Concat, c)), 3),
            other => return Err(unknown(other)),
        };
        Ok((store, block, inputs))
    }

    fn outputs<O: Ops<f64>>(&self, ops: &mut O, xs: &[O::V]) -> Result<Vec<O::V>> {
        Ok(match self {
            Block::ConvHead(p) => vec![conv_head(ops, &xs[0], p)?],
            Block::Dcr(p) => vec![dcr_forward(ops, &xs[0], p)?],
            Block::Mheb(p) => vec![mheb_forward(ops, &xs[0], p)?],
            Block::Shg(p) => {
                let (last, mut hierarchy) = shg_forward(ops, &xs[0], p)?;
                hierarchy.push(last);
                hierarchy
            }
            Block::Spatial(p) => vec![spatial_attention(ops, &xs[0], p)],
            Block::Channel(p) => vec![channel_attention(ops, &xs[0], p)?],
            Block::Hadb(p) => vec![hadb_forward(ops, xs, p)?],
            Block::Fusion(p) => vec![fuse(ops, &xs[0], &xs[1], &xs[2], p)?],
            Block::Net(net) => vec![net.forward(ops, &xs[0])?],
            Block::Hybrid => vec![hybrid_graph(ops, &xs[0], &xs[1], DEFAULT_LAMBDA, &SsimParams::default())?.0],
        })
    }

    /// `Σ_k mean(out_k ⊙ W_k)` with fixed random weights.
    fn objective<O: Ops<f64>>(&self, ops: &mut O, xs: &[O::V], weights: &mut Vec<Tensor<f64>>, rng: &mut ChaCha8Rng) -> Result<O::V> {
        let outs = self.outputs(ops, xs)?;
        let mut total: Option<O::V> = None;
        for (k, out) in outs.iter().enumerate() {
            if weights.len() <= k {
                let s = ops.shape(out);
                weights.push(Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0)));
            }
            let w = ops.constant(weights[k].clone());
            let prod = ops.mul(out, &w);
            let m = ops.mean_all(&prod);
            total = Some(match total {
                None => m,
                Some(t) => ops.add(&t, &m),
            });
        }
        total.ok_or_else(|| Error::pre("block produced no output"))
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn probe_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if len > k => (0..k).map(|i| i * (len - 1) / (k - 1)).collect(),
        _ => (0..len).collect(),
    }
}

pub fn finite_difference_check(block: &str, shape: Shape, tolerance: f64) -> Result<GradCheckReport> {
    finite_difference_check_with(block, shape, tolerance, &GradCheckOptions::default())
}

pub fn finite_difference_check_with(
    block: &str,
    shape: Shape,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    default_shape(block)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (store, layout, n_inputs) = Block::build(block, shape, &mut rng)?;
    let image_like = matches!(layout, Block::ConvHead(_) | Block::Net(_) | Block::Hybrid);
    let inputs: Vec<Tensor<f64>> = (0..n_inputs)
        .map(|_| {
            Tensor::from_fn(shape, |_| {
                if image_like {
                    rng.gen_range(0.05..0.95)
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
        })
        .collect();
    let mut weights = Vec::new();

    // Analytic pass; also fixes the objective weights.
    let (mut input_grads, mut param_grads) = {
        let mut tape = Tape::new(&store);
        let xs: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let obj = layout.objective(&mut tape, &xs, &mut weights, &mut rng)?;
        let g = tape.backward(obj);
        let ig: Vec<Tensor<f64>> = xs
            .iter()
            .zip(&inputs)
            .map(|(v, t)| g.var(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let pg: Vec<Tensor<f64>> = store
            .iter()
            .map(|(id, p)| g.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        (ig, pg)
    };
    if opts.corrupt {
        let g = param_grads.first_mut().unwrap_or(&mut input_grads[0]);
        let bump = 0.1 * g.max_abs() + 1e-3;
        g.data_mut()[0] += bump;
    }

    let eval = |store: &ParamStore<f64>, xs: &[Tensor<f64>], weights: &mut Vec<Tensor<f64>>| -> Result<f64> {
        let mut ops = Eager::new(store);
        let vs: Vec<_> = xs.iter().map(|t| ops.constant(t.clone())).collect();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let obj = layout.objective(&mut ops, &vs, weights, &mut unused)?;
        Ok(ops.scalar(&obj))
    };

    let mid = eval(&store, &inputs, &mut weights)?;
    let mut rows = Vec::new();
    let mut xs = inputs.clone();
    for (k, grad) in input_grads.iter().enumerate() {
        let idx = probe_indices(xs[k].len(), None);
        let (mut worst, mut kinked) = (0.0f64, 0);
        for &j in &idx {
            let orig = xs[k].data()[j];
            xs[k].data_mut()[j] = orig + FD_STEP;
            let up = eval(&store, &xs, &mut weights)?;
            xs[k].data_mut()[j] = orig - FD_STEP;
            let down = eval(&store, &xs, &mut weights)?;
            xs[k].data_mut()[j] = orig;
            let (err, kink) = probe_error(grad.data()[j], up, mid, down, tolerance);
            worst = worst.max(err);
            kinked += kink as usize;
        }
        rows.push(GradRow {
            tensor: if n_inputs == 1 { "input".into() } else { format!("input.{k}") },
            checked: idx.len(),
            total: xs[k].len(),
            kinked,
            max_rel_error: worst,
        });
    }
    let mut probe = store.clone();
    for (id, grad) in store.ids().zip(&param_grads) {
        let len = store.get(id).len();
        let idx = probe_indices(len, Some(PARAM_PROBES));
        let (mut worst, mut kinked) = (0.0f64, 0);
        for &j in &idx {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe, &xs, &mut weights)?;
            probe.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe, &xs, &mut weights)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let (err, kink) = probe_error(grad.data()[j], up, mid, down, tolerance);
            worst = worst.max(err);
            kinked += kink as usize;
        }
        rows.push(GradRow {
            tensor: store.name(id).to_string(),
            checked: idx.len(),
            total: len,
            kinked,
            max_rel_error: worst,
        });
    }
    let max_rel_error = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        block: block.to_string(),
        input_shape: shape,
        rows,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

/// Relative error of `analytic` against the central difference.
///
/// Piecewise-linear activations make the objective non-differentiable on a
/// measure-zero set. When a kink lies inside `(x - h, x + h)` the central
/// difference averages two slopes and is not a derivative estimate. Such a
/// probe shows up as forward and backward differences that disagree; the
/// analytic gradient then has to match the one-sided difference taken on
/// the kink-free side. Returns the error and whether the probe was kinked.
fn probe_error(analytic: f64, up: f64, mid: f64, down: f64, tol: f64) -> (f64, bool) {
    let central = rel_err(analytic, (up - down) / (2.0 * FD_STEP));
    if central < tol {
        return (central, false);
    }
    let forward = (up - mid) / FD_STEP;
    let backward = (mid - down) / FD_STEP;
    if rel_err(forward, backward) < tol {
        return (central, false);
    }
    (rel_err(analytic, forward).min(rel_err(analytic, backward)), true)
}

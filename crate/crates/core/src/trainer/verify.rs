//! Self-verification: gradient checks over every block plus the SSIM oracle.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{ssim_index, ssim_reference, SsimParams};
use crate::tensor::Tensor;

use super::gradcheck::{default_shape, finite_difference_check_with, GradCheckOptions, GradCheckReport, BLOCKS, DEFAULT_TOLERANCE};

pub const SSIM_ORACLE_TOLERANCE: f64 = 1e-6;
pub const SSIM_SELF_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SsimOracleReport {
    pub images: usize,
    /// Largest `|fast - reference|` over all pairs.
    pub max_abs_diff: f64,
    /// Largest `|SSIM(a, a) - 1|`.
    pub max_self_dev: f64,
    pub symmetric: bool,
    pub passed: bool,
}

impl SsimOracleReport {
    pub fn summary(&self) -> String {
        format!(
            "{} ssim_oracle         {} pairs, max |fast - reference| {:.3e}, max |SSIM(a,a) - 1| {:.1e}, symmetric: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.images,
            self.max_abs_diff,
            self.max_self_dev,
            self.symmetric
        )
    }
}

/// Compares the filtered SSIM against the per-window reference on `count`
/// random `size`×`size` RGB pairs. Half the pairs are independent noise and
/// half are noisy copies, so both low and high similarities are covered.
pub fn ssim_oracle_check(count: usize, size: usize, seed: u64) -> Result<SsimOracleReport> {
    let p = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_abs_diff, mut max_self_dev, mut symmetric) = (0.0f64, 0.0f64, true);
    for i in 0..count {
        let a = Tensor::<f64>::from_fn([1, 3, size, size], |_| rng.gen_range(0.0..1.0));
        let b = if i % 2 == 0 {
            Tensor::from_fn(a.shape(), |_| rng.gen_range(0.0..1.0))
        } else {
            let mut b = a.clone();
            for v in b.data_mut() {
                *v = (*v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
            }
            b
        };
        let fast = ssim_index(&a, &b, &p)?;
        let slow = ssim_reference(&a, &b, &p)?;
        max_abs_diff = max_abs_diff.max((fast - slow).abs());
        max_self_dev = max_self_dev.max((ssim_index(&a, &a, &p)? - 1.0).abs());
        symmetric &= fast == ssim_index(&b, &a, &p)?;
    }
    Ok(SsimOracleReport {
        images: count,
        max_abs_diff,
        max_self_dev,
        symmetric,
        passed: max_abs_diff < SSIM_ORACLE_TOLERANCE && max_self_dev < SSIM_SELF_TOLERANCE && symmetric,
    })
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub blocks: Vec<GradCheckReport>,
    pub ssim: SsimOracleReport,
    pub elapsed: Duration,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.ssim.passed && self.blocks.iter().all(|b| b.passed)
    }
}

/// Gradient-checks every registered block at its default shape, then runs
/// the SSIM oracle on 20 random 32×32 pairs.
pub fn run_verification(opts: &GradCheckOptions) -> Result<VerifyReport> {
    let start = Instant::now();
    let mut blocks = Vec::with_capacity(BLOCKS.len());
    for name in BLOCKS {
        let r = finite_difference_check_with(name, default_shape(name)?, DEFAULT_TOLERANCE, opts)?;
        log::debug!("{}", r.summary());
        blocks.push(r);
    }
    let ssim = ssim_oracle_check(20, 32, opts.seed)?;
    Ok(VerifyReport {
        blocks,
        ssim,
        elapsed: start.elapsed(),
    })
}

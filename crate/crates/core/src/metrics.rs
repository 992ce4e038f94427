//! Full-reference quality metrics and the paired evaluation report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{ssim_index, SsimParams};
use crate::tensor::{Scalar, Tensor};

/// Returned by [`psnr`] when the two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio for peak value 1, over all channels.
pub fn psnr<T: Scalar>(r: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if r.shape() != gt.shape() {
        return Err(Error::pre(format!(
            "shape mismatch: {:?} vs {:?}",
            r.shape(),
            gt.shape()
        )));
    }
    let mut se = 0.0f64;
    for (a, b) in r.data().iter().zip(gt.data()) {
        let d = a.to_f64_lossy() - b.to_f64_lossy();
        se += d * d;
    }
    let mse = se / r.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Scores every `(name, derained, ground_truth)` triple and averages.
pub fn evaluate_pairs<T: Scalar>(pairs: &[(String, Tensor<T>, Tensor<T>)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::pre("evaluation needs at least one image pair"));
    }
    let p = SsimParams::default();
    let mut scores = Vec::with_capacity(pairs.len());
    for (name, derained, gt) in pairs {
        let psnr_db = psnr(derained, gt).map_err(|e| Error::pre(format!("{name}: {e}")))?;
        let ssim = ssim_index(derained, gt, &p).map_err(|e| Error::pre(format!("{name}: {e}")))?;
        scores.push(PairScore {
            name: name.clone(),
            psnr_db,
            ssim,
        });
    }
    Ok(EvalReport::from_scores(scores))
}

impl EvalReport {
    pub fn from_scores(pairs: Vec<PairScore>) -> Self {
        let n = pairs.len().max(1) as f64;
        let mean_psnr = pairs.iter().map(|p| p.psnr_db).sum::<f64>() / n;
        let mean_ssim = pairs.iter().map(|p| p.ssim).sum::<f64>() / n;
        Self {
            pairs,
            mean_psnr,
            mean_ssim,
        }
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let width = self.pairs.iter().map(|p| p.name.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>7}", "file", "PSNR(dB)", "SSIM");
        for p in &self.pairs {
            let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.5}", p.name, p.psnr_db, p.ssim);
        }
        let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.5}", "mean", self.mean_psnr, self.mean_ssim);
        s
    }

    /// `filename,psnr_db,ssim` rows followed by a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("filename,psnr_db,ssim\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{},{},{}", p.name, p.psnr_db, p.ssim);
        }
        let _ = writeln!(s, "mean,{},{}", self.mean_psnr, self.mean_ssim);
        s
    }
}

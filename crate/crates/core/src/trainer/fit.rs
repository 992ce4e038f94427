use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::Mh2fNet;
use crate::datapipe::{batches_per_epoch, load_pairs, make_batches, ImagePair, PairIndex};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate_pairs, EvalReport};

use super::adam::Adam;
use super::checkpoint::{save_checkpoint, Checkpoint, Progress, FORMAT_VERSION};
use super::config::TrainConfig;
use super::step::train_step;

pub const ITER_LOG_FILE: &str = "train_log.csv";
pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    pub l1: f64,
    pub ssim_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub eval_psnr: Option<f64>,
    pub eval_ssim: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub iterations: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn csv_string<R: Serialize>(rows: &[R], header: &[&str]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

impl TrainLog {
    pub fn iterations_csv(&self) -> String {
        csv_string(&self.iterations, &["iter", "epoch", "l1", "ssim_loss", "total"])
    }

    pub fn epochs_csv(&self) -> String {
        csv_string(&self.epochs, &["epoch", "mean_total", "eval_psnr", "eval_ssim"])
    }

    /// Writes both tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (file, text) in [(ITER_LOG_FILE, self.iterations_csv()), (EPOCH_LOG_FILE, self.epochs_csv())] {
            let path = dir.join(file);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Derains every pair at full resolution and scores it against its clean image.
pub fn evaluate_model(model: &Mh2fNet<f32>, pairs: &[ImagePair]) -> Result<EvalReport> {
    let mut scored = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = model.derain(&p.rainy)?;
        scored.push((p.name.clone(), out.cast::<f64>(), p.clean.cast::<f64>()));
    }
    evaluate_pairs(&scored)
}

/// Owns the model and optimizer for one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Mh2fNet<f32>,
    pub optimizer: Adam<f32>,
    pub progress: Progress,
    pub best_psnr: Option<f64>,
    pub log: TrainLog,
    best: Option<Checkpoint>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !config.deterministic {
            log::info!("all kernels run sequentially in a fixed order; results are reproducible regardless");
        }
        let model = Mh2fNet::new(config.model.clone())?;
        let optimizer = Adam::new(&model.params, config.lr, config.beta1, config.beta2, config.eps);
        Ok(Self {
            config,
            model,
            optimizer,
            progress: Progress::default(),
            best_psnr: None,
            log: TrainLog::default(),
            best: None,
        })
    }

    /// Continues from a saved state. The training log starts empty.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = ckpt.model()?;
        Ok(Self {
            config: ckpt.config,
            model,
            optimizer: ckpt.optimizer,
            progress: ckpt.progress,
            best_psnr: ckpt.best_psnr,
            log: TrainLog::default(),
            best: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            progress: self.progress,
            best_psnr: self.best_psnr,
        }
    }

    /// Best-PSNR snapshot taken during this run, if any evaluation happened.
    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs
            || self.config.max_iters.is_some_and(|m| self.progress.iteration >= m)
    }

    fn check_pairs(&self, pairs: &[ImagePair]) -> Result<usize> {
        let per_epoch = batches_per_epoch(pairs.len(), self.config.batch_size);
        if per_epoch == 0 {
            return Err(Error::pre(format!(
                "training set has {} pairs, fewer than batch_size {}",
                pairs.len(),
                self.config.batch_size
            )));
        }
        Ok(per_epoch)
    }

    /// Runs one update on the next batch. Returns `None` once training is
    /// complete. Epoch boundaries are not handled here (see [`Trainer::run`]).
    pub fn step(&mut self, pairs: &[ImagePair]) -> Result<Option<LossBreakdown>> {
        if self.is_finished() {
            return Ok(None);
        }
        let per_epoch = self.check_pairs(pairs)?;
        if self.progress.batch >= per_epoch {
            self.progress.epoch += 1;
            self.progress.batch = 0;
            if self.is_finished() {
                return Ok(None);
            }
        }
        let c = &self.config;
        let batches = make_batches(pairs, c.batch_size, c.patch_size, c.seed, self.progress.epoch)?;
        let batch = batches.batch(self.progress.batch)?;
        let loss = train_step(&mut self.model, &batch, &mut self.optimizer, self.config.lambda)?;
        self.progress.batch += 1;
        self.progress.iteration += 1;
        self.log.iterations.push(IterRecord {
            iter: self.progress.iteration,
            epoch: self.progress.epoch,
            l1: loss.l1,
            ssim_loss: loss.ssim_loss,
            total: loss.total,
        });
        Ok(Some(loss))
    }

    /// Runs `n` updates (fewer if training finishes first).
    pub fn run_steps(&mut self, pairs: &[ImagePair], n: usize) -> Result<usize> {
        let mut done = 0;
        while done < n && self.step(pairs)?.is_some() {
            done += 1;
        }
        Ok(done)
    }

    /// Trains until the configured epochs (or `max_iters`) are used up,
    /// closing each epoch with an optional evaluation, checkpoints and logs
    /// in `out_dir`.
    pub fn run(&mut self, pairs: &[ImagePair], eval: Option<&[ImagePair]>, out_dir: Option<&Path>) -> Result<()> {
        let per_epoch = self.check_pairs(pairs)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while !self.is_finished() {
            let epoch = self.progress.epoch;
            while self.progress.batch < per_epoch && !self.is_finished() {
                self.step(pairs)?;
            }
            let epoch_done = self.progress.batch >= per_epoch;
            self.close_epoch(epoch, eval, out_dir)?;
            if epoch_done {
                self.progress.epoch += 1;
                self.progress.batch = 0;
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&self.checkpoint(), &dir.join(LAST_CHECKPOINT))?;
            self.log.write(dir)?;
        }
        Ok(())
    }

    fn close_epoch(&mut self, epoch: usize, eval: Option<&[ImagePair]>, out_dir: Option<&Path>) -> Result<()> {
        let totals: Vec<f64> = self.log.iterations.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
        let mean_total = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
        let mut record = EpochRecord {
            epoch,
            mean_total,
            eval_psnr: None,
            eval_ssim: None,
        };
        if let Some(eval) = eval {
            let report = evaluate_model(&self.model, eval)?;
            record.eval_psnr = Some(report.mean_psnr);
            record.eval_ssim = Some(report.mean_ssim);
            log::info!(
                "epoch {epoch}: loss {mean_total:.5}, eval PSNR {:.3} dB, SSIM {:.4}",
                report.mean_psnr,
                report.mean_ssim
            );
            if self.best_psnr.is_none_or(|b| report.mean_psnr > b) {
                self.best_psnr = Some(report.mean_psnr);
                let snapshot = self.checkpoint();
                if let Some(dir) = out_dir {
                    save_checkpoint(&snapshot, &dir.join(BEST_CHECKPOINT))?;
                }
                self.best = Some(snapshot);
            }
        } else {
            log::info!("epoch {epoch}: loss {mean_total:.5}");
        }
        self.log.epochs.push(record);
        if let Some(dir) = out_dir {
            save_checkpoint(&self.checkpoint(), &dir.join(LAST_CHECKPOINT))?;
            self.log.write(dir)?;
        }
        Ok(())
    }
}

/// Trains on `train` and returns the best-PSNR checkpoint when an eval set
/// is given, otherwise the final one.
pub fn fit(
    train: &PairIndex,
    eval: Option<&PairIndex>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, TrainLog)> {
    let mut trainer = Trainer::new(config.clone())?;
    let pairs = load_pairs(train)?;
    let eval_pairs = eval.map(load_pairs).transpose()?;
    trainer.run(&pairs, eval_pairs.as_deref(), out_dir)?;
    let ckpt = trainer.best.take().unwrap_or_else(|| trainer.checkpoint());
    Ok((ckpt, trainer.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ModelConfig;
    use crate::tensor::Tensor;

    fn pairs(n: usize, size: usize) -> Vec<ImagePair> {
        (0..n)
            .map(|i| {
                let clean = Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
                    0.2 + 0.6 * (((i + c + y + 2 * x) % 7) as f32 / 7.0)
                });
                let rainy = clean.map(|v| (v + 0.2).min(1.0));
                ImagePair {
                    name: format!("rain-{i}.png"),
                    rainy,
                    clean,
                }
            })
            .collect()
    }

    fn tiny(epochs: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            batch_size: batch,
            patch_size: 12,
            epochs,
            model: ModelConfig::micro(2, 4),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_one_batch_logs_one_row() {
        let mut t = Trainer::new(tiny(1, 2)).unwrap();
        t.run(&pairs(3, 16), None, None).unwrap();
        assert_eq!(t.log.iterations.len(), 1);
        assert_eq!(t.log.epochs.len(), 1);
        assert_eq!(t.progress, Progress { epoch: 1, batch: 0, iteration: 1 });
        for r in &t.log.iterations {
            assert!((r.total - (r.l1 + 0.2 * r.ssim_loss)).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_pairs_for_a_batch() {
        let mut t = Trainer::new(tiny(1, 4)).unwrap();
        assert!(matches!(t.run(&pairs(3, 16), None, None), Err(Error::Precondition(_))));
    }

    #[test]
    fn max_iters_stops_mid_epoch() {
        let mut cfg = tiny(3, 1);
        cfg.max_iters = Some(4);
        let mut t = Trainer::new(cfg).unwrap();
        t.run(&pairs(3, 16), None, None).unwrap();
        assert_eq!(t.log.iterations.len(), 4);
        assert_eq!(t.progress, Progress { epoch: 1, batch: 1, iteration: 4 });
        assert_eq!(t.log.epochs.len(), 2);
    }

    #[test]
    fn eval_keeps_best_checkpoint_and_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = pairs(2, 16);
        let mut t = Trainer::new(tiny(2, 1)).unwrap();
        t.run(&data, Some(&data), Some(dir.path())).unwrap();
        let best = t.best_checkpoint().unwrap();
        let psnrs: Vec<f64> = t.log.epochs.iter().map(|e| e.eval_psnr.unwrap()).collect();
        let max = psnrs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(best.best_psnr, Some(max));
        for f in [LAST_CHECKPOINT, BEST_CHECKPOINT, ITER_LOG_FILE, EPOCH_LOG_FILE] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let epochs = std::fs::read_to_string(dir.path().join(EPOCH_LOG_FILE)).unwrap();
        assert_eq!(epochs.lines().count(), 3);
        assert!(epochs.starts_with("epoch,mean_total,eval_psnr,eval_ssim"));
    }
}

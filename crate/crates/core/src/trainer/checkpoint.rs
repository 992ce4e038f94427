//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MH2FCKPT" | u32 version
//! u32 len | TOML train config (model section included)
//! u32 count | count x (u32 len | name | 4 x u32 dims)
//! f32 parameters | u64 adam step | f32 first moments | f32 second moments
//! u64 epoch | u64 batch | u64 iteration        (data stream cursor)
//! u8 has_best | f64 best_psnr
//! u64 FNV-1a hash of everything above
//! ```

use std::path::Path;

use crate::blocks::Mh2fNet;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Shape, Tensor};

use super::adam::Adam;
use super::config::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MH2FCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Position in the data stream. Crops, flips and shuffles are keyed by
/// `(seed, epoch, batch)`, so this cursor is the complete generator state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub epoch: usize,
    /// Next batch within `epoch`.
    pub batch: usize,
    /// Updates applied so far.
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    pub progress: Progress,
    pub best_psnr: Option<f64>,
}

impl Checkpoint {
    /// Rebuilds the network, checking the parameter manifest against the config.
    pub fn model(&self) -> Result<Mh2fNet<f32>> {
        Mh2fNet::from_params(self.config.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        let text = self.config.to_toml();
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.params.len());
        for (name, shape) in self.params.manifest() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            for d in shape {
                put_u32(&mut out, d);
            }
        }
        let blob = |out: &mut Vec<u8>, ts: &mut dyn Iterator<Item = &Tensor<f32>>| {
            for t in ts {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        blob(&mut out, &mut self.params.iter().map(|(_, p)| &p.value));
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        blob(&mut out, &mut self.optimizer.m.iter());
        blob(&mut out, &mut self.optimizer.v.iter());
        for v in [self.progress.epoch, self.progress.batch, self.progress.iteration] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.push(self.best_psnr.is_some() as u8);
        out.extend_from_slice(&self.best_psnr.unwrap_or(0.0).to_le_bytes());
        let hash = fnv1a(&out);
        out.extend_from_slice(&hash.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 8 {
            return Err(Error::CorruptCheckpoint("truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body).to_le_bytes() != tail {
            return Err(Error::CorruptCheckpoint("checksum mismatch (truncated or damaged file)".into()));
        }
        r.bytes = body;

        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CorruptCheckpoint("config block is not UTF-8".into()))?;
        let config = TrainConfig::from_toml(text)
            .map_err(|e| Error::CorruptCheckpoint(format!("config block: {e}")))?;
        let count = r.u32()? as usize;
        let mut manifest: Vec<(String, Shape)> = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            manifest.push((name, shape));
        }
        let mut params = ParamStore::new();
        for (name, shape) in &manifest {
            params.push(name.clone(), r.tensor(*shape)?);
        }
        let step = r.u64()?;
        let m = manifest.iter().map(|(_, s)| r.tensor(*s)).collect::<Result<Vec<_>>>()?;
        let v = manifest.iter().map(|(_, s)| r.tensor(*s)).collect::<Result<Vec<_>>>()?;
        let progress = Progress {
            epoch: r.u64()? as usize,
            batch: r.u64()? as usize,
            iteration: r.u64()? as usize,
        };
        let has_best = r.take(1)?[0];
        let best = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} unexpected trailing bytes",
                body.len() - r.pos
            )));
        }
        let optimizer = Adam {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            step,
            m,
            v,
        };
        let ckpt = Checkpoint {
            format_version: version,
            config,
            params,
            optimizer,
            progress,
            best_psnr: (has_best != 0).then_some(best),
        };
        // Manifest must agree with what the config builds.
        ckpt.model()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::CorruptCheckpoint(m) => Error::CorruptCheckpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: Shape) -> Result<Tensor<f32>> {
        let n = numel(shape);
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::from_vec(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ModelConfig;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            model: ModelConfig::micro(2, 8),
            ..TrainConfig::default()
        };
        let model = Mh2fNet::<f32>::new(config.model.clone()).unwrap();
        let mut optimizer = Adam::new(&model.params, config.lr, config.beta1, config.beta2, config.eps);
        optimizer.step = 3;
        optimizer.m[0].data_mut()[0] = 0.25;
        optimizer.v[1].data_mut()[0] = f32::MIN_POSITIVE;
        Checkpoint {
            format_version: FORMAT_VERSION,
            config,
            params: model.params,
            optimizer,
            progress: Progress { epoch: 2, batch: 1, iteration: 9 },
            best_psnr: Some(27.5),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!(back, ck);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 4, 8, 12, 40, bytes.len() / 2, bytes.len() - 9, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("corrupt checkpoint"), "cut {cut}: {err}");
        }
    }

    #[test]
    fn flipped_byte_is_rejected() {
        let mut bytes = sample().to_bytes();
        let i = bytes.len() / 2;
        bytes[i] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_is_checked_first() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        // Everything after the version is garbage, and must not be looked at.
        bytes.truncate(20);
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::VersionMismatch { found: 7, expected: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_must_match_config() {
        let mut ck = sample();
        ck.config.model.base_channels = 12;
        let err = Checkpoint::from_bytes(&ck.to_bytes()).unwrap_err();
        assert!(err.to_string().contains("shape manifest mismatch"), "{err}");
    }
}

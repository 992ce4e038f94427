use serde::{Deserialize, Serialize};

use crate::blocks::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::DEFAULT_LAMBDA;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub epochs: usize,
    /// Stops after this many iterations even mid-epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    pub lambda: f64,
    /// Drives batch order, crops and flips.
    pub seed: u64,
    pub deterministic: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            patch_size: 64,
            epochs: 5,
            max_iters: None,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            deterministic: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Collects every violated rule, including those of the model config.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr must be > 0 (got {})", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{name} must be within [0, 1) (got {b})"));
            }
        }
        if !(self.eps > 0.0) {
            v.push(format!("eps must be > 0 (got {})", self.eps));
        }
        if self.batch_size < 1 {
            v.push("batch_size must be >= 1".to_string());
        }
        if self.patch_size < 8 || !self.patch_size.is_multiple_of(4) {
            v.push(format!(
                "patch_size must be >= 8 and divisible by 4 (got {})",
                self.patch_size
            ));
        }
        if self.epochs < 1 {
            v.push("epochs must be >= 1".to_string());
        }
        if self.max_iters == Some(0) {
            v.push("max_iters must be >= 1 when set".to_string());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            v.push(format!("lambda must be >= 0 (got {})", self.lambda));
        }
        if let Err(Error::Config(m)) = self.model.validate() {
            v.extend(m.into_iter().map(|s| format!("model.{s}")));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Canonical TOML rendering, also used inside checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2), (1e-3, 0.9, 0.999));
        assert_eq!((c.batch_size, c.patch_size), (16, 64));
        assert_eq!(c.lambda, 0.2);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = TrainConfig::default();
        c.max_iters = Some(7);
        c.model.dcr_growth = Some(5);
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_toml("lr = 0.1\nlearning_rate = 2\n").is_err());
        assert!(TrainConfig::from_toml("[model]\nnum_mhebs = 4\n").is_err());
    }

    #[test]
    fn violations_are_listed() {
        let c = TrainConfig {
            lr: 0.0,
            beta2: 1.0,
            epochs: 0,
            model: crate::ModelConfig { num_mheb: 1, ..Default::default() },
            ..TrainConfig::default()
        };
        match c.validate() {
            Err(Error::Config(v)) => {
                assert_eq!(v.len(), 4, "{v:?}");
                assert!(v[3].starts_with("model.num_mheb"));
            }
            other => panic!("{other:?}"),
        }
    }
}

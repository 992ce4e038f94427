use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the original, extracted and distilled features are fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Residual projected fusion.
    Rpf,
    Add,
    Concat,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Rpf => "rpf",
            FusionMode::Add => "add",
            FusionMode::Concat => "concat",
        })
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rpf" => Ok(FusionMode::Rpf),
            "add" => Ok(FusionMode::Add),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::Parse(format!(
                "unknown fusion mode `{other}` (expected rpf, add or concat)"
            ))),
        }
    }
}

/// Dense 3×3 layers inside every DCR unit.
pub const DCR_DENSE_LAYERS: usize = 3;
/// Negative slope of the network nonlinearity.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Side of the spatial-attention kernel.
pub const SPATIAL_KERNEL: usize = 7;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of stacked hourglass blocks.
    pub num_mheb: usize,
    pub base_channels: usize,
    pub dcr_units_per_stream: usize,
    /// Growth of each dense layer; `None` means `base_channels / 2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dcr_growth: Option<usize>,
    pub attention_reduction: usize,
    pub fusion_mode: FusionMode,
    pub use_hadb: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_mheb: 8,
            base_channels: 32,
            dcr_units_per_stream: 2,
            dcr_growth: None,
            attention_reduction: 4,
            fusion_mode: FusionMode::Rpf,
            use_hadb: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn growth(&self) -> usize {
        self.dcr_growth.unwrap_or(self.base_channels / 2)
    }

    /// Default configuration with a different depth and width.
    pub fn micro(num_mheb: usize, channels: usize) -> Self {
        Self {
            num_mheb,
            base_channels: channels,
            ..Self::default()
        }
    }

    /// Collects every violated rule.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.num_mheb < 2 {
            v.push("num_mheb must be >= 2 so the distillation stage has at least one hierarchical feature".to_string());
        }
        if self.base_channels < 4 {
            v.push(format!("base_channels must be >= 4 (got {})", self.base_channels));
        }
        if self.dcr_units_per_stream < 1 {
            v.push("dcr_units_per_stream must be >= 1".to_string());
        }
        if self.growth() < 1 {
            v.push("dcr_growth must be >= 1".to_string());
        }
        if self.attention_reduction < 1 {
            v.push("attention_reduction must be >= 1".to_string());
        } else if !self.base_channels.is_multiple_of(self.attention_reduction) {
            v.push(format!(
                "base_channels ({}) must be divisible by attention_reduction ({})",
                self.base_channels, self.attention_reduction
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_depth() {
        let c = ModelConfig::default();
        assert_eq!(c.num_mheb, 8);
        assert_eq!(c.base_channels, 32);
        assert_eq!(c.growth(), 16);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn validation_lists_each_violation() {
        let c = ModelConfig {
            num_mheb: 1,
            base_channels: 30,
            attention_reduction: 4,
            ..ModelConfig::default()
        };
        match c.validate() {
            Err(Error::Config(v)) => {
                assert_eq!(v.len(), 2, "{v:?}");
                assert!(v.iter().any(|m| m.contains("divisible")));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn fusion_mode_parses_case_insensitively() {
        assert_eq!("RPF".parse::<FusionMode>().unwrap(), FusionMode::Rpf);
        assert!("sum".parse::<FusionMode>().is_err());
    }
}

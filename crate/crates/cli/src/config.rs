//! Config file loading, environment and flag overrides.

use std::path::Path;

use clap::Args;
use mh2f::rainsim::RainParams;
use mh2f::trainer::TrainConfig;
use mh2f::FusionMode;
use serde::Serialize;

use crate::CliError;

pub const DETERMINISTIC_ENV: &str = "MH2F_DETERMINISTIC";

/// Contents of a `--config` file: `[train]`, `[model]` and `[rain]` sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfigFile {
    pub train: TrainConfig,
    /// One entry per `[[rain]]` table, or the single `[rain]` table.
    pub rain: Vec<RainParams>,
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

impl CliConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| parse_err(path, e))?;
        let mut train = match table.remove("train") {
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(parse_err(path, "[train] must be a table")),
            None => toml::Table::new(),
        };
        if let Some(model) = table.remove("model") {
            if train.contains_key("model") {
                return Err(parse_err(path, "model settings given both in [model] and [train.model]"));
            }
            train.insert("model".into(), model);
        }
        let rain = match table.remove("rain") {
            None => Vec::new(),
            Some(toml::Value::Array(items)) => items
                .into_iter()
                .map(|v| v.try_into::<RainParams>())
                .collect::<Result<_, _>>()
                .map_err(|e| parse_err(path, format!("[[rain]]: {e}")))?,
            Some(v) => vec![v.try_into::<RainParams>().map_err(|e| parse_err(path, format!("[rain]: {e}")))?],
        };
        if !table.is_empty() {
            let keys: Vec<_> = table.keys().cloned().collect();
            return Err(parse_err(path, format!("unknown keys: {}", keys.join(", "))));
        }
        let train = toml::Value::Table(train)
            .try_into::<TrainConfig>()
            .map_err(|e| parse_err(path, format!("[train]: {e}")))?;
        Ok(Self { train, rain })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                Self::parse(&text, p)
            }
        }
    }
}

/// Effective configuration in the same sectioned layout the config file uses.
pub fn render_train_config(cfg: &TrainConfig) -> String {
    #[derive(Serialize)]
    struct Echo<'a> {
        train: TrainPart<'a>,
        model: &'a mh2f::ModelConfig,
    }
    #[derive(Serialize)]
    struct TrainPart<'a> {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        batch_size: usize,
        patch_size: usize,
        epochs: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        max_iters: Option<usize>,
        lambda: f64,
        seed: u64,
        deterministic: bool,
        #[serde(skip)]
        _p: std::marker::PhantomData<&'a ()>,
    }
    let echo = Echo {
        train: TrainPart {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            batch_size: cfg.batch_size,
            patch_size: cfg.patch_size,
            epochs: cfg.epochs,
            max_iters: cfg.max_iters,
            lambda: cfg.lambda,
            seed: cfg.seed,
            deterministic: cfg.deterministic,
            _p: std::marker::PhantomData,
        },
        model: &cfg.model,
    };
    toml::to_string(&echo).expect("config serializes")
}

/// Reads the deterministic-mode override from the environment.
pub fn deterministic_from_env() -> Result<Option<bool>, CliError> {
    match std::env::var(DETERMINISTIC_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "on" => Ok(Some(true)),
            "0" | "false" | "no" | "off" => Ok(Some(false)),
            "" => Ok(None),
            other => Err(CliError::usage(format!("{DETERMINISTIC_ENV}: expected 0/1/true/false, got '{other}'"))),
        },
    }
}

/// Training and model flags. Each one, when given, beats the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "patch-size")]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: Option<bool>,
    #[arg(long = "model.num_mheb")]
    pub num_mheb: Option<usize>,
    #[arg(long = "model.base_channels")]
    pub base_channels: Option<usize>,
    #[arg(long = "model.dcr_units_per_stream")]
    pub dcr_units_per_stream: Option<usize>,
    #[arg(long = "model.dcr_growth")]
    pub dcr_growth: Option<usize>,
    #[arg(long = "model.attention_reduction")]
    pub attention_reduction: Option<usize>,
    #[arg(long = "model.fusion_mode")]
    pub fusion_mode: Option<FusionMode>,
    #[arg(long = "model.use_hadb")]
    pub use_hadb: Option<bool>,
    #[arg(long = "model.seed")]
    pub model_seed: Option<u64>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl TrainOverrides {
    /// Precedence: flags, then the environment, then the file, then defaults.
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<(), CliError> {
        set!(cfg.lr, self.lr);
        set!(cfg.beta1, self.beta1);
        set!(cfg.beta2, self.beta2);
        set!(cfg.eps, self.eps);
        set!(cfg.batch_size, self.batch_size);
        set!(cfg.patch_size, self.patch_size);
        set!(cfg.epochs, self.epochs);
        if self.max_iters.is_some() {
            cfg.max_iters = self.max_iters;
        }
        set!(cfg.lambda, self.lambda);
        set!(cfg.seed, self.seed);
        set!(cfg.deterministic, deterministic_from_env()?);
        set!(cfg.deterministic, self.deterministic);
        let m = &mut cfg.model;
        set!(m.num_mheb, self.num_mheb);
        set!(m.base_channels, self.base_channels);
        set!(m.dcr_units_per_stream, self.dcr_units_per_stream);
        if self.dcr_growth.is_some() {
            m.dcr_growth = self.dcr_growth;
        }
        set!(m.attention_reduction, self.attention_reduction);
        set!(m.fusion_mode, self.fusion_mode);
        set!(m.use_hadb, self.use_hadb);
        set!(m.seed, self.model_seed);
        Ok(())
    }
}

/// Rain flags applied on top of every parameter set.
#[derive(Args, Clone, Debug, Default)]
pub struct RainOverrides {
    #[arg(long = "angle-deg", allow_negative_numbers = true)]
    pub angle_deg: Option<f64>,
    #[arg(long = "length-px")]
    pub length_px: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub intensity: Option<f64>,
    #[arg(long = "intensity-jitter")]
    pub intensity_jitter: Option<f64>,
    #[arg(long = "rain-seed")]
    pub seed: Option<u64>,
}

impl RainOverrides {
    pub fn apply(&self, p: &mut RainParams) {
        set!(p.angle_deg, self.angle_deg);
        set!(p.length_px, self.length_px);
        set!(p.density, self.density);
        set!(p.intensity, self.intensity);
        set!(p.intensity_jitter, self.intensity_jitter);
        set!(p.seed, self.seed);
    }
}

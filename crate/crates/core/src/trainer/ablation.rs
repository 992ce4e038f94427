//! Trains model variants under one protocol and compares them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::{param_count, FusionMode, ModelConfig};
use crate::datapipe::ImagePair;
use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::fit::{evaluate_model, Trainer};

/// Model fields a variant may override; unset fields keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    #[serde(default)]
    pub name: Option<String>,
    pub num_mheb: Option<usize>,
    pub base_channels: Option<usize>,
    pub dcr_units_per_stream: Option<usize>,
    pub dcr_growth: Option<usize>,
    pub attention_reduction: Option<usize>,
    pub fusion_mode: Option<FusionMode>,
    pub use_hadb: Option<bool>,
}

impl Variant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        if let Some(v) = self.num_mheb {
            m.num_mheb = v;
        }
        if let Some(v) = self.base_channels {
            m.base_channels = v;
        }
        if let Some(v) = self.dcr_units_per_stream {
            m.dcr_units_per_stream = v;
        }
        if self.dcr_growth.is_some() {
            m.dcr_growth = self.dcr_growth;
        }
        if let Some(v) = self.attention_reduction {
            m.attention_reduction = v;
        }
        if let Some(v) = self.fusion_mode {
            m.fusion_mode = v;
        }
        if let Some(v) = self.use_hadb {
            m.use_hadb = v;
        }
        m
    }

    pub fn label(&self, model: &ModelConfig) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!(
                "N={} {}{}",
                model.num_mheb,
                model.fusion_mode,
                if model.use_hadb { "" } else { " no-hadb" }
            )
        })
    }
}

/// A list of variants, read from TOML as repeated `[[variant]]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default, rename = "variant")]
    pub variants: Vec<Variant>,
}

impl AblationGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// One variant per depth.
    pub fn depths(ns: &[usize]) -> Self {
        Self {
            variants: ns
                .iter()
                .map(|&n| Variant {
                    name: Some(format!("N={n}")),
                    num_mheb: Some(n),
                    ..Variant::default()
                })
                .collect(),
        }
    }

    /// Concatenation, addition and projected fusion, all with attentive
    /// distillation.
    pub fn fusion() -> Self {
        Self {
            variants: vec![
                fusion_variant("concat", FusionMode::Concat, true),
                fusion_variant("add", FusionMode::Add, true),
                fusion_variant("rpf", FusionMode::Rpf, true),
            ],
        }
    }

    /// The fusion grid preceded by the concatenation model without
    /// attentive distillation.
    pub fn distillation_and_fusion() -> Self {
        let mut g = Self::fusion();
        g.variants.insert(0, fusion_variant("no-hadb concat", FusionMode::Concat, false));
        g
    }
}

fn fusion_variant(name: &str, mode: FusionMode, hadb: bool) -> Variant {
    Variant {
        name: Some(name.to_string()),
        fusion_mode: Some(mode),
        use_hadb: Some(hadb),
        ..Variant::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub model: ModelConfig,
    pub param_count: Option<usize>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    /// Set when this variant failed; the other rows are unaffected.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureCheck {
    pub description: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Trains every variant from the same seeds on the same data and scores it
/// on `eval` (or on the training pairs when no eval set is given).
pub fn run_ablation(
    base: &TrainConfig,
    grid: &AblationGrid,
    train: &[ImagePair],
    eval: Option<&[ImagePair]>,
) -> Result<AblationTable> {
    if grid.variants.is_empty() {
        return Err(Error::pre("ablation grid has no variants"));
    }
    let eval = eval.unwrap_or(train);
    let mut rows = Vec::with_capacity(grid.variants.len());
    for v in &grid.variants {
        let model = v.apply(&base.model);
        let label = v.label(&model);
        let mut row = AblationRow {
            variant: label.clone(),
            model: model.clone(),
            param_count: None,
            psnr_db: None,
            ssim: None,
            error: None,
        };
        let outcome = (|| -> Result<()> {
            row.param_count = Some(param_count(&model)?);
            let mut trainer = Trainer::new(TrainConfig {
                model: model.clone(),
                ..base.clone()
            })?;
            trainer.run(train, None, None)?;
            let report = evaluate_model(&trainer.model, eval)?;
            row.psnr_db = Some(report.mean_psnr);
            row.ssim = Some(report.mean_ssim);
            Ok(())
        })();
        if let Err(e) = outcome {
            log::warn!("ablation variant {label} failed: {e}");
            row.error = Some(e.to_string());
        } else {
            log::info!("ablation variant {label}: PSNR {:.3} dB", row.psnr_db.unwrap_or(f64::NAN));
        }
        rows.push(row);
    }
    Ok(AblationTable { rows })
}

/// Key of every model field except the named one, for grouping variants.
fn key_without(m: &ModelConfig, field: &str) -> String {
    let mut m = m.clone();
    match field {
        "num_mheb" => m.num_mheb = 0,
        "use_hadb" => m.use_hadb = false,
        _ => {}
    }
    format!("{m:?}")
}

impl AblationTable {
    /// Parameter counts must rise strictly with depth among variants that
    /// differ only in depth, and attentive distillation must be smaller
    /// than its plain-concatenation counterpart.
    pub fn structure_checks(&self) -> Vec<StructureCheck> {
        let mut checks = Vec::new();
        let mut by_depth: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        for r in &self.rows {
            if let Some(p) = r.param_count {
                by_depth.entry(key_without(&r.model, "num_mheb")).or_default().push((r.model.num_mheb, p));
            }
        }
        for group in by_depth.values_mut().filter(|g| g.len() > 1) {
            group.sort();
            group.dedup();
            let passed = group.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1);
            let desc = group.iter().map(|(n, p)| format!("N={n}:{p}")).collect::<Vec<_>>().join(" < ");
            checks.push(StructureCheck {
                description: format!("param_count increases with N ({desc})"),
                passed,
            });
        }
        let mut by_hadb: BTreeMap<String, (Option<usize>, Option<usize>)> = BTreeMap::new();
        for r in &self.rows {
            if let Some(p) = r.param_count {
                let e = by_hadb.entry(key_without(&r.model, "use_hadb")).or_default();
                if r.model.use_hadb {
                    e.0 = Some(p);
                } else {
                    e.1 = Some(p);
                }
            }
        }
        for (with, without) in by_hadb.values().filter_map(|(a, b)| a.zip(*b)) {
            checks.push(StructureCheck {
                description: format!(
                    "param_count with HADB {with} < without {without} (ratio {:.3})",
                    with as f64 / without as f64
                ),
                passed: with < without,
            });
        }
        checks
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,num_mheb,fusion_mode,use_hadb,param_count,psnr_db,ssim,status\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("\"error: {}\"", e.replace('"', "'")),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.variant,
                r.model.num_mheb,
                r.model.fusion_mode,
                r.model.use_hadb,
                r.param_count.map(|p| p.to_string()).unwrap_or_default(),
                opt(r.psnr_db),
                opt(r.ssim),
                status
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>10}  {:>9}  {:>7}", "variant", "params", "PSNR(dB)", "SSIM");
        for r in &self.rows {
            match &r.error {
                None => {
                    let _ = writeln!(
                        s,
                        "{:<width$}  {:>10}  {:>9.4}  {:>7.5}",
                        r.variant,
                        r.param_count.unwrap_or(0),
                        r.psnr_db.unwrap_or(f64::NAN),
                        r.ssim.unwrap_or(f64::NAN)
                    );
                }
                Some(e) => {
                    let _ = writeln!(s, "{:<width$}  failed: {e}", r.variant);
                }
            }
        }
        s
    }
}

//! Synthetic rain: seeded streak fields added to clean images (`O = B + R`).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

/// Parametric description of one synthetic rain field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RainParams {
    /// Streak direction, degrees from vertical.
    pub angle_deg: f64,
    pub length_px: usize,
    /// Fraction of pixels that seed a streak.
    pub density: f64,
    pub intensity: f64,
    /// Relative spread of per-streak intensity.
    pub intensity_jitter: f64,
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            angle_deg: 10.0,
            length_px: 9,
            density: 0.03,
            intensity: 0.8,
            intensity_jitter: 0.3,
            seed: 0,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(-45.0..=45.0).contains(&self.angle_deg) {
            v.push(format!("rain angle_deg must be within [-45, 45] (got {})", self.angle_deg));
        }
        if self.length_px < 1 {
            v.push("rain length_px must be >= 1".to_string());
        }
        for (name, val) in [
            ("density", self.density),
            ("intensity", self.intensity),
            ("intensity_jitter", self.intensity_jitter),
        ] {
            if !(0.0..=1.0).contains(&val) {
                v.push(format!("rain {name} must be within [0, 1] (got {val})"));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Square 2-D kernel stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2d {
    pub side: usize,
    pub data: Vec<f64>,
}

impl Kernel2d {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.side + x]
    }
}

/// Normalized line kernel of `length_px` samples through the centre,
/// rotated `angle_deg` from vertical. Each sample lands on its nearest pixel.
pub fn make_streak_kernel(angle_deg: f64, length_px: usize) -> Kernel2d {
    let length = length_px.max(1);
    let side = if length % 2 == 1 { length } else { length + 1 };
    let centre = (side / 2) as f64;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut data = vec![0.0; side * side];
    let half = (length as f64 - 1.0) / 2.0;
    for t in 0..length {
        let s = t as f64 - half;
        let y = (centre + s * cos).round() as usize;
        let x = (centre + s * sin).round() as usize;
        data[y.min(side - 1) * side + x.min(side - 1)] += 1.0;
    }
    let total: f64 = data.iter().sum();
    for v in &mut data {
        *v /= total;
    }
    Kernel2d { side, data }
}

/// Single-channel rain map `[1, 1, height, width]` with values in `[0, 1]`.
///
/// Seeds are pixels whose uniform draw exceeds `1 - density`; each carries
/// `intensity · (1 - jitter · u)` and is smeared by the streak kernel.
pub fn synth_rain_layer(height: usize, width: usize, p: &RainParams) -> Result<Tensor<f32>> {
    p.validate()?;
    let kernel = make_streak_kernel(p.angle_deg, p.length_px);
    if height < kernel.side || width < kernel.side {
        return Err(Error::pre(format!(
            "rain layer {height}x{width} is smaller than the {0}x{0} streak kernel",
            kernel.side
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let threshold = 1.0 - p.density;
    let mut seeds = vec![0.0f64; height * width];
    for s in seeds.iter_mut() {
        let u: f64 = rng.gen();
        let j: f64 = rng.gen();
        if p.density > 0.0 && u >= threshold {
            *s = p.intensity * (1.0 - p.intensity_jitter * j);
        }
    }
    let r = (kernel.side / 2) as isize;
    let mut out = Tensor::zeros([1, 1, height, width]);
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for ky in 0..kernel.side {
                let sy = y as isize + ky as isize - r;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..kernel.side {
                    let sx = x as isize + kx as isize - r;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    let k = kernel.at(ky, kx);
                    if k != 0.0 {
                        acc += k * seeds[sy as usize * width + sx as usize];
                    }
                }
            }
            out.set([0, 0, y, x], acc.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(out)
}

/// `rainy = clip(clean + rain, 0, 1)` with the rain map broadcast over RGB.
/// Returns the rainy image and the rain map.
pub fn apply_rain(clean: &Tensor<f32>, p: &RainParams) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let [_, _, h, w] = clean.shape();
    if !clean.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
        return Err(Error::pre("clean image values must be finite and within [0, 1]"));
    }
    let rain = synth_rain_layer(h, w, p)?;
    let rainy = Tensor::from_fn(clean.shape(), |[s, c, y, x]| {
        (clean.at([s, c, y, x]) + rain.at([0, 0, y, x])).clamp(0.0, 1.0)
    });
    Ok((rainy, rain))
}

/// One generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub clean_file: String,
    pub rainy_file: String,
    pub angle_deg: f64,
    pub length_px: usize,
    pub density: f64,
    pub intensity: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { rows })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

/// Seed for image `index` under a parameter set, derived by a SplitMix64 step.
pub fn derive_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Renders every clean image under every parameter set into
/// `rain-K.png` / `norain-K.png` pairs (K from 1) plus `manifest.csv`.
pub fn generate_dataset(clean_dir: &Path, params_grid: &[RainParams], out_dir: &Path) -> Result<Manifest> {
    if params_grid.is_empty() {
        return Err(Error::pre("rain parameter grid is empty"));
    }
    for p in params_grid {
        p.validate()?;
    }
    let files = list_images(clean_dir)?;
    if files.is_empty() {
        return Err(Error::pre(format!("no images found in {}", clean_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest::default();
    let mut k = 0;
    for (i, file) in files.iter().enumerate() {
        let clean = imageio::load_rgb(file)?;
        for p in params_grid {
            k += 1;
            let params = RainParams {
                seed: derive_seed(p.seed, i),
                ..p.clone()
            };
            let (rainy, _) = apply_rain(&clean, &params).map_err(|e| match e {
                Error::Precondition(m) => Error::pre(format!("{}: {m}", file.display())),
                other => other,
            })?;
            let clean_name = format!("norain-{k}.png");
            let rainy_name = format!("rain-{k}.png");
            imageio::save_png(&out_dir.join(&clean_name), &clean)?;
            imageio::save_png(&out_dir.join(&rainy_name), &rainy)?;
            manifest.rows.push(ManifestRow {
                index: k,
                clean_file: clean_name,
                rainy_file: rainy_name,
                angle_deg: params.angle_deg,
                length_px: params.length_px,
                density: params.density,
                intensity: params.intensity,
                seed: params.seed,
            });
        }
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

//! Paired dataset indexing, aligned patch sampling and batch assembly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::rainsim::{self, derive_seed, Manifest, MANIFEST_FILE};
use crate::tensor::Tensor;

/// How rainy and clean files are matched inside a dataset directory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamingScheme {
    /// `rain-N.*` next to `norain-N.*`.
    #[default]
    RainNorain,
    /// Pairs listed in a generated `manifest.csv`.
    Manifest,
}

impl fmt::Display for NamingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RainNorain => "rain_norain",
            Self::Manifest => "manifest",
        })
    }
}

impl FromStr for NamingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain_norain" => Ok(Self::RainNorain),
            "manifest" => Ok(Self::Manifest),
            other => Err(Error::Parse(format!(
                "unknown naming scheme '{other}' (expected rain_norain or manifest)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub rainy: PathBuf,
    pub clean: PathBuf,
}

impl PairEntry {
    /// File name of the rainy image, used as the pair's display name.
    pub fn name(&self) -> String {
        file_name(&self.rainy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairIndex {
    pub entries: Vec<PairEntry>,
    pub naming_scheme: NamingScheme,
    /// One message per skipped file or pair.
    pub warnings: Vec<String>,
}

impl PairIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Splits `rain-12.png` into `("rain", "12")`.
fn split_pair_name(path: &Path) -> Option<(&'static str, String)> {
    let stem = path.file_stem()?.to_str()?;
    for prefix in ["norain", "rain"] {
        if let Some(key) = stem.strip_prefix(prefix).and_then(|s| s.strip_prefix('-')) {
            if !key.is_empty() {
                return Some((prefix, key.to_string()));
            }
        }
    }
    None
}

/// Orders keys numerically when both parse, otherwise by text.
fn key_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Indexes the pairs under `root`. Unpaired files and pairs whose images
/// disagree in size are skipped with a warning.
pub fn index_dataset(root: &Path, scheme: NamingScheme) -> Result<PairIndex> {
    if !root.is_dir() {
        return Err(Error::pre(format!("dataset directory {} does not exist", root.display())));
    }
    let mut warnings = Vec::new();
    let candidates = match scheme {
        NamingScheme::RainNorain => pair_by_name(root, &mut warnings)?,
        NamingScheme::Manifest => {
            let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
            let mut rows: Vec<_> = manifest.rows;
            rows.sort_by_key(|r| r.index);
            rows.into_iter()
                .map(|r| PairEntry {
                    rainy: root.join(r.rainy_file),
                    clean: root.join(r.clean_file),
                })
                .collect()
        }
    };
    let mut entries = Vec::with_capacity(candidates.len());
    for e in candidates {
        match (image::image_dimensions(&e.rainy), image::image_dimensions(&e.clean)) {
            (Ok(a), Ok(b)) if a == b => entries.push(e),
            (Ok(a), Ok(b)) => warnings.push(format!(
                "{}: size {}x{} differs from {} ({}x{}), skipped",
                e.rainy.display(),
                a.0,
                a.1,
                file_name(&e.clean),
                b.0,
                b.1
            )),
            (Err(err), _) => warnings.push(format!("{}: {err}, skipped", e.rainy.display())),
            (_, Err(err)) => warnings.push(format!("{}: {err}, skipped", e.clean.display())),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    if entries.is_empty() {
        return Err(Error::pre(format!("no pairs found in {}", root.display())));
    }
    Ok(PairIndex {
        entries,
        naming_scheme: scheme,
        warnings,
    })
}

fn pair_by_name(root: &Path, warnings: &mut Vec<String>) -> Result<Vec<PairEntry>> {
    let mut rain = Vec::new();
    let mut clean = Vec::new();
    for path in rainsim::list_images(root)? {
        match split_pair_name(&path) {
            Some(("rain", key)) => rain.push((key, path)),
            Some((_, key)) => clean.push((key, path)),
            None => warnings.push(format!("{}: not a rain-N/norain-N file, skipped", path.display())),
        }
    }
    rain.sort_by(|a, b| key_order(&a.0, &b.0));
    let mut out = Vec::new();
    for (key, path) in rain {
        match clean.iter().position(|(k, _)| *k == key) {
            Some(i) => out.push(PairEntry {
                rainy: path,
                clean: clean.swap_remove(i).1,
            }),
            None => warnings.push(format!("{}: no matching norain-{key}, skipped", path.display())),
        }
    }
    clean.sort_by(|a, b| key_order(&a.0, &b.0));
    for (key, path) in clean {
        warnings.push(format!("{}: no matching rain-{key}, skipped", path.display()));
    }
    Ok(out)
}

/// A decoded pair held in memory, each image `[1, 3, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub rainy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

pub fn load_pairs(index: &PairIndex) -> Result<Vec<ImagePair>> {
    index
        .entries
        .iter()
        .map(|e| {
            let rainy = imageio::load_rgb(&e.rainy)?;
            let clean = imageio::load_rgb(&e.clean)?;
            if rainy.shape() != clean.shape() {
                return Err(Error::pre(format!("{}: rainy and clean sizes differ", e.name())));
            }
            Ok(ImagePair {
                name: e.name(),
                rainy,
                clean,
            })
        })
        .collect()
}

fn crop_at(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    Tensor::from_fn([1, t.channels(), size, size], |[_, c, y, x]| t.at([0, c, y0 + y, x0 + x]))
}

/// Draws one crop origin and applies it to both images.
pub fn sample_patch(pair: &ImagePair, size: usize, rng: &mut impl Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (y0, x0) = sample_origin(pair, size, rng)?;
    Ok((crop_at(&pair.rainy, y0, x0, size), crop_at(&pair.clean, y0, x0, size)))
}

/// Top-left corner of a random `size`×`size` crop, uniform over all valid positions.
pub fn sample_origin(pair: &ImagePair, size: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let [_, _, h, w] = pair.rainy.shape();
    if size == 0 || h < size || w < size {
        return Err(Error::pre(format!(
            "{}: image {h}x{w} is smaller than patch size {size}",
            pair.name
        )));
    }
    Ok((rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)))
}

pub fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.width();
    Tensor::from_fn(t.shape(), |[n, c, y, x]| t.at([n, c, y, w - 1 - x]))
}

/// Mirrors both patches with probability 0.5. Returns whether it flipped.
pub fn augment(rainy: &mut Tensor<f32>, clean: &mut Tensor<f32>, rng: &mut impl Rng) -> bool {
    let flip = rng.gen_bool(0.5);
    if flip {
        *rainy = flip_horizontal(rainy);
        *clean = flip_horizontal(clean);
    }
    flip
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rainy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

/// Number of full batches per epoch; the remainder is dropped.
pub fn batches_per_epoch(pairs: usize, batch_size: usize) -> usize {
    if batch_size == 0 {
        0
    } else {
        pairs / batch_size
    }
}

/// Visiting order of the pairs in `epoch`.
pub fn epoch_order(pairs: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pairs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch));
    order.shuffle(&mut rng);
    order
}

/// One epoch of batches. Every batch draws its crops and flips from its own
/// generator keyed by `(seed, epoch, batch)`, so any batch can be rebuilt
/// on its own (which is what makes mid-epoch resumption exact).
pub struct EpochBatches<'a> {
    pairs: &'a [ImagePair],
    order: Vec<usize>,
    batch_size: usize,
    patch_size: usize,
    seed: u64,
    epoch: usize,
    next: usize,
}

/// Batches for one epoch over `pairs`.
pub fn make_batches(
    pairs: &[ImagePair],
    batch_size: usize,
    patch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochBatches<'_>> {
    if batch_size == 0 {
        return Err(Error::pre("batch_size must be >= 1"));
    }
    if patch_size == 0 {
        return Err(Error::pre("patch_size must be >= 1"));
    }
    Ok(EpochBatches {
        pairs,
        order: epoch_order(pairs.len(), seed, epoch),
        batch_size,
        patch_size,
        seed,
        epoch,
        next: 0,
    })
}

impl EpochBatches<'_> {
    pub fn len(&self) -> usize {
        batches_per_epoch(self.pairs.len(), self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Moves the cursor so that the next batch returned is `index`.
    pub fn skip_to(&mut self, index: usize) {
        self.next = index;
    }

    /// Builds batch `index` of this epoch.
    pub fn batch(&self, index: usize) -> Result<Batch> {
        let batch_seed = derive_seed(derive_seed(self.seed, self.epoch), index + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let mut rainy = Vec::with_capacity(self.batch_size);
        let mut clean = Vec::with_capacity(self.batch_size);
        for &i in &self.order[index * self.batch_size..(index + 1) * self.batch_size] {
            let (mut r, mut c) = sample_patch(&self.pairs[i], self.patch_size, &mut rng)?;
            augment(&mut r, &mut c, &mut rng);
            rainy.push(r);
            clean.push(c);
        }
        Ok(Batch {
            rainy: Tensor::stack(&rainy.iter().collect::<Vec<_>>()),
            clean: Tensor::stack(&clean.iter().collect::<Vec<_>>()),
        })
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.len() {
            return None;
        }
        let b = self.batch(self.next);
        self.next += 1;
        Some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rainsim::RainParams;

    fn gradient_pair(name: &str, h: usize, w: usize) -> ImagePair {
        let clean = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| ((c * 31 + y * 7 + x * 3) % 256) as f32 / 255.0);
        ImagePair {
            name: name.to_string(),
            rainy: clean.clone(),
            clean,
        }
    }

    fn write_pair(dir: &Path, k: &str, h: usize, w: usize) {
        let t = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| ((c + y + x) % 2) as f32);
        imageio::save_png(&dir.join(format!("rain-{k}.png")), &t).unwrap();
        imageio::save_png(&dir.join(format!("norain-{k}.png")), &t).unwrap();
    }

    #[test]
    fn pairs_sorted_by_index() {
        let dir = tempfile::tempdir().unwrap();
        for k in ["3", "1", "10", "2"] {
            write_pair(dir.path(), k, 8, 8);
        }
        let idx = index_dataset(dir.path(), NamingScheme::RainNorain).unwrap();
        let names: Vec<_> = idx.entries.iter().map(|e| e.name()).collect();
        assert_eq!(names, ["rain-1.png", "rain-2.png", "rain-3.png", "rain-10.png"]);
        assert!(idx.warnings.is_empty());
        for e in &idx.entries {
            assert_eq!(file_name(&e.clean), format!("no{}", e.name()));
        }
    }

    #[test]
    fn missing_partner_is_skipped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        for k in ["1", "2", "3"] {
            write_pair(dir.path(), k, 8, 8);
        }
        std::fs::remove_file(dir.path().join("norain-2.png")).unwrap();
        let idx = index_dataset(dir.path(), NamingScheme::RainNorain).unwrap();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.warnings.len(), 1);
        assert!(idx.warnings[0].contains("rain-2.png"), "{:?}", idx.warnings);
    }

    #[test]
    fn size_mismatch_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "1", 8, 8);
        write_pair(dir.path(), "2", 8, 8);
        imageio::save_png(&dir.path().join("norain-2.png"), &Tensor::zeros([1, 3, 8, 12])).unwrap();
        let idx = index_dataset(dir.path(), NamingScheme::RainNorain).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.warnings.len(), 1);
    }

    #[test]
    fn empty_directory_has_no_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let err = index_dataset(dir.path(), NamingScheme::RainNorain).unwrap_err();
        assert!(err.to_string().contains("no pairs found"), "{err}");
        assert!(index_dataset(&dir.path().join("absent"), NamingScheme::RainNorain).is_err());
    }

    #[test]
    fn manifest_scheme_reads_generated_dataset() {
        let clean_dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        for i in 0..2 {
            let t = Tensor::from_fn([1, 3, 16, 16], |[_, c, y, x]| ((c + y * i + x) % 5) as f32 / 4.0);
            imageio::save_png(&clean_dir.path().join(format!("img{i}.png")), &t).unwrap();
        }
        let grid = [RainParams { length_px: 3, ..RainParams::default() }];
        rainsim::generate_dataset(clean_dir.path(), &grid, out.path()).unwrap();
        let a = index_dataset(out.path(), NamingScheme::Manifest).unwrap();
        let b = index_dataset(out.path(), NamingScheme::RainNorain).unwrap();
        assert_eq!(a.entries, b.entries);
        assert_eq!(a.len(), 2);
        // manifest.csv is not an image and must not be reported.
        assert!(b.warnings.is_empty(), "{:?}", b.warnings);
    }

    #[test]
    fn full_size_patch_is_the_image() {
        let pair = gradient_pair("a", 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (r, c) = sample_patch(&pair, 16, &mut rng).unwrap();
        assert_eq!(r, pair.rainy);
        assert_eq!(c, pair.clean);
        assert!(matches!(sample_patch(&pair, 17, &mut rng), Err(Error::Precondition(_))));
    }

    #[test]
    fn crop_origins_cover_valid_range() {
        let pair = gradient_pair("a", 128, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut seen_y, mut seen_x) = (vec![false; 65], vec![false; 65]);
        for _ in 0..1000 {
            let (y, x) = sample_origin(&pair, 64, &mut rng).unwrap();
            seen_y[y] = true;
            seen_x[x] = true;
        }
        assert!(seen_y[0] && seen_y[64] && seen_x[0] && seen_x[64]);
        let covered = seen_y.iter().chain(&seen_x).filter(|&&b| b).count();
        assert!(covered >= 120, "covered {covered} of 130 positions");
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let t = gradient_pair("a", 4, 6).rainy;
        assert_ne!(flip_horizontal(&t), t);
        assert_eq!(flip_horizontal(&flip_horizontal(&t)), t);
    }

    #[test]
    fn batches_are_deterministic_and_drop_last() {
        let pairs: Vec<_> = (0..20).map(|i| gradient_pair(&format!("p{i}"), 24, 24)).collect();
        let a: Vec<_> = make_batches(&pairs, 16, 8, 7, 0).unwrap().map(|b| b.unwrap()).collect();
        let b: Vec<_> = make_batches(&pairs, 16, 8, 7, 0).unwrap().map(|b| b.unwrap()).collect();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
        assert_eq!(a[0].rainy.shape(), [16, 3, 8, 8]);
        assert!(a[0].rainy.min_value() >= 0.0 && a[0].rainy.max_value() <= 1.0);
        let other = make_batches(&pairs, 16, 8, 7, 1).unwrap().batch(0).unwrap();
        assert_ne!(other, a[0]);
        assert!(make_batches(&pairs, 0, 8, 7, 0).is_err());
        assert_eq!(make_batches(&pairs[..3], 4, 8, 7, 0).unwrap().count(), 0);
    }

    #[test]
    fn skip_to_resumes_mid_epoch() {
        let pairs: Vec<_> = (0..6).map(|i| gradient_pair(&format!("p{i}"), 12, 12)).collect();
        let all: Vec<_> = make_batches(&pairs, 2, 8, 1, 4).unwrap().map(|b| b.unwrap()).collect();
        let mut it = make_batches(&pairs, 2, 8, 1, 4).unwrap();
        it.skip_to(2);
        assert_eq!(it.next().unwrap().unwrap(), all[2]);
        assert!(it.next().is_none());
    }
}

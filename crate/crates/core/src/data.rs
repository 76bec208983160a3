//! Datasets, on-disk cache, and forget/retain splitting.
//!
//! Cache layout: `<cache_dir>/<name>/{train,test}.bin` plus `manifest.json`.
//! Each `.bin` holds the magic `UNFDATA1`, five little-endian `u32`s
//! (count, channels, height, width, classes), one label byte per image and
//! then the pixels as bytes in `[N, C, H, W]` order. Pixels are divided by
//! 255 on load.
//!
//! CIFAR-10 and SVHN are ingested from their official distribution files
//! placed under `<cache_dir>/<name>/raw/` (CIFAR-10 binary batches, SVHN
//! `train_32x32.mat` / `test_32x32.mat`). Nothing is downloaded.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{invalid, Error, Result, Samples, Tensor};

const MAGIC: &[u8; 8] = b"UNFDATA1";

/// Share of the official test split held back as the remembrance pool.
pub const REMEMBRANCE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let name = name.into();
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "{name}: images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Dataset(format!("{name}: label {bad} outside [0, {class_count})")));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset(format!("{name}: pixel values outside [0, 1]")));
        }
        Ok(Self {
            name,
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn image_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    pub fn samples(&self) -> Samples {
        Samples {
            images: self.images.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        Samples {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Indices carrying `class_id`, ascending.
    pub fn class_view(&self, class_id: usize) -> Result<Vec<usize>> {
        if class_id >= self.class_count {
            return Err(invalid(format!(
                "class {class_id} outside [0, {})",
                self.class_count
            )));
        }
        Ok((0..self.len()).filter(|&i| self.labels[i] == class_id).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Train split plus the two disjoint parts of the test split.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: LabeledDataset,
    /// Held-out samples for accuracy and membership evaluation.
    pub eval: LabeledDataset,
    /// Samples reserved for remembrance training.
    pub remembrance_pool: LabeledDataset,
}

impl DatasetBundle {
    /// Carve `test` into remembrance pool (first share after a seeded
    /// shuffle) and evaluation split.
    pub fn from_splits(train: LabeledDataset, test: LabeledDataset, seed: u64) -> Result<Self> {
        let mut order: Vec<usize> = (0..test.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (test.len() as f64 * REMEMBRANCE_FRACTION).round() as usize;
        let (mut pool, mut eval) = (order[..cut].to_vec(), order[cut..].to_vec());
        pool.sort_unstable();
        eval.sort_unstable();
        let part = |idx: &[usize], suffix: &str| {
            let s = test.subset(idx);
            LabeledDataset::new(format!("{}-{suffix}", test.name), s.images, s.labels, test.class_count)
        };
        Ok(Self {
            eval: part(&eval, "eval")?,
            remembrance_pool: part(&pool, "remembrance")?,
            train,
        })
    }
}

/// Parameters of the `synthetic_gaussians` toy set: 2-D points drawn around
/// per-class centers, each rendered as a Gaussian bump on a square grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Sub-blobs per class; each class's points split evenly among them.
    pub sub_blobs: usize,
    /// Standard deviation of points around their sub-blob center (grid units).
    pub spread: f64,
    /// Distance of sub-blob centers from the class center.
    pub sub_offset: f64,
    /// Radius of the circle holding the class centers.
    pub radius: f64,
    /// Width of the rendered bump.
    pub bump: f64,
    pub pixel_noise: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 100,
            test_per_class: 50,
            sub_blobs: 2,
            spread: 0.25,
            sub_offset: 0.8,
            radius: 2.5,
            bump: 1.0,
            pixel_noise: 0.02,
            size: 8,
            seed: 0,
        }
    }
}

/// Rendered toy samples plus the sub-blob each point was drawn from.
#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub dataset: LabeledDataset,
    pub components: Vec<usize>,
}

fn render_synthetic(cfg: &SyntheticConfig, per_class: usize, name: &str, rng: &mut ChaCha8Rng) -> Result<SyntheticSplit> {
    let s = cfg.size;
    let n = cfg.classes * per_class;
    let mut images = Tensor::zeros(IxDyn(&[n, 1, s, s]));
    let mut labels = Vec::with_capacity(n);
    let mut components = Vec::with_capacity(n);
    let mid = (s as f64 - 1.0) / 2.0;
    let tau = std::f64::consts::TAU;
    for class in 0..cfg.classes {
        let a = tau * class as f64 / cfg.classes as f64;
        let (cx, cy) = (mid + cfg.radius * a.cos(), mid + cfg.radius * a.sin());
        for k in 0..per_class {
            let i = class * per_class + k;
            let blob = k * cfg.sub_blobs / per_class.max(1);
            let (bx, by) = if cfg.sub_blobs > 1 {
                let b = a + tau * blob as f64 / cfg.sub_blobs as f64 + tau / 4.0;
                (cx + cfg.sub_offset * b.cos(), cy + cfg.sub_offset * b.sin())
            } else {
                (cx, cy)
            };
            let gx: f64 = StandardNormal.sample(rng);
            let gy: f64 = StandardNormal.sample(rng);
            let (px, py) = (bx + cfg.spread * gx, by + cfg.spread * gy);
            for y in 0..s {
                for x in 0..s {
                    let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                    let noise: f64 = StandardNormal.sample(rng);
                    let v = (-d2 / (2.0 * cfg.bump * cfg.bump)).exp() + cfg.pixel_noise * noise;
                    images[[i, 0, y, x]] = v.clamp(0.0, 1.0);
                }
            }
            labels.push(class);
            components.push(blob);
        }
    }
    Ok(SyntheticSplit {
        dataset: LabeledDataset::new(name, images, labels, cfg.classes)?,
        components,
    })
}

/// Train and test splits of the toy set. Samples are stored class-major.
pub fn synthetic_gaussians(cfg: &SyntheticConfig) -> Result<(SyntheticSplit, SyntheticSplit)> {
    if cfg.classes < 2 || cfg.per_class == 0 || cfg.sub_blobs == 0 || cfg.size == 0 {
        return Err(invalid("synthetic set needs >= 2 classes, >= 1 sample and >= 1 sub-blob"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = render_synthetic(cfg, cfg.per_class, "synthetic_gaussians", &mut rng)?;
    let test = render_synthetic(cfg, cfg.test_per_class, "synthetic_gaussians-test", &mut rng)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Cifar10,
    Svhn,
    SyntheticGaussians,
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "svhn" => Ok(Self::Svhn),
            "synthetic_gaussians" => Ok(Self::SyntheticGaussians),
            other => Err(Error::Dataset(format!("unknown dataset '{other}'"))),
        }
    }
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cifar10 => "cifar10",
            Self::Svhn => "svhn",
            Self::SyntheticGaussians => "synthetic_gaussians",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub synthetic: SyntheticConfig,
    /// Seed of the remembrance/eval carve of the test split.
    pub split_seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            split_seed: 0,
        }
    }
}

pub fn load_dataset(name: &str, cache_dir: &Path) -> Result<DatasetBundle> {
    load_dataset_with(name, cache_dir, &LoadOptions::default())
}

/// Load a dataset. The toy set is generated in memory; the image datasets
/// are read from the cache, ingesting raw files on first use.
pub fn load_dataset_with(name: &str, cache_dir: &Path, opts: &LoadOptions) -> Result<DatasetBundle> {
    let which: DatasetName = name.parse()?;
    let (train, test) = match which {
        DatasetName::SyntheticGaussians => {
            let (tr, te) = synthetic_gaussians(&opts.synthetic)?;
            (tr.dataset, te.dataset)
        }
        _ => load_cached(which, cache_dir)?,
    };
    DatasetBundle::from_splits(train, test, opts.split_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub train_count: usize,
    pub test_count: usize,
    pub image_shape: Vec<usize>,
    pub class_count: usize,
    pub normalization: String,
    pub train_sha256: String,
    pub test_sha256: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn load_cached(which: DatasetName, cache_dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let dir = cache_dir.join(which.as_str());
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        ingest_raw(which, &dir)?;
    }
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    let train_path = dir.join("train.bin");
    let test_path = dir.join("test.bin");
    for (p, want) in [(&train_path, &manifest.train_sha256), (&test_path, &manifest.test_sha256)] {
        if !p.exists() || &sha256_file(p)? != want {
            return Err(Error::Dataset(format!(
                "cache file {} is missing or corrupt and downloading is disabled",
                p.display()
            )));
        }
    }
    Ok((
        read_bin(&train_path, which.as_str())?,
        read_bin(&test_path, &format!("{}-test", which.as_str()))?,
    ))
}

/// Raw images as bytes `[N, C, H, W]` with labels.
struct RawSplit {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    shape: [usize; 3],
}

fn ingest_raw(which: DatasetName, dir: &Path) -> Result<()> {
    let raw = dir.join("raw");
    let missing = || {
        Error::Dataset(format!(
            "no cache for {} and downloading is disabled; place the official files under {}",
            which.as_str(),
            raw.display()
        ))
    };
    if !raw.is_dir() {
        return Err(missing());
    }
    let (train, test) = match which {
        DatasetName::Cifar10 => {
            let find = |f: &str| -> Option<PathBuf> {
                [raw.join(f), raw.join("cifar-10-batches-bin").join(f)]
                    .into_iter()
                    .find(|p| p.exists())
            };
            let mut train = RawSplit {
                pixels: Vec::new(),
                labels: Vec::new(),
                shape: [3, 32, 32],
            };
            for b in 1..=5 {
                let p = find(&format!("data_batch_{b}.bin")).ok_or_else(missing)?;
                read_cifar_batch(&p, &mut train)?;
            }
            let mut test = RawSplit {
                pixels: Vec::new(),
                labels: Vec::new(),
                shape: [3, 32, 32],
            };
            read_cifar_batch(&find("test_batch.bin").ok_or_else(missing)?, &mut test)?;
            (train, test)
        }
        DatasetName::Svhn => {
            let tr = raw.join("train_32x32.mat");
            let te = raw.join("test_32x32.mat");
            if !tr.exists() || !te.exists() {
                return Err(missing());
            }
            (read_svhn(&tr)?, read_svhn(&te)?)
        }
        DatasetName::SyntheticGaussians => unreachable!("toy set is not cached"),
    };
    write_bin(&dir.join("train.bin"), &train, 10)?;
    write_bin(&dir.join("test.bin"), &test, 10)?;
    let manifest = Manifest {
        name: which.as_str().into(),
        train_count: train.labels.len(),
        test_count: test.labels.len(),
        image_shape: train.shape.to_vec(),
        class_count: 10,
        normalization: "u8 / 255".into(),
        train_sha256: sha256_file(&dir.join("train.bin"))?,
        test_sha256: sha256_file(&dir.join("test.bin"))?,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_cifar_batch(path: &Path, out: &mut RawSplit) -> Result<()> {
    let bytes = std::fs::read(path)?;
    const REC: usize = 1 + 3072;
    if bytes.len() % REC != 0 {
        return Err(Error::Dataset(format!("{} is not a CIFAR-10 binary batch", path.display())));
    }
    for rec in bytes.chunks(REC) {
        if rec[0] > 9 {
            return Err(Error::Dataset(format!("bad CIFAR-10 label {}", rec[0])));
        }
        out.labels.push(rec[0]);
        out.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

fn read_svhn(path: &Path) -> Result<RawSplit> {
    let vars = crate::mat::read_mat(&std::fs::read(path)?)?;
    let x = vars
        .iter()
        .find(|v| v.name == "X")
        .ok_or_else(|| Error::Dataset("SVHN file lacks X".into()))?;
    let y = vars
        .iter()
        .find(|v| v.name == "y")
        .ok_or_else(|| Error::Dataset("SVHN file lacks y".into()))?;
    // X is [32, 32, 3, N] in column-major order
    if x.dims.len() != 4 || x.dims[0] != 32 || x.dims[1] != 32 || x.dims[2] != 3 {
        return Err(Error::Dataset(format!("unexpected SVHN X dims {:?}", x.dims)));
    }
    let n = x.dims[3];
    if y.values.len() != n {
        return Err(Error::Dataset("SVHN X and y disagree in length".into()));
    }
    let mut pixels = vec![0u8; n * 3 * 32 * 32];
    for i in 0..n {
        for c in 0..3 {
            for col in 0..32 {
                for row in 0..32 {
                    let src = row + 32 * (col + 32 * (c + 3 * i));
                    pixels[((i * 3 + c) * 32 + row) * 32 + col] = x.values.get(src) as u8;
                }
            }
        }
    }
    let labels = y
        .values
        .iter()
        .map(|v| {
            let l = v as u8;
            // digit 0 is stored as 10
            if l == 10 {
                0
            } else {
                l
            }
        })
        .collect();
    Ok(RawSplit {
        pixels,
        labels,
        shape: [3, 32, 32],
    })
}

fn write_bin(path: &Path, split: &RawSplit, classes: u32) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    let [c, h, w] = split.shape;
    for v in [split.labels.len(), c, h, w, classes as usize] {
        f.write_all(&(v as u32).to_le_bytes())?;
    }
    f.write_all(&split.labels)?;
    f.write_all(&split.pixels)?;
    f.flush()?;
    Ok(())
}

fn read_bin(path: &Path, name: &str) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = || Error::Dataset(format!("{} is corrupt", path.display()));
    if bytes.len() < 28 || &bytes[..8] != MAGIC {
        return Err(corrupt());
    }
    let word = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
    let (n, c, h, w, classes) = (word(0), word(1), word(2), word(3), word(4));
    let body = &bytes[28..];
    if body.len() != n + n * c * h * w {
        return Err(corrupt());
    }
    let labels = body[..n].iter().map(|&l| l as usize).collect();
    let images = Tensor::from_shape_vec(
        IxDyn(&[n, c, h, w]),
        body[n..].iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .map_err(|_| corrupt())?;
    LabeledDataset::new(name, images, labels, classes)
}

/// Persist an in-memory dataset pair in the cache format (used for tests and
/// for pre-converted datasets).
pub fn write_cache(dir: &Path, name: &str, train: &LabeledDataset, test: &LabeledDataset) -> Result<()> {
    let dir = dir.join(name);
    std::fs::create_dir_all(&dir)?;
    let to_raw = |d: &LabeledDataset| RawSplit {
        pixels: d.images.iter().map(|v| (v * 255.0).round() as u8).collect(),
        labels: d.labels.iter().map(|&l| l as u8).collect(),
        shape: [d.images.shape()[1], d.images.shape()[2], d.images.shape()[3]],
    };
    write_bin(&dir.join("train.bin"), &to_raw(train), train.class_count as u32)?;
    write_bin(&dir.join("test.bin"), &to_raw(test), test.class_count as u32)?;
    let manifest = Manifest {
        name: name.into(),
        train_count: train.len(),
        test_count: test.len(),
        image_shape: train.image_shape(),
        class_count: train.class_count,
        normalization: "u8 / 255".into(),
        train_sha256: sha256_file(&dir.join("train.bin"))?,
        test_sha256: sha256_file(&dir.join("test.bin"))?,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ForgetMode {
    RandomFraction { fraction: f64 },
    WholeClass { class_id: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgetSpec {
    #[serde(flatten)]
    pub mode: ForgetMode,
    pub seed: u64,
}

impl ForgetSpec {
    pub fn random(fraction: f64, seed: u64) -> Self {
        Self {
            mode: ForgetMode::RandomFraction { fraction },
            seed,
        }
    }

    pub fn class(class_id: usize) -> Self {
        Self {
            mode: ForgetMode::WholeClass { class_id },
            seed: 0,
        }
    }

    pub fn is_class(&self) -> bool {
        matches!(self.mode, ForgetMode::WholeClass { .. })
    }
}

/// Disjoint forget/retain cover of a dataset's index space, both sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitView {
    pub forget: Vec<usize>,
    pub retain: Vec<usize>,
}

impl SplitView {
    /// Complete a forget list over `0..n` into a split.
    pub fn from_forget(n: usize, forget: &[usize]) -> Result<Self> {
        let mut mark = vec![false; n];
        for &i in forget {
            if i >= n {
                return Err(invalid(format!("forget index {i} out of range {n}")));
            }
            mark[i] = true;
        }
        let forget: Vec<usize> = (0..n).filter(|&i| mark[i]).collect();
        let retain: Vec<usize> = (0..n).filter(|&i| !mark[i]).collect();
        if forget.is_empty() {
            return Err(Error::Empty("forget set".into()));
        }
        if retain.is_empty() {
            return Err(Error::Empty("retain set".into()));
        }
        Ok(Self { forget, retain })
    }
}

pub fn split_forget_retain(ds: &LabeledDataset, spec: &ForgetSpec) -> Result<SplitView> {
    let n = ds.len();
    let forget = match spec.mode {
        ForgetMode::RandomFraction { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(invalid(format!("forget fraction {fraction} not in (0, 1)")));
            }
            let k = (fraction * n as f64).round() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            idx.truncate(k);
            idx
        }
        ForgetMode::WholeClass { class_id } => ds.class_view(class_id)?,
    };
    SplitView::from_forget(n, &forget)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LabeledDataset {
        let cfg = SyntheticConfig {
            classes: 2,
            per_class: 50,
            ..Default::default()
        };
        synthetic_gaussians(&cfg).unwrap().0.dataset
    }

    #[test]
    fn toy_set_is_balanced_and_in_range() {
        let ds = toy();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.class_counts(), vec![50, 50]);
        assert!(ds.images.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn random_split_has_rounded_size() {
        let ds = toy();
        let s = split_forget_retain(&ds, &ForgetSpec::random(0.1, 7)).unwrap();
        assert_eq!(s.forget.len(), 10);
        assert_eq!(s.retain.len(), 90);
    }

    #[test]
    fn class_split_removes_the_class() {
        let ds = toy();
        let s = split_forget_retain(&ds, &ForgetSpec::class(1)).unwrap();
        assert!(s.retain.iter().all(|&i| ds.labels[i] == 0));
        assert_eq!(s.forget, ds.class_view(1).unwrap());
    }

    #[test]
    fn empty_sides_are_rejected() {
        let ds = toy();
        assert!(SplitView::from_forget(ds.len(), &[]).is_err());
        let all: Vec<usize> = (0..ds.len()).collect();
        assert!(SplitView::from_forget(ds.len(), &all).is_err());
        assert!(split_forget_retain(&ds, &ForgetSpec::random(1.0, 0)).is_err());
    }

    #[test]
    fn out_of_range_class_view_errors() {
        assert!(toy().class_view(2).is_err());
    }

    #[test]
    fn bundle_split_sizes_add_up() {
        let b = load_dataset("synthetic_gaussians", Path::new("/nonexistent")).unwrap();
        let cfg = SyntheticConfig::default();
        assert_eq!(b.eval.len() + b.remembrance_pool.len(), cfg.classes * cfg.test_per_class);
        assert_eq!(b.remembrance_pool.len(), 40);
    }

    #[test]
    fn unknown_dataset_errors() {
        assert!(load_dataset("mnist", Path::new("/tmp")).is_err());
    }
}

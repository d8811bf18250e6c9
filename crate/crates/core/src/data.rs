//! Image datasets: manifest loading, a seeded synthetic generator, and the
//! resize / augment / normalize pipeline.
//!
//! A dataset directory holds `manifest.csv` (header `path,label,split`, paths
//! relative to the directory) and an optional `dataset.json` sidecar with the
//! class names and per-channel normalization statistics. Without a sidecar
//! classes are named by index and statistics come from the training split.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SIDECAR_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub path: PathBuf,
    pub image: RgbImage,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn of_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Self> {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0usize;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Data("cannot compute statistics of an empty image set".into()));
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
        }
        Ok(NormStats { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub classes: Vec<String>,
    pub norm: NormStats,
}

#[derive(Clone, Debug)]
pub struct LoadedData {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub norm: NormStats,
    pub train: Dataset,
    pub test: Dataset,
}

impl LoadedData {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
    split: String,
}

/// Reads `manifest.csv` (and `dataset.json` if present) under `root` and
/// decodes every referenced image.
pub fn load_dataset(root: &Path) -> Result<LoadedData> {
    let manifest = root.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(Error::Data(format!("manifest not found: {}", manifest.display())));
    }
    let sidecar_path = root.join(SIDECAR_FILE);
    let sidecar: Option<Sidecar> = if sidecar_path.is_file() {
        let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", sidecar_path.display())))?)
    } else {
        None
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&manifest)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
        return Err(Error::Data(format!(
            "{}: header must be `path,label,split`",
            manifest.display()
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut seen: HashSet<PathBuf> = HashSet::new();
    let mut train_paths: HashSet<PathBuf> = HashSet::new();
    for record in reader.deserialize::<ManifestRow>() {
        let row_err = |row: u64, message: String| Error::DataRow { row: row as usize, message };
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line());
            row_err(row, e.to_string())
        })?;
        let row = (train.len() + test.len() + 2) as u64;
        let label: usize = record
            .label
            .parse()
            .map_err(|_| row_err(row, format!("label '{}' is not a non-negative integer", record.label)))?;
        if let Some(sc) = &sidecar {
            if label >= sc.classes.len() {
                return Err(row_err(row, format!("label {label} outside [0, {})", sc.classes.len())));
            }
        }
        let split = Split::parse(&record.split)
            .ok_or_else(|| row_err(row, format!("split '{}' must be train or test", record.split)))?;
        let rel = PathBuf::from(&record.path);
        let path = root.join(&rel);
        if !path.is_file() {
            return Err(row_err(row, format!("image not found: {}", path.display())));
        }
        let canonical = fs::canonicalize(&path).map_err(|e| Error::io(&path, e))?;
        let duplicate = !seen.insert(canonical.clone());
        if duplicate {
            let other_split = if train_paths.contains(&canonical) { Split::Train } else { Split::Test };
            if other_split != split {
                return Err(row_err(row, format!("{} appears in both train and test", rel.display())));
            }
        }
        if split == Split::Train {
            train_paths.insert(canonical);
        }
        let image = image::open(&path)
            .map_err(|e| row_err(row, format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        let sample = Sample { path: rel, image, label };
        match split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    if train.is_empty() && test.is_empty() {
        return Err(Error::Data(format!("{} lists no images", manifest.display())));
    }
    if train.is_empty() {
        return Err(Error::Data(format!("{} has no training rows", manifest.display())));
    }
    let (classes, norm) = match sidecar {
        Some(sc) => (sc.classes, sc.norm),
        None => {
            let k = train.iter().chain(&test).map(|s| s.label).max().unwrap_or(0) + 1;
            let norm = NormStats::of_images(train.iter().map(|s| &s.image))?;
            ((0..k).map(|i| i.to_string()).collect(), norm)
        }
    };
    Ok(LoadedData {
        root: root.to_path_buf(),
        classes,
        norm,
        train: Dataset {
            split: Split::Train,
            samples: train,
        },
        test: Dataset {
            split: Split::Test,
            samples: test,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub horizontal_flip_p: f64,
    pub rotation_max_deg: f64,
    pub grayscale_p: f64,
    pub posterize_p: f64,
    pub posterize_bits: u8,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            horizontal_flip_p: 0.5,
            rotation_max_deg: 15.0,
            grayscale_p: 0.1,
            posterize_p: 0.2,
            posterize_bits: 4,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        AugmentationConfig {
            horizontal_flip_p: 0.0,
            rotation_max_deg: 0.0,
            grayscale_p: 0.0,
            posterize_p: 0.0,
            posterize_bits: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("horizontal_flip_p", self.horizontal_flip_p),
            ("grayscale_p", self.grayscale_p),
            ("posterize_p", self.posterize_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg <= 180.0) {
            return Err(Error::Config(format!(
                "rotation_max_deg must lie in [0, 180], got {}",
                self.rotation_max_deg
            )));
        }
        if !(1..=8).contains(&self.posterize_bits) {
            return Err(Error::Config(format!("posterize_bits must be 1..=8, got {}", self.posterize_bits)));
        }
        Ok(())
    }
}

/// Mixes a list of integers into one seed (SplitMix64 finalizer per step).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Generator for the augmentation draws of one sample in one epoch.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, index as u64]))
}

/// Planar `[0, 1]` image, channel-major.
#[derive(Clone, Debug, PartialEq)]
struct Planes {
    size: usize,
    data: Vec<f64>,
}

impl Planes {
    fn from_image(img: &RgbImage) -> Self {
        let size = img.width() as usize;
        let plane = size * size;
        let mut data = vec![0.0; 3 * plane];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = p[c] as f64 / 255.0;
            }
        }
        Planes { size, data }
    }

    fn plane(&self, c: usize) -> &[f64] {
        let p = self.size * self.size;
        &self.data[c * p..(c + 1) * p]
    }

    fn flip_horizontal(&mut self) {
        let s = self.size;
        for row in self.data.chunks_mut(s) {
            row.reverse();
        }
    }

    /// Rotation about the image centre with bilinear sampling; pixels mapped
    /// from outside the source take the channel mean.
    fn rotate(&mut self, degrees: f64) {
        let s = self.size;
        let (sin, cos) = degrees.to_radians().sin_cos();
        let centre = (s as f64 - 1.0) / 2.0;
        let mut out = vec![0.0; self.data.len()];
        for c in 0..3 {
            let src = self.plane(c);
            let fill = src.iter().sum::<f64>() / src.len() as f64;
            let dst = &mut out[c * s * s..(c + 1) * s * s];
            for y in 0..s {
                for x in 0..s {
                    let (dx, dy) = (x as f64 - centre, y as f64 - centre);
                    // inverse mapping: rotate the destination point back
                    let sx = cos * dx + sin * dy + centre;
                    let sy = -sin * dx + cos * dy + centre;
                    dst[y * s + x] = bilinear(src, s, sx, sy).unwrap_or(fill);
                }
            }
        }
        self.data = out;
    }

    fn grayscale(&mut self) {
        let p = self.size * self.size;
        for i in 0..p {
            let l = 0.299 * self.data[i] + 0.587 * self.data[p + i] + 0.114 * self.data[2 * p + i];
            for c in 0..3 {
                self.data[c * p + i] = l;
            }
        }
    }

    fn posterize(&mut self, bits: u8) {
        let mask: u8 = !(((1u16 << (8 - bits)) - 1) as u8);
        for v in &mut self.data {
            let q = (*v * 255.0).round().clamp(0.0, 255.0) as u8;
            *v = (q & mask) as f64 / 255.0;
        }
    }
}

fn bilinear(src: &[f64], s: usize, x: f64, y: f64) -> Option<f64> {
    let max = (s - 1) as f64;
    if !(0.0..=max).contains(&x) || !(0.0..=max).contains(&y) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(s - 1), (y0 + 1).min(s - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = src[y0 * s + x0] * (1.0 - fx) + src[y0 * s + x1] * fx;
    let bottom = src[y1 * s + x0] * (1.0 - fx) + src[y1 * s + x1] * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Resizes to `size×size`, applies the augmentations in the order flip,
/// rotate, grayscale, posterize (when `aug` is given), and standardizes each
/// channel. Returns a `1×3×size×size` tensor.
pub fn preprocess<R: Rng + ?Sized>(
    image: &RgbImage,
    size: usize,
    aug: Option<&AugmentationConfig>,
    norm: &NormStats,
    rng: &mut R,
) -> Result<Tensor4> {
    if size == 0 || image.width() == 0 || image.height() == 0 {
        return Err(Error::Data("cannot preprocess an empty image".into()));
    }
    let resized;
    let img = if image.width() as usize == size && image.height() as usize == size {
        image
    } else {
        resized = imageops::resize(image, size as u32, size as u32, FilterType::Triangle);
        &resized
    };
    let mut planes = Planes::from_image(img);
    if let Some(a) = aug {
        a.validate()?;
        // every draw is made unconditionally so the stream stays aligned
        let flip = rng.gen_bool(a.horizontal_flip_p);
        let angle = rng.gen_range(-1.0..=1.0) * a.rotation_max_deg;
        let gray = rng.gen_bool(a.grayscale_p);
        let poster = rng.gen_bool(a.posterize_p);
        if flip {
            planes.flip_horizontal();
        }
        if angle != 0.0 {
            planes.rotate(angle);
        }
        if gray {
            planes.grayscale();
        }
        if poster {
            planes.posterize(a.posterize_bits);
        }
    }
    let p = size * size;
    let mut data = planes.data;
    for c in 0..3 {
        for v in &mut data[c * p..(c + 1) * p] {
            *v = (*v - norm.mean[c]) / norm.std[c];
        }
    }
    Tensor4::from_vec(Shape4::new(1, 3, size, size), data)
}

/// Stacks preprocessed samples into one `N×3×size×size` batch. With
/// augmentation, sample `i` of the batch draws from
/// `sample_rng(seed, epoch, indices[i])`.
pub fn make_batch(
    data: &Dataset,
    indices: &[usize],
    size: usize,
    aug: Option<(&AugmentationConfig, u64, usize)>,
    norm: &NormStats,
) -> Result<(Tensor4, Vec<usize>)> {
    let plane = 3 * size * size;
    let mut out = Vec::with_capacity(indices.len() * plane);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = data
            .samples
            .get(i)
            .ok_or_else(|| Error::invalid(format!("sample index {i} out of range")))?;
        let mut rng = match aug {
            Some((_, seed, epoch)) => sample_rng(seed, epoch, i),
            None => ChaCha8Rng::seed_from_u64(0),
        };
        let t = preprocess(&s.image, size, aug.map(|a| a.0), norm, &mut rng)?;
        out.extend_from_slice(t.data());
        labels.push(s.label);
    }
    Ok((Tensor4::from_vec(Shape4::new(indices.len(), 3, size, size), out)?, labels))
}

/// Seeded synthetic dataset of coloured shapes on noisy backgrounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
}

const SHAPES: [Shape; 5] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];
const FAMILIES: [&str; 2] = ["warm", "cool"];

pub const SYNTH_CLASSES: usize = SHAPES.len() * FAMILIES.len();

pub fn synth_class_names() -> Vec<String> {
    let mut names = Vec::with_capacity(SYNTH_CLASSES);
    for family in FAMILIES {
        for shape in SHAPES {
            names.push(format!("{family}-{}", format!("{shape:?}").to_lowercase()));
        }
    }
    names
}

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    // (u, v) in the shape's unit frame, |u|, |v| ≲ 1
    match shape {
        Shape::Disc => u * u + v * v <= 1.0,
        Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        Shape::Triangle => (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) * 0.5,
        Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        Shape::Ring => {
            let r2 = u * u + v * v;
            (0.4..=1.0).contains(&r2)
        }
    }
}

/// One image of class `label` (family-major: labels 0–4 warm, 5–9 cool).
pub fn synthetic_image<R: Rng + ?Sized>(label: usize, size: usize, rng: &mut R) -> RgbImage {
    let shape = SHAPES[label % SHAPES.len()];
    let warm = label < SHAPES.len();
    let s = size as f64;
    let radius = s * rng.gen_range(0.22..0.32);
    let cx = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let angle: f64 = rng.gen_range(-0.3..0.3);
    let (sin, cos) = angle.sin_cos();
    let fg: [f64; 3] = if warm {
        [rng.gen_range(190.0..250.0), rng.gen_range(60.0..150.0), rng.gen_range(10.0..60.0)]
    } else {
        [rng.gen_range(10.0..60.0), rng.gen_range(90.0..170.0), rng.gen_range(190.0..250.0)]
    };
    let bg_level: f64 = rng.gen_range(40.0..110.0);
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / radius, (y as f64 + 0.5 - cy) / radius);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let noise = rng.gen_range(-12.0..12.0);
            let px = if inside(shape, u, v) {
                fg.map(|c| c + noise)
            } else {
                [bg_level + noise; 3]
            };
            img.put_pixel(x as u32, y as u32, Rgb(px.map(|c| c.round().clamp(0.0, 255.0) as u8)));
        }
    }
    img
}

/// Writes PNGs, `manifest.csv` and `dataset.json` under `root`. Output bytes
/// depend only on `spec`.
pub fn generate_synthetic(root: &Path, spec: &SynthSpec) -> Result<()> {
    if spec.size < 8 {
        return Err(Error::invalid(format!("synthetic images need size ≥ 8, got {}", spec.size)));
    }
    if spec.train_per_class == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one training image per class"));
    }
    let mut rows = Vec::new();
    let mut train_images = Vec::new();
    for split in [Split::Train, Split::Test] {
        let per_class = if split == Split::Train { spec.train_per_class } else { spec.test_per_class };
        let dir = root.join("images").join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for label in 0..SYNTH_CLASSES {
            for i in 0..per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, split as u64, label as u64, i as u64]));
                let img = synthetic_image(label, spec.size, &mut rng);
                let rel = format!("images/{}/{label:02}_{i:05}.png", split.as_str());
                let path = root.join(&rel);
                img.save(&path)?;
                rows.push((rel, label, split));
                if split == Split::Train {
                    train_images.push(img);
                }
            }
        }
    }
    let manifest = root.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", manifest.display()));
    w.write_record(["path", "label", "split"]).map_err(csv_err)?;
    for (rel, label, split) in &rows {
        w.write_record([rel.as_str(), &label.to_string(), split.as_str()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    let sidecar = Sidecar {
        classes: synth_class_names(),
        norm: NormStats::of_images(&train_images)?,
    };
    let path = root.join(SIDECAR_FILE);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use sha2::{Digest, Sha256};

    fn sample_image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synthetic_image((seed % 10) as usize, 24, &mut rng)
    }

    fn digest_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().display().to_string();
                    out.push((rel, Sha256::digest(fs::read(&p).unwrap()).to_vec()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn synthetic_generation_is_byte_reproducible() {
        let spec = SynthSpec {
            train_per_class: 24,
            test_per_class: 6,
            size: 32,
            seed: 11,
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(a.path(), &spec).unwrap();
        generate_synthetic(b.path(), &spec).unwrap();
        let (da, db) = (digest_tree(a.path()), digest_tree(b.path()));
        assert_eq!(da.len(), 300 + 2);
        assert_eq!(da, db);
        let other = tempfile::tempdir().unwrap();
        generate_synthetic(other.path(), &SynthSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(digest_tree(other.path()), da);
    }

    #[test]
    fn generated_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            train_per_class: 3,
            test_per_class: 2,
            size: 16,
            seed: 0,
        };
        generate_synthetic(dir.path(), &spec).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        assert_eq!(data.num_classes(), 10);
        assert_eq!((data.train.len(), data.test.len()), (30, 20));
        assert_eq!(data.classes[0], "warm-disc");
        assert_eq!(data.classes[9], "cool-ring");
        assert!(data.norm.std.iter().all(|&s| s > 0.0));
    }

    fn write_png(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(1, 1, Rgb([10, 20, 30])).save(path).unwrap();
    }

    #[test]
    fn stanford_cars_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("px.png"));
        let mut csv = String::from("path,label,split\n");
        let classes = 196;
        for (split, count) in [("train", 8144), ("test", 8041)] {
            for i in 0..count {
                let rel = format!("{split}/{i:05}.png");
                fs::create_dir_all(dir.path().join(split)).unwrap();
                fs::hard_link(dir.path().join("px.png"), dir.path().join(&rel)).unwrap();
                csv += &format!("{rel},{},{split}\n", i % classes);
            }
        }
        fs::write(dir.path().join(MANIFEST_FILE), csv).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        assert_eq!(data.num_classes(), 196);
        assert_eq!((data.train.len(), data.test.len()), (8144, 8041));
    }

    fn manifest_error(rows: &str, make: &[&str]) -> Error {
        let dir = tempfile::tempdir().unwrap();
        for f in make {
            write_png(&dir.path().join(f));
        }
        fs::write(dir.path().join(MANIFEST_FILE), format!("path,label,split\n{rows}")).unwrap();
        let sidecar = Sidecar {
            classes: vec!["a".into(), "b".into()],
            norm: NormStats::identity(),
        };
        fs::write(dir.path().join(SIDECAR_FILE), serde_json::to_string(&sidecar).unwrap()).unwrap();
        load_dataset(dir.path()).unwrap_err()
    }

    #[test]
    fn manifest_errors_carry_row_numbers() {
        let e = manifest_error("a.png,0,train\nmissing.png,1,train\n", &["a.png"]);
        assert!(matches!(e, Error::DataRow { row: 3, .. }), "{e}");
        let e = manifest_error("a.png,0,train\nb.png,2,test\n", &["a.png", "b.png"]);
        assert!(matches!(e, Error::DataRow { row: 3, .. }), "{e}");
        let e = manifest_error("a.png,x,train\n", &["a.png"]);
        assert!(matches!(e, Error::DataRow { row: 2, .. }), "{e}");
        let e = manifest_error("a.png,0,train\na.png,0,test\n", &["a.png"]);
        assert!(e.to_string().contains("both train and test"), "{e}");
        let e = manifest_error("a.png,0,valid\n", &["a.png"]);
        assert!(matches!(e, Error::DataRow { row: 2, .. }), "{e}");
    }

    #[test]
    fn empty_or_missing_manifest_rejected() {
        assert!(matches!(manifest_error("", &[]), Error::Data(_)));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn undecodable_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.png"), b"not an image").unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "path,label,split\nbad.png,0,train\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::DataRow { row: 2, .. })));
    }

    #[test]
    fn eval_preprocessing_is_pure() {
        let img = sample_image(3);
        let norm = NormStats::of_images([&img]).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = preprocess(&img, 24, None, &norm, &mut r1).unwrap();
        let b = preprocess(&img, 24, None, &norm, &mut r2).unwrap();
        assert_eq!(a, b);
        // standardized by the image's own statistics: zero mean per channel
        let p = 24 * 24;
        for c in 0..3 {
            let m: f64 = a.data()[c * p..(c + 1) * p].iter().sum::<f64>() / p as f64;
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn resize_to_requested_size() {
        let img = sample_image(4);
        let t = preprocess(&img, 10, None, &NormStats::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.shape(), Shape4::new(1, 3, 10, 10));
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn double_flip_is_identity() {
        let img = sample_image(5);
        let flip = AugmentationConfig {
            horizontal_flip_p: 1.0,
            ..AugmentationConfig::disabled()
        };
        let norm = NormStats::identity();
        let once = preprocess(&img, 24, Some(&flip), &norm, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let flipped = imageops::flip_horizontal(&img);
        assert_eq!(preprocess(&flipped, 24, None, &norm, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), once);
        let twice = preprocess(&flipped, 24, Some(&flip), &norm, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(twice, preprocess(&img, 24, None, &norm, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
    }

    #[test]
    fn rotation_stream_reproducible() {
        let img = sample_image(6);
        let aug = AugmentationConfig::default();
        let norm = NormStats::identity();
        let a = preprocess(&img, 24, Some(&aug), &norm, &mut sample_rng(9, 2, 17)).unwrap();
        let b = preprocess(&img, 24, Some(&aug), &norm, &mut sample_rng(9, 2, 17)).unwrap();
        assert_eq!(a, b);
        let c = preprocess(&img, 24, Some(&aug), &norm, &mut sample_rng(9, 3, 17)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_rotation_and_posterize_effects() {
        let mut p = Planes::from_image(&sample_image(7));
        let orig = p.clone();
        p.rotate(0.0);
        assert!(p.data.iter().zip(&orig.data).all(|(a, b)| (a - b).abs() < 1e-12));
        p.posterize(4);
        for v in &p.data {
            assert_eq!(((v * 255.0).round() as u8) & 0x0f, 0);
        }
        let mut g = orig.clone();
        g.grayscale();
        assert_eq!(g.plane(0), g.plane(2));
    }

    #[test]
    fn invalid_augmentation_rejected() {
        let bad = AugmentationConfig {
            grayscale_p: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let img = sample_image(8);
        assert!(preprocess(&img, 8, Some(&bad), &NormStats::identity(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn augmented_outputs_stay_valid(
            seed in any::<u64>(),
            flip in 0.0f64..=1.0,
            rot in 0.0f64..=45.0,
            gray in 0.0f64..=1.0,
            poster in 0.0f64..=1.0,
            bits in 1u8..=8,
        ) {
            let aug = AugmentationConfig {
                horizontal_flip_p: flip,
                rotation_max_deg: rot,
                grayscale_p: gray,
                posterize_p: poster,
                posterize_bits: bits,
            };
            let img = sample_image(seed);
            let norm = NormStats::of_images([&img]).unwrap();
            let t = preprocess(&img, 16, Some(&aug), &norm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(t.shape(), Shape4::new(1, 3, 16, 16));
            prop_assert!(t.all_finite());
        }
    }
}

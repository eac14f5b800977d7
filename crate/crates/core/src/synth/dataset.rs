use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use mmcd_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::changes::{apply_changes, random_change_spec, ChangeSpec};
use super::landcover::{synth_scene, ChangeLabelMap, LandCoverMap, SceneConfig};
use super::render::{render_optical, render_sar, OpticalConfig, SarConfig};
use super::{derive_seed, NUM_CHANGE_CLASSES};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Val];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?} (expected train, test or val)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub size: usize,
    /// Fractions for (train, test, val).
    pub split: (f64, f64, f64),
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub optical: OpticalConfig,
    #[serde(default)]
    pub sar: SarConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 10,
            size: 64,
            split: (0.5, 0.3, 0.2),
            seed: 0,
            scene: SceneConfig::default(),
            optical: OpticalConfig::default(),
            sar: SarConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("count must be at least 1".into()));
        }
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios {:?} must be non-negative and sum to 1", self.split)));
        }
        self.scene.validate()?;
        if self.size == 0 || (self.scene.places_objects() && self.size < super::landcover::MIN_TILE_SIZE) {
            return Err(Error::InvalidArgument(format!("tile size {} too small", self.size)));
        }
        if self.size % 32 != 0 {
            return Err(Error::InvalidArgument(format!("tile size {} must be a multiple of 32", self.size)));
        }
        if self.optical.texture_cell == 0 || !(0.0..=1.0).contains(&self.optical.texture_amplitude) {
            return Err(Error::InvalidArgument(format!("bad optical config {:?}", self.optical)));
        }
        if !self.sar.speckle_variance.is_finite() || self.sar.speckle_variance < 0.0 {
            return Err(Error::InvalidArgument(format!("bad speckle variance {}", self.sar.speckle_variance)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    /// Sample counts for (train, test, val).
    pub split_counts: (usize, usize, usize),
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported manifest version {}", manifest.version)));
        }
        Ok(manifest)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }
}

/// Everything produced for one sample before quantization.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub before: LandCoverMap,
    pub after: LandCoverMap,
    pub changes: ChangeSpec,
    /// 3×H×W, renders `before`.
    pub optical: Tensor<f32>,
    /// 4×H×W (HH, HV, VH, VV), renders `after`.
    pub sar: Tensor<f32>,
    pub label: ChangeLabelMap,
}

/// A sample as loaded from disk.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub optical: Tensor<f32>,
    pub sar: Tensor<f32>,
    pub label: ChangeLabelMap,
}

/// Split sizes by largest-remainder rounding; ties go to the earlier split.
pub fn split_sizes(count: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let r = [ratios.0, ratios.1, ratios.2];
    let exact: Vec<f64> = r.iter().map(|x| x * count as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = count.saturating_sub(sizes.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

/// Generates one sample from its own seed.
pub fn generate_sample(seed: u64, config: &DatasetConfig) -> Result<GeneratedSample> {
    let (before, objects) = synth_scene(derive_seed(seed, 0), config.size, &config.scene)?;
    let changes = random_change_spec(&before, &objects, derive_seed(seed, 1), &config.scene);
    let (after, label) = apply_changes(&before, &changes)?;
    let optical = render_optical(&before, derive_seed(seed, 2), &config.optical)?;
    let sar = render_sar(&after, derive_seed(seed, 3), &config.sar)?;
    Ok(GeneratedSample { before, after, changes, optical, sar, label })
}

/// Writes `config.count` samples plus `manifest.json` under `root`.
pub fn build_dataset(root: &Path, config: &DatasetConfig) -> Result<Manifest> {
    config.validate()?;
    let (n_train, n_test, n_val) = split_sizes(config.count, config.split);
    let mut order: Vec<usize> = (0..config.count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX)));
    let mut split_of = vec![Split::Train; config.count];
    for (rank, &idx) in order.iter().enumerate() {
        split_of[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_test {
            Split::Test
        } else {
            Split::Val
        };
    }
    debug_assert_eq!(n_train + n_test + n_val, config.count);

    let samples: Vec<ManifestEntry> = (0..config.count)
        .map(|i| ManifestEntry { id: format!("{i:05}"), split: split_of[i], seed: derive_seed(config.seed, i as u64) })
        .collect();
    fs::create_dir_all(root).at(root)?;
    for entry in &samples {
        let s = generate_sample(entry.seed, config)?;
        let dir = sample_dir(root, entry.split, &entry.id);
        fs::create_dir_all(&dir).at(&dir)?;
        write_png(&dir.join("opt.png"), &s.optical, png::ColorType::Rgb)?;
        write_png(&dir.join("sar.png"), &s.sar, png::ColorType::Rgba)?;
        write_label_png(&dir.join("label.png"), &s.label)?;
    }
    let manifest = Manifest { version: MANIFEST_VERSION, config: config.clone(), split_counts: (n_train, n_test, n_val), samples };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()?).at(&path)?;
    Ok(manifest)
}

pub fn sample_dir(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.name()).join(id)
}

/// Loads every sample of `split`, in manifest order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = Manifest::read(root)?;
    manifest.entries(split).map(|e| load_sample(&sample_dir(root, split, &e.id))).collect()
}

/// Loads one sample directory.
pub fn load_sample(dir: &Path) -> Result<Sample> {
    let optical = read_png(&dir.join("opt.png"), 3)?;
    let sar = read_png(&dir.join("sar.png"), 4)?;
    let (h, w) = (optical.dim(1), optical.dim(2));
    if sar.dim(1) != h || sar.dim(2) != w {
        return Err(Error::Shape(format!("{}: optical and SAR sizes differ", dir.display())));
    }
    let label_path = dir.join("label.png");
    let (lw, lh, bytes) = decode_png(&label_path, png::ColorType::Grayscale)?;
    if (lh, lw) != (h, w) {
        return Err(Error::Shape(format!("{}: label size differs from image", label_path.display())));
    }
    let label = ChangeLabelMap::from_cells(h, w, bytes, NUM_CHANGE_CLASSES)?;
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Sample { id, optical, sar, label })
}

pub fn quantize(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Writes a C×H×W tensor in [0, 1] as an interleaved 8-bit PNG.
pub fn write_png(path: &Path, image: &Tensor<f32>, color: png::ColorType) -> Result<()> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let mut bytes = vec![0u8; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            bytes[i * c + ch] = quantize(image.data()[ch * h * w + i]);
        }
    }
    encode_png(path, w, h, color, &bytes)
}

/// Writes a label raster as an 8-bit grayscale PNG.
pub fn write_label_png(path: &Path, label: &ChangeLabelMap) -> Result<()> {
    encode_png(path, label.width(), label.height(), png::ColorType::Grayscale, label.cells())
}

pub fn encode_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).at(path)?;
    let image_err = |e: png::EncodingError| Error::Image { path: path.to_path_buf(), message: e.to_string() };
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(image_err)?;
    writer.write_image_data(bytes).map_err(image_err)?;
    writer.finish().map_err(image_err)
}

fn decode_png(path: &Path, expected: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).at(path)?;
    let image_err = |message: String| Error::Image { path: path.to_path_buf(), message };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| image_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| image_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(e.to_string()))?;
    if info.color_type != expected || info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(format!("expected 8-bit {expected:?}, found {:?} {:?}", info.bit_depth, info.color_type)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

fn read_png(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let color = if channels == 3 { png::ColorType::Rgb } else { png::ColorType::Rgba };
    let (w, h, bytes) = decode_png(path, color)?;
    let mut t = Tensor::zeros([channels, h, w]);
    let data = t.data_mut();
    for i in 0..h * w {
        for ch in 0..channels {
            data[ch * h * w + i] = dequantize(bytes[i * channels + ch]);
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::label_from_covers;

    #[test]
    fn exact_ratio_split() {
        assert_eq!(split_sizes(10, (0.5, 0.3, 0.2)), (5, 3, 2));
    }

    #[test]
    fn largest_remainder_split() {
        // exact shares 3.5, 2.1, 1.4 → floors (3, 2, 1); the spare goes to the 0.5 remainder
        assert_eq!(split_sizes(7, (0.5, 0.3, 0.2)), (4, 2, 1));
        assert_eq!(split_sizes(1, (0.5, 0.3, 0.2)), (1, 0, 0));
    }

    #[test]
    fn labels_follow_transition_table() {
        let cfg = DatasetConfig::default();
        for seed in 0..20 {
            let s = generate_sample(seed, &cfg).unwrap();
            for r in 0..cfg.size {
                for c in 0..cfg.size {
                    let expected = label_from_covers(s.before.cover(r, c), s.after.cover(r, c)).unwrap();
                    assert_eq!(s.label.0.get(r, c), expected);
                }
            }
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { count: 4, seed: 3, ..DatasetConfig::default() };
        let manifest = build_dataset(dir.path(), &cfg).unwrap();
        let e = &manifest.samples[0];
        let loaded = load_sample(&sample_dir(dir.path(), e.split, &e.id)).unwrap();
        let generated = generate_sample(e.seed, &cfg).unwrap();
        assert_eq!(loaded.label, generated.label);
        for (a, b) in loaded.optical.data().iter().zip(generated.optical.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let total: usize = Split::ALL.iter().map(|&s| load_split(dir.path(), s).unwrap().len()).sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn manifest_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = DatasetConfig { count: 10, seed: 7, ..DatasetConfig::default() };
        build_dataset(a.path(), &cfg).unwrap();
        build_dataset(b.path(), &cfg).unwrap();
        let read = |p: &Path| fs::read(p.join(MANIFEST_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn invalid_config_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("out");
        let bad = DatasetConfig { split: (0.5, 0.3, 0.3), ..DatasetConfig::default() };
        assert!(matches!(build_dataset(&root, &bad), Err(Error::InvalidArgument(_))));
        let zero = DatasetConfig { count: 0, ..DatasetConfig::default() };
        assert!(build_dataset(&root, &zero).is_err());
        assert!(!root.exists());
    }
}

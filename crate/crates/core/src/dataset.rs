//! Sample manifests, splits, tile crops, batching and the synthetic
//! triplet generator.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioError, MelExtractor};
use crate::encoders::{AUDIO_FEATURE_DIM, IMAGE_FEATURE_DIM, TEXT_FEATURE_DIM};
use crate::text::{self, TextRecord};

pub const MIN_SAMPLE_RATE_HZ: u32 = 16_000;
pub const CROP_SIZE: usize = 224;
pub const PATCH_SIZE: usize = 14;
pub const PATCH_GRID: usize = CROP_SIZE / PATCH_SIZE;
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("manifest line {line}: {reason}")]
    InvalidManifest { line: usize, reason: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("tile {height}x{width} too small for a {out}x{out} crop")]
    TileTooSmall { height: usize, width: usize, out: usize },
    #[error("batch size {batch_size} invalid for {n} ids")]
    InvalidBatchSize { batch_size: usize, n: usize },
    #[error("no features for sample {0:?}")]
    MissingFeatures(String),
    #[error("feature width for {what}: got {got}, expected {expected}")]
    FeatureWidth { what: String, got: usize, expected: usize },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One manifest row. Fields the crate does not know survive a load/save
/// round trip through `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub audio_path: String,
    pub sample_rate_hz: u32,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
    pub image_path: String,
    pub image_gsd_m: f64,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl SampleRecord {
    fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(format!("coordinate out of range ({}, {})", self.lat, self.lon));
        }
        if self.audio_path.is_empty() || self.image_path.is_empty() {
            return Err(format!("sample {}: empty path", self.id));
        }
        Ok(())
    }

    pub fn text_record(&self) -> TextRecord {
        TextRecord::new(&self.title, &self.description, self.address.as_deref())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleManifest {
    pub rows: Vec<SampleRecord>,
}

impl SampleManifest {
    pub fn new(rows: Vec<SampleRecord>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for (i, r) in rows.iter().enumerate() {
            r.check()
                .map_err(|reason| DatasetError::InvalidManifest { line: i + 1, reason })?;
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SampleRecord =
                serde_json::from_str(&line).map_err(|e| DatasetError::InvalidManifest {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for r in &self.rows {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// Drops rows recorded below `min_hz`; the boundary itself is kept.
pub fn filter_min_sample_rate(manifest: &SampleManifest, min_hz: u32) -> SampleManifest {
    SampleManifest {
        rows: manifest
            .rows
            .iter()
            .filter(|r| r.sample_rate_hz >= min_hz)
            .cloned()
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitAssignment {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train_ids.len(), self.val_ids.len(), self.test_ids.len())
    }
}

/// Sizes under the floor rule: `floor(r_train N)`, `floor(r_val N)`, rest.
/// A 1e-9 slack keeps products such as `0.7 * 100` from flooring to 69.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = (ratios.0 * n as f64 + 1e-9).floor() as usize;
    let val = ((ratios.1 * n as f64 + 1e-9).floor() as usize).min(n - train);
    (train, val, n - train - val)
}

pub fn split_dataset(
    manifest: &SampleManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, DatasetError> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios(ratios));
    }
    let mut ids = manifest.ids();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = split_sizes(ids.len(), ratios);
    let test_ids = ids.split_off(n_train + n_val);
    let val_ids = ids.split_off(n_train);
    Ok(SplitAssignment {
        train_ids: ids,
        val_ids,
        test_ids,
    })
}

/// `H x W x 3` tile with values in `[0, 1]`.
pub type Tile = Array3<f64>;

pub fn load_tile_png(path: &Path) -> Result<Tile, DatasetError> {
    let img = image::open(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(to_tile(img))
}

/// Same as [`load_tile_png`] for an in-memory PNG.
pub fn decode_tile_png(bytes: &[u8]) -> Result<Tile, DatasetError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| DatasetError::Image {
        path: PathBuf::from("<memory>"),
        reason: e.to_string(),
    })?;
    Ok(to_tile(img))
}

fn to_tile(img: image::DynamicImage) -> Tile {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Tile::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn save_tile_png(tile: ArrayView3<'_, f64>, path: &Path) -> Result<(), DatasetError> {
    let (h, w, _) = tile.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (tile[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn center_crop(tile: ArrayView3<'_, f64>, out: usize) -> Result<Tile, DatasetError> {
    let (h, w, _) = tile.dim();
    if h < out || w < out {
        return Err(DatasetError::TileTooSmall {
            height: h,
            width: w,
            out,
        });
    }
    let (top, left) = ((h - out) / 2, (w - out) / 2);
    Ok(tile
        .slice(ndarray::s![top..top + out, left..left + out, ..])
        .to_owned())
}

/// Bilinear resampling of the window `(top, left, height, width)` to
/// `out x out`, sampling at pixel centers.
fn resize_window(tile: ArrayView3<'_, f64>, top: usize, left: usize, h: usize, w: usize, out: usize) -> Tile {
    let sy = h as f64 / out as f64;
    let sx = w as f64 / out as f64;
    let coord = |o: usize, scale: f64, len: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut res = Tile::zeros((out, out, tile.dim().2));
    for oy in 0..out {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..out {
            let (x0, x1, fx) = coord(ox, sx, w);
            for c in 0..tile.dim().2 {
                let px = |y: usize, x: usize| tile[[top + y, left + x, c]];
                let v = (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x1))
                    + fy * ((1.0 - fx) * px(y1, x0) + fx * px(y1, x1));
                res[[oy, ox, c]] = v;
            }
        }
    }
    res
}

/// Training-path crop: area fraction uniform in `scale`, log-uniform aspect
/// in `[3/4, 4/3]`, up to 10 draws before falling back to the largest
/// centered window of clamped aspect; bilinear resize to `out`; horizontal
/// flip with probability 0.5.
pub fn random_resized_crop(
    tile: ArrayView3<'_, f64>,
    out: usize,
    scale: (f64, f64),
    seed: u64,
) -> Result<Tile, DatasetError> {
    let (h, w, _) = tile.dim();
    if h * w < out * out || h == 0 || w == 0 {
        return Err(DatasetError::TileTooSmall {
            height: h,
            width: w,
            out,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo_ratio, hi_ratio) = (3.0f64 / 4.0, 4.0f64 / 3.0);
    let area = (h * w) as f64;
    let mut window = None;
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(lo_ratio.ln()..=hi_ratio.ln()).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            window = Some((top, left, ch, cw));
            break;
        }
    }
    let (top, left, ch, cw) = window.unwrap_or_else(|| {
        let ratio = w as f64 / h as f64;
        let (cw, ch) = if ratio < lo_ratio {
            (w, ((w as f64 / lo_ratio).round() as usize).min(h))
        } else if ratio > hi_ratio {
            (((h as f64 * hi_ratio).round() as usize).min(w), h)
        } else {
            (w, h)
        };
        ((h - ch) / 2, (w - cw) / 2, ch, cw)
    });
    let mut res = resize_window(tile, top, left, ch, cw, out);
    if rng.random_bool(0.5) {
        res.invert_axis(Axis(1));
    }
    Ok(res)
}

/// 14x14 patch means on the 16x16 grid of a 224x224 crop, laid out as
/// `(row * 16 + col) * 3 + channel`, then standardized.
pub fn image_feature_vector(crop: ArrayView3<'_, f64>) -> Result<Vec<f64>, DatasetError> {
    let (h, w, c) = crop.dim();
    if h != CROP_SIZE || w != CROP_SIZE || c != 3 {
        return Err(DatasetError::FeatureWidth {
            what: format!("image crop {h}x{w}x{c}"),
            got: h * w * c,
            expected: CROP_SIZE * CROP_SIZE * 3,
        });
    }
    let mut means = vec![0.0; IMAGE_FEATURE_DIM];
    let inv = 1.0 / (PATCH_SIZE * PATCH_SIZE) as f64;
    for ((y, x, ch), &v) in crop.indexed_iter() {
        let cell = (y / PATCH_SIZE) * PATCH_GRID + x / PATCH_SIZE;
        means[cell * 3 + ch] += v * inv;
    }
    Ok(audio::standardize(&means))
}

/// Per-sample feature vectors for the three modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    pub audio: Vec<f64>,
    pub text: Vec<f64>,
    pub image: Vec<f64>,
}

/// Feature rows keyed by sample id, with insertion order kept.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    rows: Vec<FeatureRow>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, row: FeatureRow) -> Result<(), DatasetError> {
        if self.index.contains_key(&row.id) {
            return Err(DatasetError::DuplicateId(row.id));
        }
        if let Some(first) = self.rows.first() {
            for (what, got, expected) in [
                ("audio", row.audio.len(), first.audio.len()),
                ("text", row.text.len(), first.text.len()),
                ("image", row.image.len(), first.image.len()),
            ] {
                if got != expected {
                    return Err(DatasetError::FeatureWidth {
                        what: format!("{what} of {}", row.id),
                        got,
                        expected,
                    });
                }
            }
        }
        self.index.insert(row.id.clone(), self.rows.len());
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&FeatureRow> {
        self.index.get(id).map(|&i| &self.rows[i])
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.id.clone()).collect()
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    /// `(audio, text, image)` widths, or `None` when empty.
    pub fn widths(&self) -> Option<[usize; 3]> {
        self.rows
            .first()
            .map(|r| [r.audio.len(), r.text.len(), r.image.len()])
    }

    /// Stacks the rows for `ids`, in that order, into one aligned batch.
    pub fn batch(&self, ids: &[String]) -> Result<TripletBatch, DatasetError> {
        let [da, dt, di] = self.widths().unwrap_or([0, 0, 0]);
        let mut audio = Array2::zeros((ids.len(), da));
        let mut text = Array2::zeros((ids.len(), dt));
        let mut image = Array2::zeros((ids.len(), di));
        for (k, id) in ids.iter().enumerate() {
            let r = self.get(id).ok_or_else(|| DatasetError::MissingFeatures(id.clone()))?;
            audio.row_mut(k).assign(&ndarray::aview1(&r.audio));
            text.row_mut(k).assign(&ndarray::aview1(&r.text));
            image.row_mut(k).assign(&ndarray::aview1(&r.image));
        }
        Ok(TripletBatch {
            ids: ids.to_vec(),
            audio,
            text,
            image,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut table = Self::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: FeatureRow =
                serde_json::from_str(&line).map_err(|e| DatasetError::InvalidManifest {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            table.insert(row)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for r in &self.rows {
            writeln!(w, "{}", serde_json::to_string(r).expect("row serializes")).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// Row `k` of every matrix belongs to `ids[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub ids: Vec<String>,
    pub audio: Array2<f64>,
    pub text: Array2<f64>,
    pub image: Array2<f64>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Shuffles `ids` with `seed` and cuts them into batches. Callers vary the
/// seed per epoch.
pub fn make_batches(
    table: &FeatureTable,
    ids: &[String],
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<TripletBatch>, DatasetError> {
    if batch_size == 0 || batch_size > ids.len() {
        return Err(DatasetError::InvalidBatchSize {
            batch_size,
            n: ids.len(),
        });
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(|c| table.batch(c))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGenConfig {
    pub n_samples: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticGenConfig {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            latent_dim: 16,
            noise_sigma: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_samples == 0 || self.latent_dim == 0 {
            return Err(DatasetError::InvalidConfig("n_samples and latent_dim must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(DatasetError::InvalidConfig(format!("noise_sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// The fixed mixing matrices of a synthetic world: feature = A z + noise.
/// Entries are N(0, 1/latent_dim) so features have roughly unit variance.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub audio_mix: Array2<f64>,
    pub text_mix: Array2<f64>,
    pub image_mix: Array2<f64>,
}

impl SyntheticWorld {
    pub fn new(latent_dim: usize, noise_sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11);
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let mut mix = |rows: usize| {
            Array2::from_shape_simple_fn((rows, latent_dim), || {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * scale
            })
        };
        Self {
            latent_dim,
            noise_sigma,
            audio_mix: mix(AUDIO_FEATURE_DIM),
            text_mix: mix(TEXT_FEATURE_DIM),
            image_mix: mix(IMAGE_FEATURE_DIM),
        }
    }

    pub fn sample_latent(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.latent_dim).map(|_| StandardNormal.sample(&mut *rng)).collect()
    }

    fn project(&self, mix: &Array2<f64>, z: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let clean = mix.dot(&ndarray::aview1(z));
        clean
            .iter()
            .map(|&v| {
                let e: f64 = StandardNormal.sample(&mut *rng);
                v + self.noise_sigma * e
            })
            .collect()
    }

    pub fn audio_features(&self, z: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        self.project(&self.audio_mix, z, rng)
    }

    pub fn text_features(&self, z: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        self.project(&self.text_mix, z, rng)
    }

    pub fn image_features(&self, z: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        self.project(&self.image_mix, z, rng)
    }

    pub fn features_for_latent(&self, id: &str, z: &[f64], rng: &mut impl Rng) -> FeatureRow {
        FeatureRow {
            id: id.to_string(),
            audio: self.audio_features(z, rng),
            text: self.text_features(z, rng),
            image: self.image_features(z, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: SampleManifest,
    pub features: FeatureTable,
    pub latents: Vec<Vec<f64>>,
    pub world: SyntheticWorld,
}

/// Latents `z ~ N(0, I)`, features `A_m z + sigma * eps`. Sample `k` sits on
/// a 0.01-degree grid anchored at (0, 0) so map tests can reuse the
/// coordinates.
pub fn generate_synthetic_triplets(config: &SyntheticGenConfig) -> Result<SyntheticDataset, DatasetError> {
    config.validate()?;
    let world = SyntheticWorld::new(config.latent_dim, config.noise_sigma, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let side = (config.n_samples as f64).sqrt().ceil() as usize;
    let mut rows = Vec::with_capacity(config.n_samples);
    let mut features = FeatureTable::new();
    let mut latents = Vec::with_capacity(config.n_samples);
    for k in 0..config.n_samples {
        let id = format!("syn-{k:06}");
        let z = world.sample_latent(&mut rng);
        features.insert(world.features_for_latent(&id, &z, &mut rng))?;
        latents.push(z);
        rows.push(SampleRecord {
            id: id.clone(),
            lat: -((k / side) as f64) * 0.01,
            lon: (k % side) as f64 * 0.01,
            audio_path: format!("synthetic/{id}.wav"),
            sample_rate_hz: 48_000,
            title: String::new(),
            description: String::new(),
            address: None,
            image_path: format!("synthetic/{id}.png"),
            image_gsd_m: 10.0,
            extra: Default::default(),
        });
    }
    Ok(SyntheticDataset {
        manifest: SampleManifest::new(rows)?,
        features,
        latents,
        world,
    })
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Evaluation-path features for one manifest row; relative paths resolve
/// against `root`. Text carries the address sentence when an address is
/// known.
pub fn featurize_record(
    record: &SampleRecord,
    extractor: &MelExtractor,
    root: &Path,
) -> Result<FeatureRow, DatasetError> {
    let clip = audio::load_wav(&resolve(root, &record.audio_path))?;
    let audio = audio::featurize_clip(extractor, &clip)?;
    let text = text::featurize_text(&text::augment_text_with_address(&record.text_record())).values;
    let tile = load_tile_png(&resolve(root, &record.image_path))?;
    let image = image_feature_vector(center_crop(tile.view(), CROP_SIZE)?.view())?;
    Ok(FeatureRow {
        id: record.id.clone(),
        audio,
        text,
        image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: &str, sr: u32) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            lat: 1.0,
            lon: 2.0,
            audio_path: "a.wav".into(),
            sample_rate_hz: sr,
            title: "t".into(),
            description: "d".into(),
            address: None,
            image_path: "i.png".into(),
            image_gsd_m: 0.6,
            extra: Default::default(),
        }
    }

    fn manifest(n: usize) -> SampleManifest {
        SampleManifest::new((0..n).map(|i| record(&format!("s{i}"), 44_100)).collect()).unwrap()
    }

    #[test]
    fn sample_rate_filter_is_inclusive() {
        let m = SampleManifest::new(vec![record("a", 8000), record("b", 16_000), record("c", 44_100)]).unwrap();
        let f = filter_min_sample_rate(&m, MIN_SAMPLE_RATE_HZ);
        assert_eq!(f.ids(), vec!["b", "c"]);
        assert!(filter_min_sample_rate(&SampleManifest::default(), 16_000).is_empty());
    }

    #[test]
    fn manifest_roundtrip_keeps_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let line = r#"{"id":"x","lat":0.5,"lon":-3.0,"audio_path":"x.wav","sample_rate_hz":22050,"title":"T","description":"D","image_path":"x.png","image_gsd_m":0.6,"license":"cc-by","tags":["rain"]}"#;
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let m = SampleManifest::load(&path).unwrap();
        assert_eq!(m.rows[0].extra["license"], "cc-by");
        m.save(&path).unwrap();
        let back: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&path).unwrap().trim()).unwrap();
        let orig: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(back, orig);
    }

    #[test]
    fn manifest_validation() {
        let mut bad = record("a", 16_000);
        bad.lat = 95.0;
        assert!(matches!(SampleManifest::new(vec![bad]), Err(DatasetError::InvalidManifest { .. })));
        let mut bad = record("a", 16_000);
        bad.audio_path.clear();
        assert!(SampleManifest::new(vec![bad]).is_err());
        assert!(matches!(
            SampleManifest::new(vec![record("a", 1), record("a", 2)]),
            Err(DatasetError::DuplicateId(_))
        ));
    }

    #[test]
    fn split_sizes_floor_rule() {
        assert_eq!(split_sizes(100, DEFAULT_SPLIT), (70, 10, 20));
        assert_eq!(split_sizes(50_792, DEFAULT_SPLIT), (35_554, 5_079, 10_159));
        assert_eq!(split_sizes(0, DEFAULT_SPLIT), (0, 0, 0));
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let m = manifest(100);
        let a = split_dataset(&m, DEFAULT_SPLIT, 1).unwrap();
        let b = split_dataset(&m, DEFAULT_SPLIT, 1).unwrap();
        let c = split_dataset(&m, DEFAULT_SPLIT, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.sizes(), (70, 10, 20));
        assert_eq!(c.sizes(), (70, 10, 20));
        assert!(split_dataset(&m, (0.5, 0.1, 0.2), 1).is_err());
    }

    #[test]
    fn center_crop_cases() {
        let t = Tile::from_shape_fn((224, 224, 3), |(y, x, c)| (y * 1000 + x * 3 + c) as f64);
        assert_eq!(center_crop(t.view(), 224).unwrap(), t);
        let big = Tile::from_shape_fn((448, 448, 3), |(y, x, c)| (y * 10_000 + x * 3 + c) as f64);
        let c = center_crop(big.view(), 224).unwrap();
        assert_eq!(c[[0, 0, 0]], big[[112, 112, 0]]);
        assert_eq!(c[[223, 223, 2]], big[[335, 335, 2]]);
        let small = Tile::zeros((200, 300, 3));
        assert!(matches!(center_crop(small.view(), 224), Err(DatasetError::TileTooSmall { .. })));
    }

    #[test]
    fn constant_tile_stays_constant() {
        let t = Tile::from_elem((300, 260, 3), 0.25);
        let c = center_crop(t.view(), 224).unwrap();
        assert!(c.iter().all(|&v| v == 0.25));
        for seed in 0..5 {
            let r = random_resized_crop(t.view(), 224, (0.2, 1.0), seed).unwrap();
            assert_eq!(r.dim(), (224, 224, 3));
            assert!(r.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn random_crop_too_small() {
        let t = Tile::zeros((100, 100, 3));
        assert!(matches!(
            random_resized_crop(t.view(), 224, (0.2, 1.0), 0),
            Err(DatasetError::TileTooSmall { .. })
        ));
    }

    #[test]
    fn random_crop_full_scale_identity_or_flip() {
        // scale (1, 1) with a square tile: whole-tile window at unit aspect
        // is the only fit, so the result is the tile or its mirror
        let t = Tile::from_shape_fn((224, 224, 3), |(y, x, c)| ((y * 7 + x * 13 + c) % 17) as f64 / 17.0);
        let mut flips = 0;
        for seed in 0..20 {
            let r = random_resized_crop(t.view(), 224, (1.0, 1.0), seed).unwrap();
            let mut mirrored = t.clone();
            mirrored.invert_axis(Axis(1));
            let same = r.iter().zip(t.iter()).all(|(a, b)| (a - b).abs() < 1e-12);
            let flip = r.iter().zip(mirrored.iter()).all(|(a, b)| (a - b).abs() < 1e-12);
            assert!(same || flip);
            flips += flip as usize;
        }
        assert!(flips > 0 && flips < 20);
    }

    #[test]
    fn random_crop_area_fraction_within_scale() {
        // a tile whose value encodes its column lets us read back the
        // horizontal extent of the window
        let t = Tile::from_shape_fn((500, 500, 3), |(_, x, _)| x as f64);
        for seed in 0..30 {
            let r = random_resized_crop(t.view(), 224, (0.2, 1.0), seed).unwrap();
            let row: Vec<f64> = r.slice(ndarray::s![0, .., 0]).to_vec();
            let span = (row[0] - row[223]).abs();
            // the sampled width spans at least sqrt(0.2 * 3/4) of the tile
            assert!(span >= (0.2f64 * 0.75).sqrt() * 500.0 - 5.0, "span {span}");
        }
    }

    #[test]
    fn image_features_constant_and_length() {
        let c = Tile::from_elem((224, 224, 3), 0.7);
        let f = image_feature_vector(c.view()).unwrap();
        assert_eq!(f.len(), 768);
        assert!(f.iter().all(|&v| v == 0.0));
        let bad = Tile::zeros((224, 223, 3));
        assert!(image_feature_vector(bad.view()).is_err());
    }

    #[test]
    fn checkerboard_features_match_brute_force() {
        let crop = Tile::from_shape_fn((224, 224, 3), |(y, x, c)| {
            let on = ((y / 14) + (x / 14)) % 2 == 0;
            if on { 0.2 + 0.1 * c as f64 } else { 0.9 }
        });
        let f = image_feature_vector(crop.view()).unwrap();
        let mut brute = vec![0.0; 768];
        for r in 0..16 {
            for col in 0..16 {
                for ch in 0..3 {
                    let mut s = 0.0;
                    for y in r * 14..(r + 1) * 14 {
                        for x in col * 14..(col + 1) * 14 {
                            s += crop[[y, x, ch]];
                        }
                    }
                    brute[(r * 16 + col) * 3 + ch] = s / 196.0;
                }
            }
        }
        let mean = brute.iter().sum::<f64>() / 768.0;
        let sd = (brute.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 768.0).sqrt();
        for (a, b) in f.iter().zip(&brute) {
            assert!((a - (b - mean) / sd).abs() < 1e-9);
        }
        // alternating sign between neighbouring cells of the red channel
        assert!(f[0] < 0.0 && f[3] > 0.0);
    }

    fn table(n: usize) -> FeatureTable {
        let mut t = FeatureTable::new();
        for i in 0..n {
            let v = i as f64;
            t.insert(FeatureRow {
                id: format!("s{i}"),
                audio: vec![v; 2],
                text: vec![v + 0.25; 3],
                image: vec![v + 0.5; 4],
            })
            .unwrap();
        }
        t
    }

    #[test]
    fn batches_drop_last() {
        let t = table(10);
        let b = make_batches(&t, &t.ids(), 4, 0, true).unwrap();
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 4]);
        assert_eq!(b, make_batches(&t, &t.ids(), 4, 0, true).unwrap());
        assert!(make_batches(&t, &t.ids(), 11, 0, true).is_err());
    }

    #[test]
    fn batch_rows_align() {
        let t = table(10);
        for b in make_batches(&t, &t.ids(), 3, 9, false).unwrap() {
            for (k, id) in b.ids.iter().enumerate() {
                let v: f64 = id[1..].parse().unwrap();
                assert_eq!(b.audio[[k, 0]], v);
                assert_eq!(b.text[[k, 2]], v + 0.25);
                assert_eq!(b.image[[k, 3]], v + 0.5);
            }
        }
    }

    #[test]
    fn feature_table_roundtrip_and_width_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        let t = table(3);
        t.save(&p).unwrap();
        let back = FeatureTable::load(&p).unwrap();
        assert_eq!(back.rows(), t.rows());
        let mut t = table(1);
        let err = t.insert(FeatureRow {
            id: "z".into(),
            audio: vec![0.0; 3],
            text: vec![0.0; 3],
            image: vec![0.0; 4],
        });
        assert!(matches!(err, Err(DatasetError::FeatureWidth { .. })));
    }

    #[test]
    fn noiseless_synthetic_is_exactly_linear() {
        let mut cfg = SyntheticGenConfig::new(5, 3);
        cfg.noise_sigma = 0.0;
        let d = generate_synthetic_triplets(&cfg).unwrap();
        for (row, z) in d.features.rows().iter().zip(&d.latents) {
            for (m, feats) in [(&d.world.audio_mix, &row.audio), (&d.world.text_mix, &row.text), (&d.world.image_mix, &row.image)] {
                assert_eq!(feats.len(), m.nrows());
                for (i, &f) in feats.iter().enumerate() {
                    let want: f64 = (0..z.len()).map(|j| m[[i, j]] * z[j]).sum();
                    assert!((f - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticGenConfig::new(2, 11);
        let a = generate_synthetic_triplets(&cfg).unwrap();
        let b = generate_synthetic_triplets(&cfg).unwrap();
        assert_eq!(a.features.rows(), b.features.rows());
        assert_eq!(a.manifest, b.manifest);
        let mut bad = cfg.clone();
        bad.noise_sigma = -1.0;
        assert!(generate_synthetic_triplets(&bad).is_err());
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn paired_features_correlate_more_than_shuffled() {
        let d = generate_synthetic_triplets(&SyntheticGenConfig::new(1000, 4)).unwrap();
        // matched-filter latent estimates from each modality
        let est = |mix: &Array2<f64>, x: &[f64]| mix.t().dot(&ndarray::aview1(x)).to_vec();
        let za: Vec<Vec<f64>> = d.features.rows().iter().map(|r| est(&d.world.audio_mix, &r.audio)).collect();
        let zt: Vec<Vec<f64>> = d.features.rows().iter().map(|r| est(&d.world.text_mix, &r.text)).collect();
        let avg_corr = |shift: usize| {
            (0..16)
                .map(|j| {
                    let a: Vec<f64> = za.iter().map(|z| z[j]).collect();
                    let t: Vec<f64> = (0..1000).map(|k| zt[(k + shift) % 1000][j]).collect();
                    pearson(&a, &t)
                })
                .sum::<f64>()
                / 16.0
        };
        let paired = avg_corr(0);
        let unpaired = avg_corr(1);
        assert!(paired > 0.5, "paired {paired}");
        assert!(paired > unpaired + 0.3, "paired {paired} unpaired {unpaired}");
    }

    #[test]
    fn featurize_record_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let clip = audio::WaveformClip::new(
            (0..16_000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect(),
            16_000,
        )
        .unwrap();
        std::fs::write(dir.path().join("a.wav"), audio::encode_wav_i16(&clip)).unwrap();
        let tile = Tile::from_shape_fn((256, 256, 3), |(y, x, c)| ((x + y + c * 40) % 256) as f64 / 255.0);
        save_tile_png(tile.view(), &dir.path().join("i.png")).unwrap();
        let mut r = record("x", 16_000);
        r.address = Some("Somewhere".into());
        let ex = MelExtractor::new(Default::default()).unwrap();
        let row = featurize_record(&r, &ex, dir.path()).unwrap();
        assert_eq!((row.audio.len(), row.text.len(), row.image.len()), (64, 512, 768));
        let expect_text = text::featurize_text("t. d The location of the sound is: Somewhere.").values;
        assert_eq!(row.text, expect_text);
        let back = load_tile_png(&dir.path().join("i.png")).unwrap();
        assert!(back.iter().zip(tile.iter()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn split_partition_property(n in 10usize..100_000, seed in any::<u64>()) {
            let (tr, va, te) = split_sizes(n, DEFAULT_SPLIT);
            prop_assert_eq!(tr, (7 * n) / 10);
            prop_assert_eq!(va, n / 10);
            prop_assert_eq!(tr + va + te, n);
            if n <= 2000 {
                let m = manifest(n);
                let s = split_dataset(&m, DEFAULT_SPLIT, seed).unwrap();
                let mut all: Vec<_> = s.train_ids.iter().chain(&s.val_ids).chain(&s.test_ids).cloned().collect();
                all.sort();
                let mut ids = m.ids();
                ids.sort();
                prop_assert_eq!(all, ids);
            }
        }

        #[test]
        fn epoch_union_covers_split(n in 1usize..60, bs in 1usize..60, seed in any::<u64>()) {
            prop_assume!(bs <= n);
            let t = table(n);
            let batches = make_batches(&t, &t.ids(), bs, seed, false).unwrap();
            let mut got: Vec<String> = batches.into_iter().flat_map(|b| b.ids).collect();
            got.sort();
            let mut want = t.ids();
            want.sort();
            prop_assert_eq!(got, want);
        }
    }
}

//! Zero-shot soundscape maps: a tile grid over a bounding box, per-query
//! cosine heatmaps against tile image embeddings, min-max normalization,
//! pseudo-color compositing and georeferenced PNG output.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioError, MelExtractor, WaveformClip};
use crate::dataset::{self, DatasetError, SyntheticWorld};
use crate::embedding::{EmbeddingBatch, EmbeddingError, EmbeddingVector};
use crate::encoders::{ModelError, ModelSnapshot, Modality};
use crate::geocode::cache_key;
use crate::text;

/// Meters per degree of latitude (and of longitude at the equator).
pub const METERS_PER_DEGREE: f64 = 111_320.0;
pub const MAX_QUERIES: usize = 3;
pub const DEFAULT_TILE_PX: usize = 256;
pub const DEFAULT_GSD_M: f64 = 0.6;

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("invalid bounding box: {0}")]
    InvalidBbox(String),
    #[error("invalid stride {0} m")]
    InvalidStride(f64),
    #[error("grid is empty: extent {extent_m:.1} m x {extent_lat_m:.1} m smaller than stride {stride_m} m")]
    EmptyGrid {
        extent_m: f64,
        extent_lat_m: f64,
        stride_m: f64,
    },
    #[error("grid has {cells} cells, limit is {max}")]
    TooManyCells { cells: usize, max: usize },
    #[error("{0} queries given, at most {MAX_QUERIES} allowed")]
    QueryLimitExceeded(usize),
    #[error("at least one query is required")]
    NoQueries,
    #[error("empty query: {0}")]
    EmptyQuery(String),
    #[error("heatmap shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("channel {0:?} assigned more than once")]
    ChannelConflict(Channel),
    #[error("no tile near ({lat}, {lon})")]
    NoTile { lat: f64, lon: f64 },
    #[error("tile index line {line}: {reason}")]
    TileIndex { line: usize, reason: String },
    #[error("raster encoding: {0}")]
    Encode(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MapError + '_ {
    move |source| MapError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl GeoBoundingBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, MapError> {
        let b = Self {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        let vals = [self.min_lat, self.min_lon, self.max_lat, self.max_lon];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(MapError::InvalidBbox("non-finite coordinate".into()));
        }
        if !(self.min_lat < self.max_lat && self.min_lon < self.max_lon) {
            return Err(MapError::InvalidBbox(format!("min must be below max: {self:?}")));
        }
        if self.min_lat < -90.0 || self.max_lat > 90.0 || self.min_lon < -180.0 || self.max_lon > 180.0 {
            return Err(MapError::InvalidBbox(format!("outside world bounds: {self:?}")));
        }
        Ok(())
    }

    pub fn center_lat(&self) -> f64 {
        0.5 * (self.min_lat + self.max_lat)
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.min_lat..=self.max_lat).contains(&lat) && (self.min_lon..=self.max_lon).contains(&lon)
    }

    /// Box of `width_m x height_m` centered on `(lat, lon)`.
    pub fn around(lat: f64, lon: f64, width_m: f64, height_m: f64) -> Result<Self, MapError> {
        let dlat = 0.5 * height_m / METERS_PER_DEGREE;
        let dlon = 0.5 * width_m / meters_per_degree_lon(lat);
        Self::new(lat - dlat, lon - dlon, lat + dlat, lon + dlon)
    }
}

impl FromStr for GeoBoundingBox {
    type Err = MapError;

    /// `min_lat,min_lon,max_lat,max_lon`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| MapError::InvalidBbox(format!("{s:?}: {e}")))?;
        match v[..] {
            [a, b, c, d] => Self::new(a, b, c, d),
            _ => Err(MapError::InvalidBbox(format!("{s:?}: expected 4 comma-separated numbers"))),
        }
    }
}

pub fn meters_per_degree_lon(lat: f64) -> f64 {
    METERS_PER_DEGREE * lat.to_radians().cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub lat: f64,
    pub lon: f64,
}

/// Cells laid row-major from the north-west corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub bbox: GeoBoundingBox,
    pub rows: usize,
    pub cols: usize,
    pub stride_m: f64,
    pub tile_px: usize,
    pub gsd_m: f64,
    /// Degrees per cell along longitude and latitude.
    pub cell_deg: (f64, f64),
    pub cells: Vec<GridCell>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Cell count along each axis, `floor(extent / stride)`, without building
/// the grid; lets callers enforce a cell cap first.
pub fn grid_shape(bbox: &GeoBoundingBox, stride_m: f64) -> Result<(usize, usize), MapError> {
    bbox.validate()?;
    if !(stride_m > 0.0) || !stride_m.is_finite() {
        return Err(MapError::InvalidStride(stride_m));
    }
    let lon_m = (bbox.max_lon - bbox.min_lon) * meters_per_degree_lon(bbox.center_lat());
    let lat_m = (bbox.max_lat - bbox.min_lat) * METERS_PER_DEGREE;
    // a millionth of a stride absorbs round-off in extents that are exact
    // multiples of the stride
    let cols = (lon_m / stride_m + 1e-6).floor() as usize;
    let rows = (lat_m / stride_m + 1e-6).floor() as usize;
    if rows == 0 || cols == 0 {
        return Err(MapError::EmptyGrid {
            extent_m: lon_m,
            extent_lat_m: lat_m,
            stride_m,
        });
    }
    Ok((rows, cols))
}

pub fn build_tile_grid(
    bbox: &GeoBoundingBox,
    stride_m: f64,
    tile_px: usize,
    gsd_m: f64,
) -> Result<TileGrid, MapError> {
    let (rows, cols) = grid_shape(bbox, stride_m)?;
    let dlon = stride_m / meters_per_degree_lon(bbox.center_lat());
    let dlat = stride_m / METERS_PER_DEGREE;
    let mut cells = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            cells.push(GridCell {
                row,
                col,
                lat: bbox.max_lat - (row as f64 + 0.5) * dlat,
                lon: bbox.min_lon + (col as f64 + 0.5) * dlon,
            });
        }
    }
    Ok(TileGrid {
        bbox: *bbox,
        rows,
        cols,
        stride_m,
        tile_px,
        gsd_m,
        cell_deg: (dlon, dlat),
        cells,
    })
}

/// Supplies image-tower input features for a location.
pub trait TileSource: Send + Sync {
    fn tile_features(&self, lat: f64, lon: f64) -> Result<Vec<f64>, MapError>;
}

/// One row of a tile index: either precomputed features or a PNG tile
/// (center-cropped on use).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub lat: f64,
    pub lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

/// Tiles looked up by exact (1e-6 degree) position, falling back to the
/// nearest entry by equirectangular distance.
#[derive(Debug, Clone, Default)]
pub struct TileIndex {
    entries: Vec<TileEntry>,
    exact: HashMap<(i64, i64), usize>,
    root: PathBuf,
}

impl TileIndex {
    pub fn new(entries: Vec<TileEntry>, root: &Path) -> Result<Self, MapError> {
        let mut exact = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.image_path.is_none() && e.features.is_none() {
                return Err(MapError::TileIndex {
                    line: i + 1,
                    reason: "entry needs image_path or features".into(),
                });
            }
            exact.entry(cache_key(e.lat, e.lon)).or_insert(i);
        }
        Ok(Self {
            entries,
            exact,
            root: root.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| MapError::TileIndex {
                line: i + 1,
                reason: e.to_string(),
            })?);
        }
        Self::new(entries, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e).expect("entry serializes")).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn nearest(&self, lat: f64, lon: f64) -> Option<&TileEntry> {
        if let Some(&i) = self.exact.get(&cache_key(lat, lon)) {
            return Some(&self.entries[i]);
        }
        let k = lat.to_radians().cos();
        self.entries.iter().min_by(|a, b| {
            let d = |e: &TileEntry| (e.lat - lat).powi(2) + ((e.lon - lon) * k).powi(2);
            d(a).total_cmp(&d(b))
        })
    }
}

impl TileSource for TileIndex {
    fn tile_features(&self, lat: f64, lon: f64) -> Result<Vec<f64>, MapError> {
        let e = self.nearest(lat, lon).ok_or(MapError::NoTile { lat, lon })?;
        if let Some(f) = &e.features {
            return Ok(f.clone());
        }
        let rel = e.image_path.as_deref().expect("checked on construction");
        let p = Path::new(rel);
        let path = if p.is_absolute() { p.to_path_buf() } else { self.root.join(p) };
        let tile = dataset::load_tile_png(&path)?;
        let crop = dataset::center_crop(tile.view(), dataset::CROP_SIZE)?;
        Ok(dataset::image_feature_vector(crop.view())?)
    }
}

/// A region of a synthetic geography and the latent class of its tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRegion {
    pub name: String,
    pub bbox: GeoBoundingBox,
    pub latent: Vec<f64>,
}

/// Tiles whose features come from a [`SyntheticWorld`]: a tile inside a
/// region uses that region's latent plus per-tile jitter, anything else a
/// fresh standard-normal latent. Deterministic per location.
#[derive(Debug, Clone)]
pub struct SyntheticGeography {
    pub world: SyntheticWorld,
    pub regions: Vec<SyntheticRegion>,
    pub jitter: f64,
    pub seed: u64,
}

impl SyntheticGeography {
    /// West and east halves of `bbox`, each with its own latent class drawn
    /// from `world`.
    pub fn two_regions(world: SyntheticWorld, bbox: &GeoBoundingBox, jitter: f64, seed: u64) -> Result<Self, MapError> {
        let mid = 0.5 * (bbox.min_lon + bbox.max_lon);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let west = GeoBoundingBox::new(bbox.min_lat, bbox.min_lon, bbox.max_lat, mid)?;
        let east = GeoBoundingBox::new(bbox.min_lat, mid, bbox.max_lat, bbox.max_lon)?;
        let regions = [("west", west), ("east", east)]
            .into_iter()
            .map(|(name, b)| SyntheticRegion {
                name: name.into(),
                bbox: b,
                latent: world.sample_latent(&mut rng),
            })
            .collect();
        Ok(Self {
            world,
            regions,
            jitter,
            seed,
        })
    }

    fn rng_at(&self, lat: f64, lon: f64) -> ChaCha8Rng {
        let (a, b) = cache_key(lat, lon);
        let s = self.seed ^ (a as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (b as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
        ChaCha8Rng::seed_from_u64(s)
    }

    pub fn latent_at(&self, lat: f64, lon: f64) -> Vec<f64> {
        let mut rng = self.rng_at(lat, lon);
        match self.regions.iter().find(|r| r.bbox.contains(lat, lon)) {
            Some(r) => {
                let eps = self.world.sample_latent(&mut rng);
                r.latent.iter().zip(eps).map(|(m, e)| m + self.jitter * e).collect()
            }
            None => self.world.sample_latent(&mut rng),
        }
    }

    pub fn region_at(&self, lat: f64, lon: f64) -> Option<usize> {
        self.regions.iter().position(|r| r.bbox.contains(lat, lon))
    }

    /// Text-tower input for a prompt "about" region `i`'s class.
    pub fn class_text_features(&self, i: usize, seed: u64) -> Vec<f64> {
        self.world
            .text_features(&self.regions[i].latent, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn class_audio_features(&self, i: usize, seed: u64) -> Vec<f64> {
        self.world
            .audio_features(&self.regions[i].latent, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Materializes the features of every cell of `grid` as a tile index.
    pub fn tile_index(&self, grid: &TileGrid) -> Result<TileIndex, MapError> {
        let entries = grid
            .cells
            .iter()
            .map(|c| {
                Ok(TileEntry {
                    lat: c.lat,
                    lon: c.lon,
                    image_path: None,
                    features: Some(self.tile_features(c.lat, c.lon)?),
                })
            })
            .collect::<Result<Vec<_>, MapError>>()?;
        TileIndex::new(entries, Path::new("."))
    }
}

impl TileSource for SyntheticGeography {
    fn tile_features(&self, lat: f64, lon: f64) -> Result<Vec<f64>, MapError> {
        let z = self.latent_at(lat, lon);
        let mut rng = self.rng_at(lat, lon);
        // skip past the draws used for the latent
        let _ = self.world.sample_latent(&mut rng);
        Ok(self.world.image_features(&z, &mut rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Raw,
    Minmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub scores: Array2<f64>,
    pub query: String,
    pub normalization: Normalization,
}

impl Heatmap {
    pub fn shape(&self) -> (usize, usize) {
        self.scores.dim()
    }

    /// Row-major index of the largest score (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.scores.iter().enumerate() {
            if v > self.scores.as_slice().expect("standard layout")[best] {
                best = i;
            }
        }
        best
    }
}

/// Image embeddings of every cell, in cell order.
pub fn embed_grid(grid: &TileGrid, snapshot: &ModelSnapshot, source: &dyn TileSource) -> Result<EmbeddingBatch, MapError> {
    let width = snapshot.config.image.input_dim;
    let mut feats = Array2::zeros((grid.cells.len(), width));
    for (i, c) in grid.cells.iter().enumerate() {
        let f = source.tile_features(c.lat, c.lon)?;
        if f.len() != width {
            return Err(ModelError::FeatureShape {
                modality: Modality::Image,
                got: f.len(),
                expected: width,
            }
            .into());
        }
        feats.row_mut(i).assign(&ndarray::aview1(&f));
    }
    let ids = grid.cells.iter().map(|c| format!("r{}c{}", c.row, c.col)).collect();
    Ok(snapshot.encode(Modality::Image, ids, feats.view())?)
}

/// `score[r][c] = query . tile_embedding[r * cols + c]`.
pub fn heatmap_from_embeddings(
    query: &EmbeddingVector,
    label: &str,
    tiles: &EmbeddingBatch,
    grid: &TileGrid,
) -> Result<Heatmap, MapError> {
    if query.dim() != tiles.dim() {
        return Err(EmbeddingError::DimMismatch {
            left: query.dim(),
            right: tiles.dim(),
        }
        .into());
    }
    let q = ndarray::aview1(query.values());
    let s = tiles.rows().dot(&q);
    let scores = s
        .into_shape_with_order((grid.rows, grid.cols))
        .map_err(|e| MapError::Encode(e.to_string()))?;
    Ok(Heatmap {
        scores,
        query: label.to_string(),
        normalization: Normalization::Raw,
    })
}

pub fn similarity_heatmap(
    query: &EmbeddingVector,
    grid: &TileGrid,
    snapshot: &ModelSnapshot,
    source: &dyn TileSource,
) -> Result<Heatmap, MapError> {
    let tiles = embed_grid(grid, snapshot, source)?;
    heatmap_from_embeddings(query, "query", &tiles, grid)
}

/// `(x - min) / (max - min)`; a range below 1e-12 maps to 0.5 everywhere.
pub fn minmax_normalize(h: &Heatmap) -> Heatmap {
    let min = h.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = h.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let scores = if !(range >= 1e-12) {
        h.scores.mapv(|_| 0.5)
    } else {
        h.scores.mapv(|x| (x - min) / range)
    };
    Heatmap {
        scores,
        query: h.query.clone(),
        normalization: Normalization::Minmax,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Red,
    Green,
    Blue,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Red, Channel::Green, Channel::Blue];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// `rows x cols x 3` image in `[0, 1]` plus which query feeds each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeMap {
    pub pixels: Array3<f64>,
    pub channels: [Option<String>; 3],
}

/// Channel `c` of each pixel is the heatmap assigned to `c`, or 0.
pub fn composite_pseudocolor(heatmaps: &[(&Heatmap, Channel)]) -> Result<CompositeMap, MapError> {
    if heatmaps.is_empty() {
        return Err(MapError::NoQueries);
    }
    if heatmaps.len() > MAX_QUERIES {
        return Err(MapError::QueryLimitExceeded(heatmaps.len()));
    }
    let shape = heatmaps[0].0.shape();
    let mut pixels = Array3::zeros((shape.0, shape.1, 3));
    let mut channels: [Option<String>; 3] = Default::default();
    for (h, ch) in heatmaps {
        if h.shape() != shape {
            return Err(MapError::ShapeMismatch(shape, h.shape()));
        }
        let c = ch.index();
        if channels[c].is_some() {
            return Err(MapError::ChannelConflict(*ch));
        }
        channels[c] = Some(h.query.clone());
        pixels
            .index_axis_mut(ndarray::Axis(2), c)
            .assign(&h.scores);
    }
    Ok(CompositeMap { pixels, channels })
}

/// 8-bit quantization with round-half-up: `floor(x * 255 + 0.5)`.
pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// What gets rasterized: an RGB composite, or one heatmap as grayscale.
/// Raw heatmaps are mapped from `[-1, 1]` to `[0, 1]` via `(x + 1) / 2`.
#[derive(Debug, Clone, Copy)]
pub enum Raster<'a> {
    Composite(&'a CompositeMap),
    Heatmap(&'a Heatmap),
}

pub fn encode_png(raster: Raster<'_>) -> Result<Vec<u8>, MapError> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    match raster {
        Raster::Composite(m) => {
            let (h, w, _) = m.pixels.dim();
            let bytes: Vec<u8> = m.pixels.iter().map(|&v| quantize(v)).collect();
            enc.write_image(&bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        }
        Raster::Heatmap(hm) => {
            let (h, w) = hm.shape();
            let bytes: Vec<u8> = hm
                .scores
                .iter()
                .map(|&v| match hm.normalization {
                    Normalization::Minmax => quantize(v),
                    Normalization::Raw => quantize((v + 1.0) / 2.0),
                })
                .collect();
            enc.write_image(&bytes, w as u32, h as u32, image::ExtendedColorType::L8)
        }
    }
    .map_err(|e| MapError::Encode(e.to_string()))?;
    Ok(out)
}

/// ESRI world file: x pixel size, two rotation terms, negative y pixel size,
/// then the center of the upper-left pixel, all in degrees.
pub fn world_file(grid: &TileGrid) -> String {
    let (dx, dy) = grid.cell_deg;
    let ul_x = grid.bbox.min_lon + 0.5 * dx;
    let ul_y = grid.bbox.max_lat - 0.5 * dy;
    format!("{dx}\n0\n0\n{}\n{ul_x}\n{ul_y}\n", -dy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMetadata {
    pub bbox: GeoBoundingBox,
    pub stride_m: f64,
    pub rows: usize,
    pub cols: usize,
    pub queries: Vec<String>,
    pub channels: [Option<String>; 3],
    pub normalization: Normalization,
}

/// The byte-level outputs of one map; CLI and service both emit exactly
/// these.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedMap {
    pub png: Vec<u8>,
    pub world_file: String,
    pub metadata: MapMetadata,
}

impl RenderedMap {
    /// Writes `<stem>.png`, `<stem>.pgw` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf, MapError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let png = dir.join(format!("{stem}.png"));
        std::fs::write(&png, &self.png).map_err(io_err(&png))?;
        let pgw = dir.join(format!("{stem}.pgw"));
        std::fs::write(&pgw, &self.world_file).map_err(io_err(&pgw))?;
        let meta = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&self.metadata).expect("metadata serializes");
        std::fs::write(&meta, json).map_err(io_err(&meta))?;
        Ok(png)
    }
}

pub fn render(raster: Raster<'_>, grid: &TileGrid, queries: &[String]) -> Result<RenderedMap, MapError> {
    let (channels, normalization) = match raster {
        Raster::Composite(m) => (m.channels.clone(), Normalization::Minmax),
        Raster::Heatmap(h) => ([Some(h.query.clone()), None, None], h.normalization),
    };
    Ok(RenderedMap {
        png: encode_png(raster)?,
        world_file: world_file(grid),
        metadata: MapMetadata {
            bbox: grid.bbox,
            stride_m: grid.stride_m,
            rows: grid.rows,
            cols: grid.cols,
            queries: queries.to_vec(),
            channels,
            normalization,
        },
    })
}

/// Writes a composite or heatmap as PNG + world file + metadata sidecar,
/// named after `path`'s stem.
pub fn write_raster(raster: Raster<'_>, grid: &TileGrid, queries: &[String], path: &Path) -> Result<(), MapError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| MapError::Encode(format!("bad output path {}", path.display())))?;
    render(raster, grid, queries)?.write(dir, stem)?;
    Ok(())
}

/// Reads a PNG back to values in `[0, 1]` as `rows x cols x channels`.
pub fn read_png(path: &Path) -> Result<Array3<f64>, MapError> {
    let img = image::open(path).map_err(|e| MapError::Encode(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(match img {
        image::DynamicImage::ImageLuma8(g) => {
            Array3::from_shape_fn((h, w, 1), |(y, x, _)| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
        }
        other => {
            let rgb = other.to_rgb8();
            Array3::from_shape_fn((h, w, 3), |(y, x, c)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
        }
    })
}

#[derive(Debug, Clone)]
pub enum Query {
    Text(String),
    Audio(WaveformClip),
    Embedding { label: String, vector: EmbeddingVector },
}

impl Query {
    pub fn label(&self) -> String {
        match self {
            Query::Text(t) => format!("text:{t}"),
            Query::Audio(c) => format!("audio:{:.2}s@{}Hz", c.duration_s(), c.sample_rate_hz),
            Query::Embedding { label, .. } => label.clone(),
        }
    }
}

/// Text through the text tower; empty text is rejected.
pub fn embed_text(snapshot: &ModelSnapshot, text: &str) -> Result<EmbeddingVector, MapError> {
    if text.trim().is_empty() {
        return Err(MapError::EmptyQuery("text is empty".into()));
    }
    let f = text::featurize_text(text);
    if f.empty {
        return Err(MapError::EmptyQuery(format!("{text:?} has no tokens")));
    }
    Ok(snapshot.tower(Modality::Text).encode_one(&f.values)?)
}

/// A clip through the evaluation audio path and the audio tower.
pub fn embed_audio(snapshot: &ModelSnapshot, extractor: &MelExtractor, clip: &WaveformClip) -> Result<EmbeddingVector, MapError> {
    let f = audio::featurize_clip(extractor, clip)?;
    Ok(snapshot.tower(Modality::Audio).encode_one(&f)?)
}

pub fn embed_query(snapshot: &ModelSnapshot, extractor: &MelExtractor, q: &Query) -> Result<EmbeddingVector, MapError> {
    match q {
        Query::Text(t) => embed_text(snapshot, t),
        Query::Audio(c) => embed_audio(snapshot, extractor, c),
        Query::Embedding { vector, .. } => Ok(vector.clone()),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MapOptions {
    pub tile_px: usize,
    pub gsd_m: f64,
    pub max_cells: Option<usize>,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            tile_px: DEFAULT_TILE_PX,
            gsd_m: DEFAULT_GSD_M,
            max_cells: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Soundscape {
    pub grid: TileGrid,
    pub raw: Vec<Heatmap>,
    pub normalized: Vec<Heatmap>,
    pub composite: CompositeMap,
    pub labels: Vec<String>,
}

impl Soundscape {
    pub fn render(&self) -> Result<RenderedMap, MapError> {
        render(Raster::Composite(&self.composite), &self.grid, &self.labels)
    }
}

/// Queries -> grid -> heatmaps -> per-map min-max -> composite, with query
/// `i` on channel `i` (red, green, blue).
pub fn soundscape_from_queries(
    bbox: &GeoBoundingBox,
    queries: &[Query],
    snapshot: &ModelSnapshot,
    stride_m: f64,
    source: &dyn TileSource,
    extractor: &MelExtractor,
    opts: &MapOptions,
) -> Result<Soundscape, MapError> {
    if queries.is_empty() {
        return Err(MapError::NoQueries);
    }
    if queries.len() > MAX_QUERIES {
        return Err(MapError::QueryLimitExceeded(queries.len()));
    }
    let (rows, cols) = grid_shape(bbox, stride_m)?;
    if let Some(max) = opts.max_cells {
        if rows * cols > max {
            return Err(MapError::TooManyCells { cells: rows * cols, max });
        }
    }
    let vectors = queries
        .iter()
        .map(|q| embed_query(snapshot, extractor, q))
        .collect::<Result<Vec<_>, _>>()?;
    let grid = build_tile_grid(bbox, stride_m, opts.tile_px, opts.gsd_m)?;
    let tiles = embed_grid(&grid, snapshot, source)?;
    let labels: Vec<String> = queries.iter().map(Query::label).collect();
    let raw = vectors
        .iter()
        .zip(&labels)
        .map(|(v, l)| heatmap_from_embeddings(v, l, &tiles, &grid))
        .collect::<Result<Vec<_>, _>>()?;
    let normalized: Vec<Heatmap> = raw.iter().map(minmax_normalize).collect();
    let assignment: Vec<(&Heatmap, Channel)> = normalized.iter().zip(Channel::ALL).collect();
    let composite = composite_pseudocolor(&assignment)?;
    Ok(Soundscape {
        grid,
        raw,
        normalized,
        composite,
        labels,
    })
}

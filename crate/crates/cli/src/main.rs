//! `geoclap`: synthesize data, featurize a manifest, split, train,
//! evaluate retrieval, render soundscape maps and run the HTTP service.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use geoclap_core::audio::{load_wav, MelExtractor};
use geoclap_core::contrastive::{train_loop, TrainConfig};
use geoclap_core::dataset::{
    featurize_record, filter_min_sample_rate, generate_synthetic_triplets, split_dataset, FeatureTable,
    SampleManifest, SplitAssignment, SyntheticGenConfig, SyntheticWorld, DEFAULT_SPLIT, MIN_SAMPLE_RATE_HZ,
};
use geoclap_core::encoders::{load_checkpoint, ModelSnapshot};
use geoclap_core::retrieval::{evaluate_crossmodal, format_report_table, Direction, DEFAULT_KS};
use geoclap_core::soundscape::{
    build_tile_grid, render, soundscape_from_queries, GeoBoundingBox, MapOptions, Query, Raster,
    SyntheticGeography, TileIndex, DEFAULT_GSD_M, DEFAULT_TILE_PX,
};
use geoclap_service::{serve, ServiceConfig, DEFAULT_MAX_CELLS};

const MANIFEST_FILE: &str = "manifest.jsonl";
const FEATURES_FILE: &str = "features.jsonl";
const TILES_FILE: &str = "tiles.jsonl";
const SPLIT_FILE: &str = "split.json";

#[derive(Parser)]
#[command(name = "geoclap", version, about = "Tri-modal contrastive embeddings and soundscape maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic triplet dataset (and optionally a tile index).
    Synth(SynthArgs),
    /// Featurize a manifest through the evaluation path.
    Prepare(PrepareArgs),
    /// Seeded train/val/test split of a manifest.
    Split(SplitArgs),
    /// Train a snapshot.
    Train(TrainArgs),
    /// Cross-modal retrieval metrics over a gallery.
    Eval(EvalArgs),
    /// Render a soundscape map for up to three queries.
    Map(MapArgs),
    /// Run the HTTP service (flags override GEOCLAP_* environment variables).
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a two-region tile index over this box.
    #[arg(long, value_name = "MINLAT,MINLON,MAXLAT,MAXLON")]
    tiles_bbox: Option<GeoBoundingBox>,
    #[arg(long, default_value_t = 100.0)]
    tiles_stride_m: f64,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory that relative media paths resolve against (defaults to the
    /// manifest's directory).
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = MIN_SAMPLE_RATE_HZ)]
    min_sample_rate: u32,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, val, test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [DEFAULT_SPLIT.0, DEFAULT_SPLIT.1, DEFAULT_SPLIT.2])]
    ratios: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Precomputed features; otherwise the manifest is featurized first.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Split file; otherwise the default split seeded by the config seed.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Evaluate on the split's test ids; otherwise on every row.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [Direction::Image2Sound, Direction::Sound2Image])]
    directions: Vec<Direction>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    ks: Vec<usize>,
    /// Also write the reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long, value_name = "MINLAT,MINLON,MAXLAT,MAXLON")]
    bbox: GeoBoundingBox,
    #[arg(long)]
    stride_m: f64,
    /// Text prompt; repeatable. Text queries take channels before audio ones.
    #[arg(long)]
    query_text: Vec<String>,
    /// WAV file; repeatable.
    #[arg(long)]
    query_audio: Vec<PathBuf>,
    #[arg(long)]
    snapshot: PathBuf,
    /// Tile index (JSONL) providing imagery for each cell.
    #[arg(long)]
    tiles: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "soundscape")]
    name: String,
    #[arg(long, default_value_t = DEFAULT_MAX_CELLS)]
    max_cells: usize,
    /// Also write each normalized per-query heatmap.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[arg(long)]
    tiles: Option<PathBuf>,
    #[arg(long)]
    max_cells: Option<usize>,
    #[arg(long)]
    timeout_s: Option<u64>,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_split(path: &Path) -> Result<SplitAssignment> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticGenConfig {
        latent_dim: a.latent_dim,
        noise_sigma: a.noise,
        ..SyntheticGenConfig::new(a.n, a.seed)
    };
    let ds = generate_synthetic_triplets(&cfg)?;
    fs::create_dir_all(&a.out)?;
    ds.manifest.save(&a.out.join(MANIFEST_FILE))?;
    ds.features.save(&a.out.join(FEATURES_FILE))?;
    if let Some(bbox) = a.tiles_bbox {
        let world = SyntheticWorld::new(a.latent_dim, a.noise, a.seed);
        let geo = SyntheticGeography::two_regions(world, &bbox, 0.1, a.seed)?;
        let grid = build_tile_grid(&bbox, a.tiles_stride_m, DEFAULT_TILE_PX, DEFAULT_GSD_M)?;
        geo.tile_index(&grid)?.save(&a.out.join(TILES_FILE))?;
    }
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

fn featurize(manifest: &SampleManifest, root: &Path) -> Result<FeatureTable> {
    let ex = MelExtractor::new(Default::default())?;
    let mut table = FeatureTable::new();
    for id in manifest.ids() {
        let rec = manifest.get(&id).expect("id from manifest");
        table.insert(featurize_record(rec, &ex, root).with_context(|| format!("featurizing {id}"))?)?;
    }
    Ok(table)
}

fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let manifest = filter_min_sample_rate(&SampleManifest::load(&a.manifest)?, a.min_sample_rate);
    let root = a.root.unwrap_or_else(|| manifest_root(&a.manifest));
    let table = featurize(&manifest, &root)?;
    table.save(&a.out)?;
    println!("featurized {} samples into {}", table.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let manifest = SampleManifest::load(&a.manifest)?;
    let s = split_dataset(&manifest, (a.ratios[0], a.ratios[1], a.ratios[2]), a.seed)?;
    write_json(&a.out, &s)?;
    let (tr, va, te) = s.sizes();
    println!("train {tr} / val {va} / test {te}");
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config)?;
    let manifest = SampleManifest::load(&a.manifest)?;
    let table = match &a.features {
        Some(p) => FeatureTable::load(p)?,
        None => featurize(&filter_min_sample_rate(&manifest, MIN_SAMPLE_RATE_HZ), &manifest_root(&a.manifest))?,
    };
    let split = match &a.split {
        Some(p) => read_split(p)?,
        None => split_dataset(&manifest, DEFAULT_SPLIT, config.seed)?,
    };
    let train_ids: Vec<String> = split.train_ids.iter().filter(|id| table.get(id).is_some()).cloned().collect();
    if train_ids.len() < config.batch_size {
        bail!("{} training rows with features, batch size is {}", train_ids.len(), config.batch_size);
    }
    let widths = table.widths().context("feature table is empty")?;
    let snapshot = ModelSnapshot::init(config.model_config(widths), config.seed)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join(SPLIT_FILE), &split)?;
    let result = train_loop(&config, &table, &train_ids, snapshot, Some(&a.out))?;
    if let Some(last) = result.log.last() {
        println!("trained {} steps, final loss {:.4}", last.step, last.loss.total);
    }
    let val: Vec<String> = split.val_ids.iter().filter(|id| table.get(id).is_some()).cloned().collect();
    if !val.is_empty() {
        let reports = evaluate_crossmodal(&result.snapshot, &table, &val, &[Direction::Image2Sound], &DEFAULT_KS)?;
        print!("validation\n{}", format_report_table(&reports));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let snapshot = load_checkpoint(&a.snapshot)?;
    let table = FeatureTable::load(&a.features)?;
    let ids = match &a.split {
        Some(p) => read_split(p)?.test_ids,
        None => table.ids(),
    };
    let reports = evaluate_crossmodal(&snapshot, &table, &ids, &a.directions, &a.ks)?;
    print!("{}", format_report_table(&reports));
    if let Some(p) = &a.json {
        write_json(p, &reports)?;
    }
    Ok(())
}

fn map(a: MapArgs) -> Result<()> {
    let snapshot = load_checkpoint(&a.snapshot)?;
    let tiles = TileIndex::load(&a.tiles)?;
    let mut queries: Vec<Query> = a.query_text.iter().cloned().map(Query::Text).collect();
    for p in &a.query_audio {
        queries.push(Query::Audio(load_wav(p)?));
    }
    let ex = MelExtractor::new(Default::default())?;
    let opts = MapOptions {
        max_cells: Some(a.max_cells),
        ..Default::default()
    };
    let s = soundscape_from_queries(&a.bbox, &queries, &snapshot, a.stride_m, &tiles, &ex, &opts)?;
    let png = s.render()?.write(&a.out, &a.name)?;
    if a.heatmaps {
        for (i, h) in s.normalized.iter().enumerate() {
            render(Raster::Heatmap(h), &s.grid, &[h.query.clone()])?.write(&a.out, &format!("{}_heatmap{}", a.name, i + 1))?;
        }
    }
    println!("{}x{} map written to {}", s.grid.rows, s.grid.cols, png.display());
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<()> {
    let mut c = ServiceConfig::from_env()?;
    if let Some(l) = a.listen {
        c.listen = l.parse().with_context(|| format!("--listen {l:?}"))?;
    }
    c.snapshot_path = a.snapshot.or(c.snapshot_path);
    c.gallery_path = a.gallery.or(c.gallery_path);
    c.tiles_path = a.tiles.or(c.tiles_path);
    if let Some(m) = a.max_cells {
        c.max_cells = m;
    }
    if let Some(t) = a.timeout_s {
        c.request_timeout = std::time::Duration::from_secs(t);
    }
    tokio::runtime::Runtime::new()?.block_on(serve(c))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Prepare(a) => prepare(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Map(a) => map(a),
        Command::Serve(a) => run_serve(a),
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use rainsep_core::datastore::{
    build_manifest, finish_triplet_manifest, flat_dir_manifest, triplet_id_width, write_triplet_files, DatasetKind,
    ImageSet, Manifest, Role, MANIFEST_FILE,
};
use rainsep_core::metrics::{bench_inference, evaluate_corpus, TimingRecord};
use rainsep_core::network::checkpoint::load_model;
use rainsep_core::network::Model;
use rainsep_core::objectives::Stage;
use rainsep_core::rainsynth::{procedural_background, synthesize_range, SynthOptions};
use rainsep_core::seed::derive_seed;
use rainsep_core::trainer::{Checkpoint, Trainer};
use rainsep_core::ImageTensor;
use toml::Value;

use crate::config::{apply_assignment, load_table, set_key, RunConfig};
use crate::Common;

const SYNTH_CHUNK: usize = 256;
const PROCEDURAL_BACKGROUNDS: usize = 64;

/// Reference GPU and CPU timings for the two preset sizes, shown next to
/// local results and never compared against them.
const REFERENCE_TIMINGS: [(usize, f64, f64); 2] = [(250, 0.98, 0.03), (500, 4.04, 0.12)];

/// Merges defaults, the config file, `--set` overrides and command flags.
fn resolve(common: &Common, flags: Vec<(&str, Value)>) -> Result<RunConfig> {
    let mut table = load_table(common.config.as_deref())?;
    for a in &common.overrides {
        apply_assignment(&mut table, a)?;
    }
    if let Some(seed) = common.seed {
        set_key(&mut table, "seed", Value::Integer(seed as i64))?;
    }
    if let Some(device) = &common.device {
        set_key(&mut table, "device", Value::String(device.clone()))?;
    }
    for (key, value) in flags {
        set_key(&mut table, key, value)?;
    }
    RunConfig::from_table(table)
}

fn int(v: impl TryInto<i64>) -> Value {
    Value::Integer(v.try_into().unwrap_or(i64::MAX))
}

fn require_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().context("--out is required for this command")
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_rgb(path: &Path) -> Result<ImageTensor> {
    let img = ImageTensor::load_png(path)?;
    Ok(if img.channels() == 1 { img.expand_channels(3)? } else { img })
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of triplets to generate.
    #[arg(long)]
    count: Option<usize>,
    /// Blend model: `screen` or `additive`.
    #[arg(long)]
    mode: Option<String>,
    /// Directory of clean PNG backgrounds (procedural scenes when omitted).
    #[arg(long, value_name = "DIR")]
    backgrounds: Option<PathBuf>,
    /// Side of the square crop taken from each background.
    #[arg(long)]
    crop: Option<usize>,
}

pub fn synth(common: &Common, args: SynthArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(c) = args.count {
        flags.push(("synth.count", int(c)));
    }
    if let Some(m) = args.mode {
        flags.push(("synth.mode", Value::String(m.to_ascii_lowercase())));
    }
    if let Some(b) = &args.backgrounds {
        flags.push(("synth.backgrounds", Value::String(b.display().to_string())));
    }
    if let Some(c) = args.crop {
        flags.push(("synth.crop", int(c)));
    }
    let cfg = resolve(common, flags)?;
    let out = require_out(common)?;
    let seed = cfg.seed();
    let s = &cfg.synth;

    let backgrounds: Vec<ImageTensor> = match &s.backgrounds {
        Some(dir) => png_files(dir)?.iter().map(|p| load_rgb(p)).collect::<Result<_>>()?,
        None => (0..PROCEDURAL_BACKGROUNDS.min(s.count))
            .map(|i| procedural_background(s.crop + 32, s.crop + 32, 3, derive_seed(seed, 0xB600 + i as u64)))
            .collect(),
    };
    if backgrounds.is_empty() {
        bail!("no PNG backgrounds found");
    }
    let opts = SynthOptions { crop: s.crop, mode: s.mode, seed };
    let width = triplet_id_width(s.count);
    let mut entries = Vec::with_capacity(s.count);
    let mut start = 0;
    while start < s.count {
        let end = (start + SYNTH_CHUNK).min(s.count);
        let triplets = synthesize_range(&backgrounds, start..end, &cfg.rain, &opts)?;
        entries.extend(write_triplet_files(out, start, width, &triplets)?);
        log::info!("wrote triplets {start}..{end}");
        start = end;
    }
    let manifest = finish_triplet_manifest(out, entries)?;
    println!(
        "synthesized {} triplets (mode {}, seed {}, crop {}) into {}",
        manifest.len(),
        s.mode,
        seed,
        s.crop,
        out.display()
    );
    Ok(())
}

/// Reads `dir/manifest.jsonl` when present, otherwise scans the directory.
fn paired_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    Ok(if path.exists() {
        Manifest::read(&path, DatasetKind::PairedTriplets)?
    } else {
        build_manifest(dir, DatasetKind::PairedTriplets)?
    })
}

/// Real images either in the role subdirectory layout or as a flat folder.
fn real_set(dir: &Path, kind: DatasetKind) -> Result<ImageSet> {
    let role = if kind == DatasetKind::RealRainy { Role::Rainy } else { Role::Background };
    if dir.join(role.dir_name()).is_dir() {
        return Ok(ImageSet::open(&build_manifest(dir, kind)?)?);
    }
    let manifest = flat_dir_manifest(dir)?;
    let images = manifest
        .entries()
        .iter()
        .map(|e| load_rgb(&manifest.resolve(e.background.as_deref().unwrap_or_default())))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageSet::from_images(kind, images))
}

fn check_resumed_network(cfg: &RunConfig, ckpt: &Checkpoint) {
    if ckpt.model.config != cfg.network {
        log::warn!("using the network configuration stored in the checkpoint, not the configured one");
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Paired triplet dataset written by `synth`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Continue from a pretraining checkpoint.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
    /// Total pretraining iterations.
    #[arg(long)]
    max_iter: Option<u64>,
}

pub fn train(common: &Common, args: TrainArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(n) = args.max_iter {
        flags.push(("train.max_iter", int(n)));
    }
    let cfg = resolve(common, flags)?;
    let out = require_out(common)?;
    println!("config: {}", cfg.train_header());
    log::info!("device: {}", cfg.resolve_device());
    let data = ImageSet::open(&paired_manifest(&args.data)?)?;
    let mut trainer = Trainer::new(cfg.train.clone())?.with_output_dir(out)?;
    let started = Instant::now();
    let ckpt = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            check_resumed_network(&cfg, &ckpt);
            println!("resuming pretraining at iteration {}", ckpt.state.iteration);
            trainer.resume_pretrain(ckpt, &data)?
        }
        None => trainer.pretrain(&data, &cfg.network)?,
    };
    println!(
        "pretrained to iteration {} in {:.1}s; final checkpoint {}",
        ckpt.state.iteration,
        started.elapsed().as_secs_f64(),
        trainer.last_checkpoint().map(|p| p.display().to_string()).unwrap_or_default()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint to start from.
    #[arg(long, value_name = "CHECKPOINT", required_unless_present = "resume")]
    checkpoint: Option<PathBuf>,
    /// Real rainy images (flat folder or dataset root with `rainy/`).
    #[arg(long, value_name = "DIR")]
    rainy: PathBuf,
    /// Real rain-free images (flat folder or dataset root with `background/`).
    #[arg(long, value_name = "DIR")]
    clean: PathBuf,
    /// Continue from a fine-tuning checkpoint.
    #[arg(long, value_name = "CHECKPOINT", conflicts_with = "checkpoint")]
    resume: Option<PathBuf>,
    /// Total fine-tuning iterations.
    #[arg(long)]
    max_iter: Option<u64>,
}

pub fn finetune(common: &Common, args: FinetuneArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(n) = args.max_iter {
        flags.push(("train.finetune_iter", int(n)));
    }
    let cfg = resolve(common, flags)?;
    let out = require_out(common)?;
    println!("config: {}", cfg.train_header());
    log::info!("device: {}", cfg.resolve_device());
    let rainy = real_set(&args.rainy, DatasetKind::RealRainy)?;
    let clean = real_set(&args.clean, DatasetKind::RealClean)?;
    let path = args.resume.as_ref().or(args.checkpoint.as_ref()).expect("clap enforces one");
    let ckpt = Checkpoint::load(path)?;
    check_resumed_network(&cfg, &ckpt);
    match (args.resume.is_some(), ckpt.state.stage) {
        (true, Stage::Pretrain) => bail!("--resume expects a fine-tuning checkpoint"),
        (false, Stage::Finetune) => bail!("--checkpoint expects a pretraining checkpoint; use --resume"),
        _ => {}
    }
    let mut trainer = Trainer::new(cfg.train.clone())?.with_output_dir(out)?;
    let started = Instant::now();
    let ckpt = trainer.finetune(ckpt, &rainy, &clean)?;
    println!(
        "fine-tuned to iteration {} in {:.1}s; final checkpoint {}",
        ckpt.state.iteration,
        started.elapsed().as_secs_f64(),
        trainer.last_checkpoint().map(|p| p.display().to_string()).unwrap_or_default()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct DerainArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "CHECKPOINT")]
    checkpoint: PathBuf,
    /// PNG image or directory of PNG images.
    input: PathBuf,
}

pub fn derain(common: &Common, args: DerainArgs) -> Result<()> {
    let _cfg = resolve(common, Vec::new())?;
    let out = require_out(common)?;
    let model = load_model(&args.checkpoint, None)?;
    let inputs = if args.input.is_dir() {
        png_files(&args.input)?
    } else if args.input.is_file() {
        vec![args.input.clone()]
    } else {
        bail!("input {} does not exist", args.input.display());
    };
    fs::create_dir_all(out)?;
    for path in inputs {
        let image = load_rgb(&path)?;
        let started = Instant::now();
        let clean = model.derain(&image)?;
        let elapsed = started.elapsed().as_secs_f64();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let target = out.join(format!("{stem}_derained.png"));
        clean.save_png(&target)?;
        println!("{}\t{:.4}s\t{}", path.display(), elapsed, target.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Derained images; `_derained` suffixes are ignored when matching ids.
    #[arg(long, value_name = "DIR")]
    results: PathBuf,
    /// Ground-truth images (flat folder or dataset root with `background/`).
    #[arg(long, value_name = "DIR")]
    truth: PathBuf,
}

fn truth_manifest(dir: &Path) -> Result<Manifest> {
    let has = |r: Role| dir.join(r.dir_name()).is_dir();
    Ok(if has(Role::Background) && has(Role::Rainy) && has(Role::Rain) {
        paired_manifest(dir)?
    } else if has(Role::Background) {
        build_manifest(dir, DatasetKind::RealClean)?
    } else {
        flat_dir_manifest(dir)?
    })
}

pub fn eval(common: &Common, args: EvalArgs) -> Result<()> {
    let _cfg = resolve(common, Vec::new())?;
    let results = flat_dir_manifest(&args.results)?;
    let truths = truth_manifest(&args.truth)?;
    let report = evaluate_corpus(&results, &truths)?;
    print!("{}", report.to_table());
    match &common.out {
        Some(path) => fs::write(path, report.to_json() + "\n")?,
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Trained checkpoint; a freshly initialized network is timed otherwise.
    #[arg(long, value_name = "CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Square image side in pixels. Repeatable; defaults to 250 and 500.
    #[arg(long = "size")]
    sizes: Vec<usize>,
    /// Measured runs per size.
    #[arg(long)]
    runs: Option<usize>,
    /// Untimed runs before measuring.
    #[arg(long)]
    warmup: Option<usize>,
}

fn timing_table(records: &[TimingRecord]) -> String {
    let mut out = format!("{:>9}  {:>10}  {:>10}  {:>5}  device\n", "size", "median s", "mean s", "runs");
    for r in records {
        out += &format!(
            "{:>9}  {:>10.4}  {:>10.4}  {:>5}  {}\n",
            format!("{}x{}", r.image_size.0, r.image_size.1),
            r.median_seconds,
            r.mean_seconds,
            r.measured_runs,
            r.device_label
        );
        if let Some((_, cpu, gpu)) = REFERENCE_TIMINGS.iter().find(|(s, ..)| (*s, *s) == r.image_size) {
            out += &format!("{:>9}  reference: {cpu} s CPU, {gpu} s GPU (not asserted)\n", "");
        }
    }
    out
}

pub fn bench(common: &Common, args: BenchArgs) -> Result<()> {
    let mut flags = Vec::new();
    if !args.sizes.is_empty() {
        flags.push(("bench.sizes", Value::Array(args.sizes.iter().map(|&s| int(s)).collect())));
    }
    if let Some(r) = args.runs {
        flags.push(("bench.runs", int(r)));
    }
    if let Some(w) = args.warmup {
        flags.push(("bench.warmup", int(w)));
    }
    let cfg = resolve(common, flags)?;
    let device = cfg.resolve_device();
    let model = match &args.checkpoint {
        Some(path) => load_model(path, None)?,
        None => Model::init(cfg.network.clone())?,
    };
    let records = cfg
        .bench
        .sizes
        .iter()
        .map(|&s| bench_inference(&model, (s, s), cfg.bench.warmup, cfg.bench.runs, cfg.seed(), &device))
        .collect::<rainsep_core::Result<Vec<_>>>()?;
    print!("{}", timing_table(&records));
    let json = serde_json::to_string_pretty(&records)?;
    match &common.out {
        Some(path) => fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

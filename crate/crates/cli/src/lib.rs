//! `uavsim` subcommands. Each one is a thin layer over the library crate;
//! all randomness comes from `--seed` (or the config's seed).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use uavsim::datasetio::{
    filter_small_test, partition_nested, size_histogram, BinCounting, DatasetEntry, DatasetError, DatasetManifest,
    SizeHistogram, DEFAULT_BIN_EDGES,
};
use uavsim::evalkit::{parse_detections, size_stratified_report, ApReport, GroundTruth, OutsideBin, SizeBins};
use uavsim::fusionnet::{
    alpha_sweep, evaluate, samples_from_frames, train, FusionCoefficients, FusionError, FusionMode, Sample, SweepConfig,
    ToyModel, TrainConfig, DEFAULT_SWEEP_VALUES,
};
use uavsim::scenario::{composite_image, run_scenario, Assets, ScenarioConfig, ScenarioError};
use uavsim::transferkit::{grid_table, run_grid, TransferData, TransferError, TransferMode, TransferPlan};

pub const DEFAULT_SEED: u64 = 0;

#[derive(Parser, Debug)]
#[command(name = "uavsim", version, about = "Simulated UAV detection datasets and experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOptions,
    #[command(subcommand)]
    pub command: Command,
}

/// Bin edges in px², e.g. `64,256,1024`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bins(pub [f64; 3]);

fn parse_bins(s: &str) -> Result<Bins, String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"))).collect::<Result<_, _>>()?;
    let edges: [f64; 3] = v.try_into().map_err(|v: Vec<f64>| format!("expected 3 edges, got {}", v.len()))?;
    if edges[0] > 0.0 && edges[0] < edges[1] && edges[1] < edges[2] {
        Ok(Bins(edges))
    } else {
        Err(format!("edges must be positive and increasing, got {edges:?}"))
    }
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOptions {
    /// Master seed; overrides any seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Write labels and manifest but no images.
    #[arg(long, global = true)]
    pub label_only: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub parallel: Option<u32>,
    /// Size-bin edges in px².
    #[arg(long, global = true, value_parser = parse_bins)]
    pub bins: Option<Bins>,
    #[arg(long, global = true, default_value_t = 0.5)]
    pub iou_threshold: f64,
    /// Number of nested dataset parts.
    #[arg(long, global = true, default_value_t = 3)]
    pub parts: usize,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

impl GlobalOptions {
    fn bin_edges(&self) -> [f64; 3] {
        self.bins.map_or(DEFAULT_BIN_EDGES, |b| b.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutsideBinArg {
    Ignore,
    Count,
}

impl From<OutsideBinArg> for OutsideBin {
    fn from(v: OutsideBinArg) -> Self {
        match v {
            OutsideBinArg::Ignore => OutsideBin::Ignore,
            OutsideBinArg::Count => OutsideBin::Count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Scratch,
    Tl1,
    Tl2,
}

#[derive(Args, Debug, Clone)]
pub struct TrainingArgs {
    /// Asset directory with backdrops/ and sprites/ (default: procedural).
    #[arg(long)]
    pub assets: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Learning-rate multiplier for the fusion coefficients.
    #[arg(long, default_value_t = 1.0)]
    pub alpha_lr_scale: f64,
}

impl TrainingArgs {
    fn config(&self, steps: usize) -> TrainConfig {
        TrainConfig { lr: self.lr, steps, alpha_lr_scale: self.alpha_lr_scale, frozen: Vec::new() }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a scenario and write images, labels and the manifest.
    Generate {
        config: PathBuf,
        #[arg(long)]
        assets: Option<PathBuf>,
    },
    /// Cut a manifest into nested random subsets.
    Split {
        manifest: PathBuf,
        /// Also write the ids of images whose boxes all fall in the small bins.
        #[arg(long)]
        small_only: bool,
    },
    /// Print the size histogram of a manifest.
    Stats {
        manifest: PathBuf,
        /// Count every box instead of each image's largest box.
        #[arg(long)]
        per_box: bool,
    },
    /// Size-stratified AP of a detection file against a manifest.
    Eval {
        detections: PathBuf,
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = OutsideBinArg::Ignore)]
        outside_bin: OutsideBinArg,
    },
    /// Train the toy detector on a simulated scenario.
    Train {
        config: PathBuf,
        #[command(flatten)]
        training: TrainingArgs,
        #[arg(long, value_enum, default_value_t = FusionArg::Adaptive)]
        fusion: FusionArg,
        /// Initial (or fixed) fusion coefficient.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        alpha: f64,
    },
    /// Fixed-α grid plus one adaptive run.
    Sweep {
        config: PathBuf,
        /// Evaluation scenario (default: the training config with the next seed).
        #[arg(long)]
        eval_config: Option<PathBuf>,
        #[command(flatten)]
        training: TrainingArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_VALUES.to_vec(), allow_negative_numbers = true)]
        values: Vec<f64>,
        #[arg(long)]
        no_adaptive: bool,
    },
    /// Pretrain on simulated data and finetune on real data.
    Transfer {
        #[arg(long)]
        sim: PathBuf,
        #[arg(long)]
        real: PathBuf,
        /// Real evaluation scenario (default: the real config with the next seed).
        #[arg(long)]
        real_eval: Option<PathBuf>,
        #[command(flatten)]
        training: TrainingArgs,
        #[arg(long, default_value_t = 40)]
        pretrain_steps: usize,
        #[arg(long, default_value_t = 20)]
        finetune_steps: usize,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ModeArg::Scratch, ModeArg::Tl1, ModeArg::Tl2])]
        modes: Vec<ModeArg>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Generate { .. } => "generate",
            Self::Split { .. } => "split",
            Self::Stats { .. } => "stats",
            Self::Eval { .. } => "eval",
            Self::Train { .. } => "train",
            Self::Sweep { .. } => "sweep",
            Self::Transfer { .. } => "transfer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Bad arguments, configs or input files.
    Validation,
    /// Failure while computing or writing results.
    Runtime,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{command}: {message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub command: &'static str,
    pub message: String,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 2,
            ErrorKind::Runtime => 1,
        }
    }

    /// One-line JSON object for stderr.
    pub fn machine_line(&self) -> String {
        serde_json::json!({ "error": { "command": self.command, "kind": self.kind, "message": self.message } }).to_string()
    }
}

/// Error for arguments rejected before a subcommand could be chosen.
pub fn usage_error(message: &str) -> CliError {
    let command = std::env::args().skip(1).find_map(|a| SUBCOMMANDS.iter().copied().find(|c| *c == a)).unwrap_or("uavsim");
    CliError { kind: ErrorKind::Validation, command, message: message.to_string() }
}

const SUBCOMMANDS: [&str; 7] = ["generate", "split", "stats", "eval", "train", "sweep", "transfer"];

/// Attaches the subcommand name and classifies an error.
struct Ctx(&'static str);

impl Ctx {
    fn validation(&self, message: impl std::fmt::Display) -> CliError {
        CliError { kind: ErrorKind::Validation, command: self.0, message: message.to_string() }
    }

    fn runtime(&self, message: impl std::fmt::Display) -> CliError {
        CliError { kind: ErrorKind::Runtime, command: self.0, message: message.to_string() }
    }

    fn scenario(&self, e: ScenarioError) -> CliError {
        match e {
            ScenarioError::InvalidConfig(_) | ScenarioError::Parse(_) | ScenarioError::Io(_) | ScenarioError::AssetNotFound { .. } => {
                self.validation(e)
            }
            _ => self.runtime(e),
        }
    }

    fn dataset_read(&self, e: DatasetError) -> CliError {
        self.validation(e)
    }

    fn fusion(&self, e: FusionError) -> CliError {
        match e {
            FusionError::Invalid(_) => self.validation(e),
            _ => self.runtime(e),
        }
    }

    fn transfer(&self, e: TransferError) -> CliError {
        match e {
            TransferError::Invalid(_) => self.validation(e),
            TransferError::Stage { .. } => self.runtime(e),
        }
    }

    fn write(&self, path: &Path, contents: &str) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| self.runtime(format!("{}: {e}", dir.display())))?;
        }
        fs::write(path, contents).map_err(|e| self.runtime(format!("{}: {e}", path.display())))
    }

    fn write_json(&self, path: &Path, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| self.runtime(e))?;
        text.push('\n');
        self.write(path, &text)
    }
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let ctx = Ctx(cli.command.name());
    if let Some(n) = g.parallel {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global();
    }
    if !(g.iou_threshold > 0.0 && g.iou_threshold <= 1.0) {
        return Err(ctx.validation(format!("--iou-threshold must lie in (0, 1], got {}", g.iou_threshold)));
    }
    match &cli.command {
        Command::Generate { config, assets } => cmd_generate(&ctx, g, config, assets.as_deref()),
        Command::Split { manifest, small_only } => cmd_split(&ctx, g, manifest, *small_only),
        Command::Stats { manifest, per_box } => cmd_stats(&ctx, g, manifest, *per_box),
        Command::Eval { detections, manifest, outside_bin } => cmd_eval(&ctx, g, detections, manifest, (*outside_bin).into()),
        Command::Train { config, training, fusion, alpha } => cmd_train(&ctx, g, config, training, *fusion, *alpha),
        Command::Sweep { config, eval_config, training, values, no_adaptive } => {
            cmd_sweep(&ctx, g, config, eval_config.as_deref(), training, values, !*no_adaptive)
        }
        Command::Transfer { sim, real, real_eval, training, pretrain_steps, finetune_steps, modes } => cmd_transfer(
            &ctx,
            g,
            TransferInputs { sim, real, real_eval: real_eval.as_deref() },
            training,
            (*pretrain_steps, *finetune_steps),
            modes,
        ),
    }
}

fn load_config(ctx: &Ctx, path: &Path, seed: Option<u64>, offset: u64) -> Result<ScenarioConfig, CliError> {
    let mut cfg = ScenarioConfig::from_path(path).map_err(|e| ctx.scenario(e))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.seed = cfg.seed.wrapping_add(offset);
    Ok(cfg)
}

fn load_assets(ctx: &Ctx, dir: Option<&Path>) -> Result<Assets, CliError> {
    match dir {
        Some(d) if !d.is_dir() => Err(ctx.validation(format!("asset directory {} does not exist", d.display()))),
        Some(d) => Assets::load_dir(d).map_err(|e| ctx.scenario(e)),
        None => Ok(Assets::procedural(512)),
    }
}

fn print_histogram(name: &str, hist: &SizeHistogram) {
    println!("{}", SizeHistogram::table_header());
    println!("{}", hist.table_row(name));
}

fn cmd_generate(ctx: &Ctx, g: &GlobalOptions, config: &Path, assets: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(ctx, config, g.seed, 0)?;
    let frames = run_scenario(&cfg).map_err(|e| ctx.scenario(e))?;
    log::info!("simulated {} frames", frames.len());
    let image_paths: Vec<Option<String>> = if g.label_only {
        vec![None; frames.len()]
    } else {
        let assets = load_assets(ctx, assets)?;
        fs::create_dir_all(g.out.join("images")).map_err(|e| ctx.runtime(format!("{}: {e}", g.out.display())))?;
        frames
            .par_iter()
            .map(|f| {
                let img = composite_image(f, &assets).map_err(|e| ctx.scenario(e))?;
                let rel = format!("images/{}.png", f.id);
                let path = g.out.join(&rel);
                img.save(&path).map_err(|e| ctx.runtime(format!("{}: {e}", path.display())))?;
                Ok(Some(rel))
            })
            .collect::<Result<_, CliError>>()?
    };
    let entries = frames.iter().zip(image_paths).map(|(f, p)| DatasetEntry::from_frame(f, p)).collect();
    let manifest = DatasetManifest::new(entries, g.bin_edges()).map_err(|e| ctx.validation(e))?;
    manifest.write_label_files(&g.out).map_err(|e| ctx.runtime(e))?;
    manifest.write(&g.out.join("manifest.json")).map_err(|e| ctx.runtime(e))?;
    print_histogram(cfg.scene_id.as_str(), &size_histogram(&manifest, BinCounting::LargestBox));
    Ok(())
}

fn read_manifest(ctx: &Ctx, path: &Path, g: &GlobalOptions) -> Result<DatasetManifest, CliError> {
    let m = DatasetManifest::read(path).map_err(|e| ctx.dataset_read(e))?;
    match g.bins {
        Some(b) => DatasetManifest::new(m.entries().to_vec(), b.0).map_err(|e| ctx.validation(e)),
        None => Ok(m),
    }
}

fn cmd_split(ctx: &Ctx, g: &GlobalOptions, manifest: &Path, small_only: bool) -> Result<(), CliError> {
    let m = read_manifest(ctx, manifest, g)?;
    let part = partition_nested(&m, g.parts, g.seed.unwrap_or(DEFAULT_SEED)).map_err(|e| ctx.validation(e))?;
    let paths = part.write_split_files(&g.out, "RD").map_err(|e| ctx.runtime(e))?;
    for (k, p) in paths.iter().enumerate() {
        println!("RD{}\t{}\t{}", k + 1, part.subset(k).len(), p.display());
    }
    if small_only {
        let small = filter_small_test(&m);
        let mut text = String::new();
        for id in small.ids() {
            text.push_str(&id);
            text.push('\n');
        }
        let path = g.out.join("small_only.split.txt");
        ctx.write(&path, &text)?;
        println!("small_only\t{}\t{}", small.len(), path.display());
    }
    Ok(())
}

fn cmd_stats(ctx: &Ctx, g: &GlobalOptions, manifest: &Path, per_box: bool) -> Result<(), CliError> {
    let m = read_manifest(ctx, manifest, g)?;
    let counting = if per_box { BinCounting::PerBox } else { BinCounting::LargestBox };
    let name = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    print_histogram(name, &size_histogram(&m, counting));
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalDocument {
    format: &'static str,
    version: u32,
    iou_threshold: f64,
    outside_bin: OutsideBin,
    bin_edges: [f64; 3],
    images: usize,
    ground_truths: usize,
    detections: usize,
    report: ApReport<f64>,
}

fn cmd_eval(ctx: &Ctx, g: &GlobalOptions, detections: &Path, manifest: &Path, outside: OutsideBin) -> Result<(), CliError> {
    let m = read_manifest(ctx, manifest, g)?;
    let text = fs::read_to_string(detections).map_err(|e| ctx.validation(format!("{}: {e}", detections.display())))?;
    let dets = parse_detections::<f64>(&text).map_err(|e| ctx.validation(format!("{}: {e}", detections.display())))?;
    let gts: GroundTruth<f64> = m.entries().iter().map(|e| (e.id.clone(), e.boxes.iter().map(|b| b.bbox).collect())).collect();
    if let Some(d) = dets.iter().find(|d| !gts.contains_key(&d.image_id)) {
        return Err(ctx.validation(format!("detection refers to unknown image id '{}'", d.image_id)));
    }
    let bins = SizeBins::new(m.bin_edges()).map_err(|e| ctx.validation(e))?;
    let report = size_stratified_report(&dets, &gts, &bins, g.iou_threshold, outside);
    print!("{}", ApReport::table(&[("detections".to_string(), report)]));
    let doc = EvalDocument {
        format: "uavsim-eval",
        version: 1,
        iou_threshold: g.iou_threshold,
        outside_bin: outside,
        bin_edges: m.bin_edges(),
        images: gts.len(),
        ground_truths: gts.values().map(Vec::len).sum(),
        detections: dets.len(),
        report,
    };
    ctx.write_json(&g.out.join("eval_report.json"), &doc)
}

fn load_samples(ctx: &Ctx, config: &Path, seed: Option<u64>, offset: u64, assets: &Assets) -> Result<Vec<Sample<f64>>, CliError> {
    let cfg = load_config(ctx, config, seed, offset)?;
    let frames = run_scenario(&cfg).map_err(|e| ctx.scenario(e))?;
    samples_from_frames(&frames, assets).map_err(|e| ctx.fusion(e))
}

#[derive(Debug, Serialize)]
struct TrainDocument {
    seed: u64,
    fusion: FusionMode,
    config: TrainConfig,
    alpha45: f64,
    alpha34: f64,
    losses: Vec<f64>,
    final_loss: f64,
    report: ApReport<f64>,
}

fn cmd_train(
    ctx: &Ctx,
    g: &GlobalOptions,
    config: &Path,
    training: &TrainingArgs,
    fusion: FusionArg,
    alpha: f64,
) -> Result<(), CliError> {
    let seed = g.seed.unwrap_or(DEFAULT_SEED);
    let assets = load_assets(ctx, training.assets.as_deref())?;
    let samples = load_samples(ctx, config, g.seed, 0, &assets)?;
    let coefficients = match fusion {
        FusionArg::Fixed => FusionCoefficients::fixed(alpha),
        FusionArg::Adaptive => FusionCoefficients::adaptive(alpha),
    };
    let mut model = ToyModel::new(seed, coefficients);
    let cfg = training.config(training.steps);
    let log = train(&mut model, &samples, &cfg).map_err(|e| ctx.fusion(e))?;
    let bins = SizeBins::new(g.bin_edges()).map_err(|e| ctx.validation(e))?;
    let report = evaluate(&model, &samples, &bins, g.iou_threshold, OutsideBin::Ignore).map_err(|e| ctx.fusion(e))?;
    fs::create_dir_all(&g.out).map_err(|e| ctx.runtime(format!("{}: {e}", g.out.display())))?;
    model.save(&g.out.join("model.json")).map_err(|e| ctx.runtime(e))?;
    println!("final loss {:.6}  alpha45 {:.4}  alpha34 {:.4}", log.final_loss, model.fusion.alpha45, model.fusion.alpha34);
    print!("{}", ApReport::table(&[("train".to_string(), report)]));
    let doc = TrainDocument {
        seed,
        fusion: coefficients.mode,
        config: cfg,
        alpha45: model.fusion.alpha45,
        alpha34: model.fusion.alpha34,
        losses: log.losses,
        final_loss: log.final_loss,
        report,
    };
    ctx.write_json(&g.out.join("train_log.json"), &doc)
}

fn cmd_sweep(
    ctx: &Ctx,
    g: &GlobalOptions,
    config: &Path,
    eval_config: Option<&Path>,
    training: &TrainingArgs,
    values: &[f64],
    adaptive: bool,
) -> Result<(), CliError> {
    let assets = load_assets(ctx, training.assets.as_deref())?;
    let train_set = load_samples(ctx, config, g.seed, 0, &assets)?;
    let eval_set = match eval_config {
        Some(p) => load_samples(ctx, p, g.seed, 0, &assets)?,
        None => load_samples(ctx, config, g.seed, 1, &assets)?,
    };
    let cfg = SweepConfig {
        seed: g.seed.unwrap_or(DEFAULT_SEED),
        train: training.config(training.steps),
        adaptive,
        iou_threshold: g.iou_threshold,
        outside_bin: OutsideBin::Ignore,
        bin_edges: g.bin_edges(),
    };
    let report = alpha_sweep(values, &train_set, &eval_set, &cfg).map_err(|e| ctx.fusion(e))?;
    print!("{}", report.to_table());
    ctx.write(&g.out.join("sweep.txt"), &report.to_table())?;
    ctx.write_json(&g.out.join("sweep.json"), &report)
}

struct TransferInputs<'a> {
    sim: &'a Path,
    real: &'a Path,
    real_eval: Option<&'a Path>,
}

fn cmd_transfer(
    ctx: &Ctx,
    g: &GlobalOptions,
    inputs: TransferInputs<'_>,
    training: &TrainingArgs,
    (pretrain_steps, finetune_steps): (usize, usize),
    modes: &[ModeArg],
) -> Result<(), CliError> {
    if modes.is_empty() {
        return Err(ctx.validation("--modes must name at least one mode"));
    }
    let assets = load_assets(ctx, training.assets.as_deref())?;
    let sim = load_samples(ctx, inputs.sim, g.seed, 0, &assets)?;
    let real = load_samples(ctx, inputs.real, g.seed, 0, &assets)?;
    let real_eval = match inputs.real_eval {
        Some(p) => load_samples(ctx, p, g.seed, 0, &assets)?,
        None => load_samples(ctx, inputs.real, g.seed, 1, &assets)?,
    };
    let seed = g.seed.unwrap_or(DEFAULT_SEED);
    let plans: Vec<TransferPlan> = modes
        .iter()
        .map(|m| {
            let mode = match m {
                ModeArg::Scratch => TransferMode::Scratch,
                ModeArg::Tl1 => TransferMode::Tl1,
                ModeArg::Tl2 => TransferMode::Tl2,
            };
            let mut p = TransferPlan::new(mode, seed, training.config(pretrain_steps), training.config(finetune_steps));
            p.iou_threshold = g.iou_threshold;
            p.bin_edges = g.bin_edges();
            p
        })
        .collect();
    let data = TransferData { sim: &sim, real_train: &real, real_eval: &real_eval };
    let reports = run_grid(&plans, &data).map_err(|e| ctx.transfer(e))?;
    for r in &reports {
        let dir = g.out.join("transfer").join(&r.plan.label);
        for c in &r.checkpoints {
            ctx.write_json(&dir.join(format!("{}.json", c.stage)), &c.checkpoint)?;
        }
        ctx.write_json(&dir.join("report.json"), r)?;
    }
    let table = grid_table(&reports);
    print!("{table}");
    ctx.write(&g.out.join("transfer").join("grid.txt"), &table)
}

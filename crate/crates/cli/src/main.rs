//! `clvae`: train, infer, change-point, baselines, evaluation and synthetic
//! scenes from one entrypoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use clvae_core::baselines::{run_baseline, BaselineMethod, BaselineOptions, ChannelPolicy};
use clvae_core::changepoint::{detect_change_point, ThresholdMode};
use clvae_core::inference::{binarize, change_map, export_change_products, ProductFormat, DEFAULT_BATCH_SIZE};
use clvae_core::metrics::{aggregate, score, write_table};
use clvae_core::model::{load_checkpoint, save_checkpoint, Clvae};
use clvae_core::patching::stack_pre_series;
use clvae_core::raster_io::{
    load_mask, load_tile, read_raster, save_mask, save_tile, BackscatterEncoding, ChannelMapping,
};
use clvae_core::synthdata::{generate, SceneSpec};
use clvae_core::training::{train, write_history_file, ClvaeTrainer, PairSampler, TrainConfig};
use clvae_core::{DivergenceKind, SarTile};

#[derive(Debug, Parser)]
#[command(name = "clvae", version, about = "Unsupervised SAR change detection with a contrastive ConvLSTM VAE")]
struct Cli {
    /// TOML configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for inference (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Single-threaded, bit-reproducible run.
    #[arg(long, global = true)]
    deterministic: bool,
    /// More logging (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on pre-event time series.
    Train(TrainArgs),
    /// Change map between a pre-event series and a post-event image.
    Infer(InferArgs),
    /// First date in a window whose change against a reference is significant.
    Changepoint(ChangepointArgs),
    /// Classical log-ratio or CVA change detection.
    Baseline(BaselineArgs),
    /// Score a binary prediction against ground truth.
    Evaluate(EvaluateArgs),
    /// Write a synthetic flood scene.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Encoding {
    Db,
    Linear,
    Normalized,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// How input rasters store backscatter.
    #[arg(long, value_enum, default_value = "db")]
    encoding: Encoding,
    /// Band index of VV.
    #[arg(long, default_value_t = 0)]
    vv_band: usize,
    /// Band index of VH.
    #[arg(long, default_value_t = 1)]
    vh_band: usize,
    /// Expected band count of every input raster.
    #[arg(long, default_value_t = 2)]
    bands: usize,
}

impl InputArgs {
    fn mapping(&self) -> ChannelMapping {
        ChannelMapping {
            vv_band: self.vv_band,
            vh_band: self.vh_band,
            expected_bands: self.bands,
            encoding: match self.encoding {
                Encoding::Db => BackscatterEncoding::Decibel,
                Encoding::Linear => BackscatterEncoding::Linear,
                Encoding::Normalized => BackscatterEncoding::Normalized,
            },
            date: None,
        }
    }

    fn load(&self, path: &Path) -> anyhow::Result<SarTile> {
        load_tile(path, &self.mapping()).with_context(|| format!("loading {}", path.display()))
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// One pre-event series as comma-separated rasters; repeat for more sites.
    #[arg(long, required = true, value_delimiter = ',', num_args = 1.., action = clap::ArgAction::Append)]
    series: Vec<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// CSV loss history.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Pre-event rasters in acquisition order, comma-separated.
    #[arg(long, required = true, value_delimiter = ',')]
    pre: Vec<PathBuf>,
    #[arg(long)]
    post: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<DivergenceKind>,
    /// Binarization threshold (default depends on the divergence).
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output format of the rasters.
    #[arg(long, value_enum, default_value = "tif")]
    format: Format,
    /// Existing output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Tif,
    Clvr,
}

impl From<Format> for ProductFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Tif => ProductFormat::GeoTiff,
            Format::Clvr => ProductFormat::Fixture,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Median,
    Fixed,
}

#[derive(Debug, Args)]
struct ChangepointArgs {
    #[arg(long)]
    model: PathBuf,
    /// Reference image predating the window.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Directory with the window's rasters.
    #[arg(long)]
    window: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Percentage threshold in fixed mode.
    #[arg(long)]
    threshold: Option<f64>,
    /// Per-pixel divergence threshold for each change map.
    #[arg(long, allow_hyphen_values = true)]
    map_threshold: Option<f64>,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<DivergenceKind>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long, value_parser = parse_method)]
    method: BaselineMethod,
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    post: PathBuf,
    #[arg(long, default_value_t = clvae_core::baselines::DEFAULT_LEE_WINDOW)]
    lee_window: usize,
    #[arg(long, default_value_t = clvae_core::baselines::DEFAULT_BINS)]
    bins: usize,
    /// vv, vh or mean_abs.
    #[arg(long, default_value = "mean_abs", value_parser = parse_policy)]
    channel_policy: ChannelPolicy,
    #[arg(long, value_enum, default_value = "tif")]
    format: Format,
    /// Existing output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Binary prediction rasters (non-zero = change), comma-separated.
    #[arg(long, required = true, value_delimiter = ',')]
    pred: Vec<PathBuf>,
    /// Ground-truth rasters in the same order (1 change, 0 none, -1 ignored).
    #[arg(long, required = true, value_delimiter = ',')]
    gt: Vec<PathBuf>,
    /// Site names for the table, comma-separated.
    #[arg(long, value_delimiter = ',')]
    sites: Vec<String>,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV table.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene specification (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> Result<DivergenceKind, String> {
    s.parse().map_err(|e: clvae_core::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<BaselineMethod, String> {
    s.parse().map_err(|e: clvae_core::Error| e.to_string())
}

fn parse_policy(s: &str) -> Result<ChannelPolicy, String> {
    s.parse().map_err(|e: clvae_core::Error| e.to_string())
}

/// Settings shared by inference-type commands, readable from the
/// configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct InferenceSettings {
    kind: DivergenceKind,
    threshold: Option<f64>,
    batch_size: usize,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings {
            kind: DivergenceKind::Cosd,
            threshold: None,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ChangepointSettings {
    mode: Mode,
    threshold: f64,
}

impl Default for ChangepointSettings {
    fn default() -> Self {
        ChangepointSettings {
            mode: Mode::Fixed,
            threshold: clvae_core::changepoint::DEFAULT_FIXED_THRESHOLD,
        }
    }
}

/// The whole configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    train: TrainConfig,
    inference: InferenceSettings,
    changepoint: ChangepointSettings,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn log_resolved<T: Serialize>(what: &str, value: &T) {
    match toml::to_string(value) {
        Ok(text) => log::info!("resolved {what} configuration:\n{text}"),
        Err(_) => log::info!("resolved {what} configuration: {}", serde_json::to_string(value).unwrap_or_default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: TrainArgs, mut cfg: FileConfig) -> anyhow::Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.epochs {
        t.schedule.max_epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.schedule.batch_size = v;
    }
    if let Some(v) = args.pairs_per_epoch {
        t.schedule.pairs_per_epoch = v;
    }
    if let Some(v) = args.learning_rate {
        t.schedule.initial_lr = v;
    }
    if let Some(v) = args.latent_dim {
        t.model.latent_dim = v;
    }
    if let Some(v) = args.patch_size {
        t.model.patch_size = v;
    }
    t.validate()?;
    log_resolved("training", &cfg.train);
    log::info!("seed {}", cfg.train.seed);
    let t = &cfg.train;
    let steps = t.model.timesteps;
    if args.series.len() % steps != 0 {
        bail!(
            "{} series rasters given; each series needs exactly {steps} (the model's time steps)",
            args.series.len()
        );
    }
    let mut stacks = Vec::new();
    for group in args.series.chunks(steps) {
        let tiles = group.iter().map(|p| args.input.load(p)).collect::<anyhow::Result<Vec<_>>>()?;
        stacks.push(stack_pre_series(&tiles, steps)?);
    }
    let model = Clvae::new(t.model.clone(), t.seed)?;
    println!("trainable parameters: {}", model.parameter_count());
    log::info!("non-trainable parameters: {}", model.non_trainable_count());
    let sampler = PairSampler::new(&stacks, t.model.patch_size, t.augment.clone())?;
    let mut trainer = ClvaeTrainer::new(model, t.loss.clone())?;
    // the checkpoint is rewritten after every epoch so an interrupted run keeps its progress
    let report = train(&mut trainer, &sampler, &t.schedule, t.seed, |record, tr| {
        let metadata = serde_json::json!({ "train_config": t, "epoch": record.epoch, "loss": record });
        save_checkpoint(&tr.model, &args.out, metadata)
    })?;
    if let Some(path) = &args.history {
        write_history_file(path, &report.history)?;
    }
    let last = report.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs{}; final loss {:.6} (recon {:.6}); checkpoint {}",
        report.history.len(),
        if report.stopped_early { " (stopped early)" } else { "" },
        last.total,
        last.recon,
        args.out.display()
    );
    Ok(())
}

fn inference_settings(
    cfg: &FileConfig,
    kind: Option<DivergenceKind>,
    threshold: Option<f64>,
    batch: Option<usize>,
) -> InferenceSettings {
    let mut s = cfg.inference.clone();
    if let Some(k) = kind {
        s.kind = k;
        if threshold.is_none() {
            s.threshold = None;
        }
    }
    if threshold.is_some() {
        s.threshold = threshold;
    }
    if let Some(b) = batch {
        s.batch_size = b;
    }
    s.threshold = Some(s.threshold.unwrap_or(s.kind.default_threshold()));
    s
}

fn cmd_infer(args: InferArgs, cfg: FileConfig) -> anyhow::Result<()> {
    let s = inference_settings(&cfg, args.kind, args.threshold, args.batch_size);
    log_resolved("inference", &s);
    let (model, _) = load_checkpoint(&args.model, None)?;
    log::info!("model seed {}", model.seed());
    let pre = args.pre.iter().map(|p| args.input.load(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let post = args.input.load(&args.post)?;
    let map = change_map(&pre, &post, &model, s.kind, s.batch_size)?;
    let mask = binarize(&map, s.threshold.expect("resolved"));
    let out = export_change_products(&map, &mask, post.georef.as_ref(), &args.out, args.format.into())?;
    println!(
        "{} of {} pixels changed; map {}, mask {}",
        mask.changed_pixels(),
        mask.mask.len(),
        out.change_map.display(),
        out.mask_png.display()
    );
    Ok(())
}

fn cmd_changepoint(args: ChangepointArgs, cfg: FileConfig) -> anyhow::Result<()> {
    let s = inference_settings(&cfg, args.kind, args.map_threshold, args.batch_size);
    let mut cp = cfg.changepoint.clone();
    if let Some(m) = args.mode {
        cp.mode = m;
    }
    if let Some(t) = args.threshold {
        cp.threshold = t;
    }
    log_resolved("inference", &s);
    log_resolved("change-point", &cp);
    let (model, _) = load_checkpoint(&args.model, None)?;
    let reference = args.input.load(&args.reference)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&args.window)
        .with_context(|| format!("reading {}", args.window.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut window = files.iter().map(|p| args.input.load(p)).collect::<anyhow::Result<Vec<_>>>()?;
    window.sort_by_key(|t| t.acquisition_date);
    let mode = match cp.mode {
        Mode::Median => ThresholdMode::Median,
        Mode::Fixed => ThresholdMode::Fixed(cp.threshold),
    };
    let result = detect_change_point(
        &reference,
        &window,
        &model,
        s.kind,
        s.threshold.expect("resolved"),
        mode,
        s.batch_size,
    )?;
    for r in &result.records {
        println!("{}  {:7.3}%", r.date, r.percentage_change);
    }
    match result.change_point {
        Some(d) => println!("change point: {d} (threshold {:.3}%)", result.threshold_used),
        None => println!("no change point (threshold {:.3}%)", result.threshold_used),
    }
    write_json(&args.out, &result)
}

fn cmd_baseline(args: BaselineArgs) -> anyhow::Result<()> {
    let opts = BaselineOptions {
        lee_window: args.lee_window,
        bins: args.bins,
        channel_policy: args.channel_policy,
    };
    log::info!("resolved baseline configuration: {:?} {opts:?}", args.method);
    let pre = args.input.load(&args.pre)?;
    let post = args.input.load(&args.post)?;
    let out = run_baseline(args.method, &pre, &post, &opts)?;
    let map = clvae_core::ChangeMap {
        values: out.map,
        kind: DivergenceKind::Ed,
    };
    let mask = clvae_core::BinaryChangeMap {
        mask: out.mask,
        threshold: out.threshold.value,
    };
    let files = export_change_products(&map, &mask, post.georef.as_ref(), &args.out, args.format.into())?;
    if out.threshold.degenerate {
        log::warn!("histogram is degenerate; nothing above threshold");
    }
    println!(
        "threshold {:.6}; {} of {} pixels changed; mask {}",
        out.threshold.value,
        mask.changed_pixels(),
        mask.mask.len(),
        files.mask_png.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    if args.pred.len() != args.gt.len() {
        bail!("{} predictions but {} ground-truth masks", args.pred.len(), args.gt.len());
    }
    let mut reports = Vec::new();
    for (p, g) in args.pred.iter().zip(&args.gt) {
        let raster = read_raster(p)?;
        if raster.band_count() != 1 {
            bail!("{} has {} bands, expected 1", p.display(), raster.band_count());
        }
        let pred = raster.band(0).mapv(|v| v != 0.0);
        let gt = load_mask(g)?;
        let r = score(&pred, &gt).with_context(|| format!("scoring {}", p.display()))?;
        println!(
            "{}: P {:.4} R {:.4} F1 {:.4} IoU {:.4}",
            p.display(),
            r.precision,
            r.recall,
            r.f1,
            r.iou
        );
        reports.push(r);
    }
    let agg = aggregate(&reports)?;
    if reports.len() > 1 {
        println!(
            "average: P {:.4} R {:.4} F1 {:.4} IoU {:.4}",
            agg.precision, agg.recall, agg.f1, agg.iou
        );
    }
    if let Some(table) = &args.table {
        let sites: Vec<String> = if args.sites.len() == reports.len() {
            args.sites.clone()
        } else {
            args.pred
                .iter()
                .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
                .collect()
        };
        let file = fs::File::create(table).with_context(|| format!("writing {}", table.display()))?;
        let rows: Vec<_> = sites.into_iter().zip(reports.iter().cloned()).collect();
        write_table(file, &rows)?;
    }
    write_json(&args.out, &agg)
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let spec: SceneSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.spec.display()))?;
    log::info!("resolved scene: {}", serde_json::to_string(&spec)?);
    log::info!("seed {}", spec.seed);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let scene = generate(&spec)?;
    for acq in &scene {
        let date = acq.tile.acquisition_date;
        save_tile(&acq.tile, &args.out.join(format!("tile_{date}.clvr")))?;
        save_mask(&acq.mask, &args.out.join(format!("gt_{date}.clvr")))?;
    }
    println!("wrote {} acquisitions to {}", scene.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.workers };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    log::info!(
        "workers: {}, deterministic: {}",
        rayon::current_num_threads(),
        cli.deterministic
    );
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Train(a) => cmd_train(a, cfg),
        Command::Infer(a) => cmd_infer(a, cfg),
        Command::Changepoint(a) => cmd_changepoint(a, cfg),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

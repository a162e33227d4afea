//! `mspe` command line: data generation, pretraining, multi-scale
//! fine-tuning, evaluation sweeps and diagnostics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mspe::checkpoint::{load_checkpoint, write_atomic, DType, ModelCheckpoint};
use mspe::config::{parse_range, parse_resolution, parse_resolution_list, KeyValues};
use mspe::data::{
    dataset_to_idx, load_idx_dataset, save_idx, ResolutionSource, SyntheticShapes,
    SyntheticShapesSpec,
};
use mspe::eval::{
    checkpoint_id, cosine_similarity_diag, parse_modes, sweep, EvalMetadata, ModelState, SweepSpec,
};
use mspe::patch_embed::PatchKernelBank;
use mspe::resize::{build_resize_operator, PiResize, ResizeMethod};
use mspe::train::{init_model, mspe_train, pretrain, Precision, TrainConfig};
use mspe::vit::ViTConfig;
use mspe::{Error, Real, Resolution};

/// Offset between a run seed and the default seed of its held-out data.
const EVAL_DATA_SEED_OFFSET: u64 = 1000;

#[derive(Parser)]
#[command(name = "mspe", version, about = "Multi-scale patch embedding for a tiny ViT")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset to IDX files.
    GenData(GenDataArgs),
    /// Train the full model at the base resolution.
    Pretrain(PretrainArgs),
    /// Fine-tune a kernel bank on top of a frozen pretrained model.
    MspeTrain(MspeTrainArgs),
    /// Accuracy sweep over resolutions and embedding modes.
    Eval(EvalArgs),
    /// Cosine similarity of embeddings between a low and a high resolution.
    DiagSim(DiagArgs),
    /// Print a resize or PI-resize matrix as CSV.
    InspectResize(InspectArgs),
}

/// Command-line values, in the same `key = value` form as config files.
trait Flags {
    fn collect(&self, kv: &mut KeyValues);
}

macro_rules! flags {
    ($ty:ty { $($field:ident => $key:literal),* $(,)? }) => {
        impl Flags for $ty {
            fn collect(&self, kv: &mut KeyValues) {
                $(if let Some(v) = &self.$field { kv.set($key, v.to_string()); })*
            }
        }
    };
}

#[derive(Args)]
struct ConfigArg {
    /// Plain-text `key = value` file; command-line flags take precedence.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// IDX image file (synthetic shapes are used when absent).
    #[arg(long, value_name = "PATH", requires = "labels")]
    images: Option<PathBuf>,
    /// IDX label file matching --images.
    #[arg(long, value_name = "PATH", requires = "images")]
    labels: Option<PathBuf>,
    /// Synthetic images per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Number of synthetic shape classes (1 to 4).
    #[arg(long)]
    classes: Option<usize>,
    /// Seed of the synthetic data (defaults to --seed, plus 1000 for eval data).
    #[arg(long)]
    data_seed: Option<u64>,
}

flags!(DataArgs { per_class => "per_class", classes => "classes", data_seed => "data_seed" });

#[derive(Args)]
struct OptimArgs {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Base resolution, e.g. 32 or 32x32.
    #[arg(long)]
    base_resolution: Option<String>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Write the loss history CSV here.
    #[arg(long, value_name = "PATH")]
    history: Option<PathBuf>,
}

flags!(OptimArgs {
    learning_rate => "learning_rate",
    momentum => "momentum",
    weight_decay => "weight_decay",
    batch_size => "batch_size",
    epochs => "epochs",
    base_resolution => "base_resolution",
    precision => "precision",
});

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output prefix; writes PREFIX-images.idx and PREFIX-labels.idx.
    #[arg(long, value_name = "PREFIX")]
    out: PathBuf,
    /// Image size, e.g. 32 or 24x48.
    #[arg(long)]
    resolution: Option<String>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

flags!(GenDataArgs { resolution => "resolution", per_class => "per_class", classes => "classes", seed => "seed" });

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: u64,
    /// Output checkpoint.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Training accuracy must beat chance by this many points.
    #[arg(long)]
    accuracy_margin: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_ratio: Option<usize>,
    /// Tokens per side.
    #[arg(long)]
    grid: Option<usize>,
}

flags!(PretrainArgs {
    accuracy_margin => "accuracy_margin",
    dim => "dim",
    depth => "depth",
    heads => "heads",
    mlp_ratio => "mlp_ratio",
    grid => "grid",
});

#[derive(Args)]
struct MspeTrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: u64,
    /// Pretrained input checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Output checkpoint, rewritten at every epoch boundary.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Weight of the base-resolution loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of kernels in the bank.
    #[arg(long)]
    kernels: Option<usize>,
    /// Comma-separated training resolutions.
    #[arg(long)]
    resolutions: Option<String>,
    /// Kernel resize method: bilinear, nearest or bicubic.
    #[arg(long)]
    method: Option<String>,
}

flags!(MspeTrainArgs {
    lambda => "lambda",
    kernels => "kernels",
    resolutions => "resolutions",
    method => "method",
});

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// CSV report path (stdout when absent); metadata goes to PATH.meta.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Comma-separated modes: vanilla, flexivit, mspe.
    #[arg(long)]
    modes: Option<String>,
    /// Square sizes as start:end:step.
    #[arg(long, value_name = "A:B:STEP")]
    square: Option<String>,
    /// Fixed height for an aspect-ratio sweep; use with --widths.
    #[arg(long, requires = "widths")]
    fixed_height: Option<usize>,
    /// Widths as start:end:step.
    #[arg(long, value_name = "A:B:STEP", requires = "fixed_height")]
    widths: Option<String>,
    /// Explicit comma-separated resolutions.
    #[arg(long)]
    resolutions: Option<String>,
    /// Kernel resize method for the flexivit mode.
    #[arg(long)]
    method: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

flags!(EvalArgs {
    modes => "modes",
    square => "square",
    fixed_height => "fixed_height",
    widths => "widths",
    resolutions => "resolutions",
    method => "method",
});

#[derive(Args)]
struct DiagArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Directory for one similarity_<mode>.csv per mode.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Low resolution, e.g. 16.
    #[arg(long)]
    low: Option<String>,
    /// High resolution, e.g. 32.
    #[arg(long)]
    high: Option<String>,
    /// Number of images compared.
    #[arg(long)]
    samples: Option<usize>,
    /// Comma-separated modes.
    #[arg(long)]
    modes: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

flags!(DiagArgs { low => "low", high => "high", samples => "samples", modes => "modes", method => "method" });

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Source size, e.g. 2 or 2x3.
    #[arg(long)]
    src: Option<String>,
    /// Destination size.
    #[arg(long)]
    dst: Option<String>,
    /// bilinear, nearest or bicubic.
    #[arg(long)]
    method: Option<String>,
    /// rows, cols or full for the image resize; pi-rows, pi-cols or pi-full
    /// for the kernel PI-resize.
    #[arg(long)]
    matrix: Option<String>,
    /// Output CSV (stdout when absent).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

flags!(InspectArgs { src => "src", dst => "dst", method => "method", matrix => "matrix" });

/// Errors that map to exit code 2.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Config file values overlaid by flag values.
fn merged(config: &ConfigArg, flag_sets: &[&dyn Flags]) -> CliResult<KeyValues> {
    let mut kv = match &config.config {
        Some(p) if !p.exists() => {
            return Err(Failure::Usage(format!("config file not found: {}", p.display())))
        }
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    let mut flags = KeyValues::new();
    for f in flag_sets {
        f.collect(&mut flags);
    }
    kv.overlay(&flags);
    Ok(kv)
}

fn value<T>(kv: &KeyValues, key: &str, default: T) -> CliResult<T>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    Ok(kv.parsed(key)?.unwrap_or(default))
}

fn resolution(kv: &KeyValues, key: &str, default: Resolution) -> CliResult<Resolution> {
    Ok(match kv.get(key) {
        Some(v) => parse_resolution(v)?,
        None => default,
    })
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

/// IDX files when given, otherwise synthetic shapes.
fn data_source(data: &DataArgs, kv: &KeyValues, default_seed: u64, default_per_class: usize) -> CliResult<Box<dyn ResolutionSource>> {
    if let (Some(images), Some(labels)) = (&data.images, &data.labels) {
        require_file(images, "IDX image file")?;
        require_file(labels, "IDX label file")?;
        return Ok(Box::new(load_idx_dataset(images, labels)?));
    }
    let spec = SyntheticShapesSpec {
        num_classes: value(kv, "classes", 4)?,
        samples_per_class: value(kv, "per_class", default_per_class)?,
        seed: value(kv, "data_seed", default_seed)?,
        ..Default::default()
    };
    Ok(Box::new(SyntheticShapes::generate(spec)?))
}

fn stored_precision(path: &Path) -> CliResult<Precision> {
    let set = load_checkpoint(path)?;
    Ok(match set.get("patch.weight")?.data.dtype() {
        DType::F64 => Precision::F64,
        _ => Precision::F32,
    })
}

fn train_config(kv: &KeyValues, base: TrainConfig, seed: u64) -> CliResult<TrainConfig> {
    let mut cfg = base;
    cfg.apply(kv)?;
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(args: &GenDataArgs) -> CliResult {
    let kv = merged(&args.config, &[args])?;
    let res = resolution(&kv, "resolution", (32, 32))?;
    let spec = SyntheticShapesSpec {
        num_classes: value(&kv, "classes", 4)?,
        samples_per_class: value(&kv, "per_class", 100)?,
        seed: value(&kv, "seed", 0)?,
        ..Default::default()
    };
    let ds = SyntheticShapes::generate(spec)?.at_resolution(res)?;
    let (images, labels) = dataset_to_idx(&ds)?;
    let prefix = args.out.display().to_string();
    save_idx(format!("{prefix}-images.idx"), &images)?;
    save_idx(format!("{prefix}-labels.idx"), &labels)?;
    Ok(())
}

fn run_pretrain<T: Real>(args: &PretrainArgs, kv: &KeyValues, cfg: &TrainConfig) -> CliResult {
    let source = data_source(&args.data, kv, cfg.seed, 1000)?;
    let ds = source.at_resolution(cfg.base_resolution)?;
    let grid = value(kv, "grid", 4)?;
    let config = ViTConfig {
        dim: value(kv, "dim", 32)?,
        depth: value(kv, "depth", 2)?,
        heads: value(kv, "heads", 2)?,
        mlp_ratio: value(kv, "mlp_ratio", 4)?,
        grid,
        num_classes: source.num_classes(),
    };
    let channels = ds.channels().unwrap_or(1);
    let (mut params, mut kernel) = init_model::<T>(config, cfg.base_resolution, channels, cfg.seed)?;
    let history = pretrain(&mut params, &mut kernel, &ds.images(), &ds.labels(), cfg)?;
    if let Some(p) = &args.optim.history {
        write_atomic(p, history.to_csv().as_bytes())?;
    }
    ModelCheckpoint {
        params,
        kernel,
        bank: None,
        base_resolution: cfg.base_resolution,
    }
    .save(&args.out)?;
    Ok(())
}

fn pretrain_cmd(args: &PretrainArgs) -> CliResult {
    let kv = merged(&args.config, &[&args.data, &args.optim, args])?;
    let cfg = train_config(&kv, TrainConfig::pretrain_defaults(), args.seed)?;
    match cfg.precision {
        Precision::F32 => run_pretrain::<f32>(args, &kv, &cfg),
        Precision::F64 => run_pretrain::<f64>(args, &kv, &cfg),
    }
}

fn run_mspe_train<T: Real>(args: &MspeTrainArgs, kv: &KeyValues, cfg: &TrainConfig) -> CliResult {
    let ckpt = ModelCheckpoint::<T>::load(&args.checkpoint)?;
    let mut cfg = cfg.clone();
    if kv.get("base_resolution").is_none() {
        cfg.base_resolution = ckpt.base_resolution;
    }
    let method: ResizeMethod = value(kv, "method", ResizeMethod::Bilinear)?;
    let source = data_source(&args.data, kv, cfg.seed, 1000)?;
    let ds = source.at_resolution(cfg.base_resolution)?;
    let mut bank = PatchKernelBank::from_pretrained(&ckpt.kernel, cfg.kernels, ckpt.params.config.grid, method)?;
    let out = args.out.clone();
    let mut save_epoch = |epoch: usize, bank: &PatchKernelBank<T>| -> mspe::Result<()> {
        log::info!("epoch {epoch}: writing {}", out.display());
        ModelCheckpoint {
            params: ckpt.params.clone(),
            kernel: ckpt.kernel.clone(),
            bank: Some(bank.clone()),
            base_resolution: ckpt.base_resolution,
        }
        .save(&out)
    };
    let history = mspe_train(
        &ckpt.params,
        &mut bank,
        &ds.images(),
        &ds.labels(),
        &cfg,
        Some(&mut save_epoch),
    )?;
    if let Some(p) = &args.optim.history {
        write_atomic(p, history.to_csv().as_bytes())?;
    }
    ModelCheckpoint {
        bank: Some(bank),
        ..ckpt
    }
    .save(&args.out)?;
    Ok(())
}

fn mspe_train_cmd(args: &MspeTrainArgs) -> CliResult {
    require_file(&args.checkpoint, "checkpoint")?;
    let kv = merged(&args.config, &[&args.data, &args.optim, args])?;
    let cfg = train_config(&kv, TrainConfig::default(), args.seed)?;
    match stored_precision(&args.checkpoint)? {
        Precision::F32 => run_mspe_train::<f32>(args, &kv, &cfg),
        Precision::F64 => run_mspe_train::<f64>(args, &kv, &cfg),
    }
}

fn sweep_spec(kv: &KeyValues) -> CliResult<SweepSpec> {
    if let Some(v) = kv.get("resolutions") {
        return Ok(SweepSpec::List(parse_resolution_list(v)?));
    }
    if let (Some(h), Some(w)) = (kv.get("fixed_height"), kv.get("widths")) {
        let height = h
            .parse()
            .map_err(|_| Failure::Usage(format!("bad fixed height `{h}`")))?;
        return Ok(SweepSpec::FixedHeight {
            height,
            widths: parse_range(w)?,
        });
    }
    Ok(SweepSpec::Square(parse_range(kv.get("square").unwrap_or("16:64:16"))?))
}

fn run_eval<T: Real>(args: &EvalArgs, kv: &KeyValues) -> CliResult {
    let bytes = std::fs::read(&args.checkpoint).map_err(Error::from)?;
    let ckpt = ModelCheckpoint::<T>::load(&args.checkpoint)?;
    let default_method = ckpt.bank.as_ref().map_or(ResizeMethod::Bilinear, |b| b.method());
    let state = ModelState {
        kernel: &ckpt.kernel,
        bank: ckpt.bank.as_ref(),
        base_resolution: ckpt.base_resolution,
        method: value(kv, "method", default_method)?,
    };
    let modes = parse_modes(kv.get("modes").unwrap_or("vanilla,flexivit,mspe"))?;
    let source = data_source(&args.data, kv, args.seed + EVAL_DATA_SEED_OFFSET, 250)?;
    let metadata = EvalMetadata {
        checkpoint_id: checkpoint_id(&bytes),
        seed: args.seed,
        dataset_id: source.id(),
    };
    let report = sweep(
        &ckpt.params,
        &state,
        source.as_ref(),
        &modes,
        &sweep_spec(kv)?.resolutions(),
        metadata,
    )?;
    write_output(args.out.as_deref(), &report.to_csv())?;
    if let Some(p) = &args.out {
        let mut meta = p.clone().into_os_string();
        meta.push(".meta");
        write_atomic(PathBuf::from(meta), report.metadata_text().as_bytes())?;
    }
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> CliResult {
    require_file(&args.checkpoint, "checkpoint")?;
    let kv = merged(&args.config, &[&args.data, args])?;
    match stored_precision(&args.checkpoint)? {
        Precision::F32 => run_eval::<f32>(args, &kv),
        Precision::F64 => run_eval::<f64>(args, &kv),
    }
}

fn run_diag<T: Real>(args: &DiagArgs, kv: &KeyValues) -> CliResult {
    let ckpt = ModelCheckpoint::<T>::load(&args.checkpoint)?;
    let default_method = ckpt.bank.as_ref().map_or(ResizeMethod::Bilinear, |b| b.method());
    let state = ModelState {
        kernel: &ckpt.kernel,
        bank: ckpt.bank.as_ref(),
        base_resolution: ckpt.base_resolution,
        method: value(kv, "method", default_method)?,
    };
    let low = resolution(kv, "low", (16, 16))?;
    let high = resolution(kv, "high", (32, 32))?;
    let samples = value(kv, "samples", 256)?;
    let modes = parse_modes(kv.get("modes").unwrap_or("mspe,flexivit"))?;
    let source = data_source(&args.data, kv, args.seed + EVAL_DATA_SEED_OFFSET, 250)?;
    std::fs::create_dir_all(&args.out_dir).map_err(Error::from)?;
    for mode in modes {
        let emb = state.embedder(mode)?;
        let report = cosine_similarity_diag(&ckpt.params, &emb, &emb, source.as_ref(), low, high, samples)?;
        write_atomic(
            args.out_dir.join(format!("similarity_{mode}.csv")),
            report.to_csv().as_bytes(),
        )?;
        println!(
            "{mode}: mean patch cosine {:.6}, mean class cosine {:.6}, zero-norm {}",
            report.mean_patch(),
            report.mean_cls(),
            report.zero_norm_warnings
        );
    }
    Ok(())
}

fn diag_cmd(args: &DiagArgs) -> CliResult {
    require_file(&args.checkpoint, "checkpoint")?;
    let kv = merged(&args.config, &[&args.data, args])?;
    match stored_precision(&args.checkpoint)? {
        Precision::F32 => run_diag::<f32>(args, &kv),
        Precision::F64 => run_diag::<f64>(args, &kv),
    }
}

fn inspect_cmd(args: &InspectArgs) -> CliResult {
    let kv = merged(&args.config, &[args])?;
    let src = kv
        .get("src")
        .ok_or_else(|| Failure::Usage("--src is required".into()))
        .and_then(|v| Ok(parse_resolution(v)?))?;
    let dst = kv
        .get("dst")
        .ok_or_else(|| Failure::Usage("--dst is required".into()))
        .and_then(|v| Ok(parse_resolution(v)?))?;
    let method: ResizeMethod = value(&kv, "method", ResizeMethod::Bilinear)?;
    let which = kv.get("matrix").unwrap_or("rows");
    let m = match which {
        "rows" | "cols" | "full" => {
            let op = build_resize_operator(src, dst, method)?;
            match which {
                "rows" => op.row_matrix().clone(),
                "cols" => op.col_matrix().clone(),
                _ => op.full_matrix(),
            }
        }
        "pi-rows" | "pi-cols" | "pi-full" => {
            let pi = PiResize::new(src, dst, method)?;
            match which {
                "pi-rows" => pi.row_factor().clone(),
                "pi-cols" => pi.col_factor().clone(),
                _ => pi.full_matrix(),
            }
        }
        other => {
            return Err(Failure::Usage(format!(
                "unknown matrix `{other}` (rows, cols, full, pi-rows, pi-cols, pi-full)"
            )))
        }
    };
    let mut text = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|c| m.get(r, c).to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_output(args.out.as_deref(), &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::MspeTrain(a) => mspe_train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::DiagSim(a) => diag_cmd(a),
        Command::InspectResize(a) => inspect_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error[usage]: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

//! `capsnet`: train, evaluate, benchmark and size capsule networks.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use capsnet::checkpoint::Checkpoint;
use capsnet::data::{self, data_root, expand_dataset, Dataset, DatasetKind, Split};
use capsnet::decoder::DecoderKind;
use capsnet::harness::bench::{benchmark, routing_benchmark};
use capsnet::harness::sweep::{sweep_configs, write_sweep_csv, SweepRow};
use capsnet::harness::{evaluate, train, train_from, SweepKind, TrainConfig};
use capsnet::model::{CapsuleMode, Model, ModelConfig, EXPANDED_SHAPE};
use capsnet::optim::AdamConfig;

#[derive(Parser)]
#[command(name = "capsnet", version, about = "Capsule networks with dynamic routing and CFC primary capsules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing checkpoints and metrics to --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Time training epochs, inference and routing.
    Bench(BenchArgs),
    /// Primary-capsule count sweep or CFC kernel/dimension grid.
    Sweep(SweepArgs),
    /// Print per-layer and total parameter counts.
    Params(ParamsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Fmnist,
    Cifar10,
}

impl DatasetArg {
    fn kind(self) -> DatasetKind {
        match self {
            DatasetArg::Mnist => DatasetKind::Mnist,
            DatasetArg::Fmnist => DatasetKind::Fmnist,
            DatasetArg::Cifar10 => DatasetKind::Cifar10,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Capsnet,
    Cfc,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// conv widths 64, class-independent decoder
    Desk,
    /// full-width network
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderArg {
    Fc,
    Ci,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    /// conv2 width 32..256, i.e. 256..2048 primary capsules
    PcCount,
    /// CFC kernel 1..3 by capsule dimension 8..32
    KdGrid,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetArg,
    #[arg(long, value_enum, default_value = "cfc")]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    /// CFC kernel size.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// CFC capsule dimension.
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// conv2 channel count.
    #[arg(long)]
    nk: Option<usize>,
    /// Capsule dropout rate.
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Decoder; defaults to fc for the full baseline, ci otherwise.
    #[arg(long, value_enum)]
    decoder: Option<DecoderArg>,
    /// Place MNIST digits at random offsets on a 40x40 canvas.
    #[arg(long)]
    expanded: bool,
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, env = "DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    /// Use N generated training images (and N/4 test images) instead of files.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Epochs with the normal margin.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Epochs with the hard margin.
    #[arg(long, default_value_t = 100)]
    hard_epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Per-epoch learning-rate decay factor.
    #[arg(long, default_value_t = 0.96)]
    lr_decay: f64,
    /// Restart the learning-rate schedule at the hard phase.
    #[arg(long)]
    reset_lr_on_hard: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One worker thread; timing columns of metrics.csv are zeroed.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Continue from a `last.ckpt`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetArg,
    #[arg(long)]
    expanded: bool,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a PGM/PPM grid of the first 16 test images and their reconstructions.
    #[arg(long)]
    recon: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Measured epochs after one warm-up epoch.
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    deterministic: bool,
    /// Time isolated routing over 256..2048 primary capsules instead.
    #[arg(long)]
    routing: bool,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "pc-count")]
    kind: SweepArg,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Normal-phase epochs per grid point; 0 only counts parameters.
    #[arg(long, default_value_t = 0)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    deterministic: bool,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    json: bool,
}

fn model_config(a: &ModelArgs) -> Result<ModelConfig> {
    let kind = a.dataset.kind();
    if a.expanded && kind != DatasetKind::Mnist {
        bail!("--expanded applies to mnist only");
    }
    let image = if a.expanded { EXPANDED_SHAPE } else { kind.image_shape() };
    let mode = match a.model {
        ModelArg::Capsnet => CapsuleMode::Baseline,
        ModelArg::Cfc => CapsuleMode::Cfc,
    };
    let mut cfg = match (a.profile, mode) {
        (Profile::Desk, m) => ModelConfig::desk(image, m),
        (Profile::Full, CapsuleMode::Baseline) => ModelConfig::baseline(image),
        (Profile::Full, CapsuleMode::Cfc) => ModelConfig::cfc(image, a.k, a.d),
    };
    cfg.cfc_kernel = a.k;
    cfg.cfc_dim = a.d;
    if let Some(nk) = a.nk {
        cfg = cfg.with_nk(nk);
    }
    if let Some(dec) = a.decoder {
        cfg = cfg.with_decoder(match dec {
            DecoderArg::Fc => DecoderKind::Fc,
            DecoderArg::Ci => DecoderKind::ClassIndependent,
        });
    }
    cfg.dropout = a.dropout;
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(kind: DatasetKind, expanded: bool, d: &DataArgs, split: Split, seed: u64) -> Result<Dataset> {
    let mut ds = match d.synthetic {
        Some(n) => {
            let n = if split == Split::Train { n } else { (n / 4).max(1) };
            let salt = if split == Split::Train { 0 } else { 1 };
            data::synthetic(kind.image_shape(), 10, n, seed.wrapping_add(salt))?
        }
        None => {
            let root = data_root(d.data_dir.as_deref());
            kind.load(&root, split)
                .with_context(|| format!("loading {} {:?} split from {}", kind.dir_name(), split, root.display()))?
        }
    };
    let limit = match split {
        Split::Train => d.train_limit,
        Split::Test => d.test_limit,
    };
    if let Some(n) = limit {
        ds = ds.take(n);
    }
    if expanded {
        ds = expand_dataset(&ds, seed.wrapping_add(split as u64))?;
    }
    Ok(ds)
}

fn load_pair(kind: DatasetKind, expanded: bool, d: &DataArgs, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = load_split(kind, expanded, d, Split::Train, seed)?;
    let test = load_split(kind, expanded, d, Split::Test, seed)?;
    log::info!("{} train / {} test images of {:?}", train.len(), test.len(), train.shape);
    Ok((train, test))
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => serde_json::to_writer_pretty(File::create(p)?, value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let model = model_config(&a.model)?;
    let mut cfg = TrainConfig::new(model, a.model.dataset.kind());
    cfg.epochs_normal = a.epochs;
    cfg.epochs_hard = a.hard_epochs;
    cfg.adam = AdamConfig {
        lr: a.lr,
        gamma: a.lr_decay,
        ..AdamConfig::default()
    };
    cfg.batch_size = a.batch_size;
    cfg.seed = a.seed;
    cfg.deterministic = a.deterministic;
    cfg.reset_lr_on_hard = a.reset_lr_on_hard;
    let (train_ds, test_ds) = load_pair(cfg.dataset, a.model.expanded, &a.data, a.seed)?;
    log::info!("{} parameters", cfg.model.param_count()?);
    std::fs::create_dir_all(&a.out)?;
    serde_json::to_writer_pretty(File::create(a.out.join("config.json"))?, &cfg)?;
    let outcome = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model != cfg.model {
                bail!("checkpoint {} was written for a different model configuration", path.display());
            }
            train_from(&cfg, &train_ds, &test_ds, Some(&a.out), Some(&ck))?
        }
        None => train(&cfg, &train_ds, &test_ds, Some(&a.out))?,
    };
    println!("best test accuracy {:.4}", outcome.best_accuracy);
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model: Model<f32> = ck.to_model()?;
    let test = load_split(a.dataset.kind(), a.expanded, &a.data, Split::Test, a.seed)?;
    let report = evaluate(&model, &test, a.batch_size)?;
    println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.total);
    if let Some(path) = &a.recon {
        let idx: Vec<usize> = (0..test.len().min(16)).collect();
        let (x, _) = test.batch::<f32>(&idx)?;
        let r = model.reconstruct(&x)?;
        let mut both = x.data().to_vec();
        both.extend_from_slice(r.data());
        let mut shape = x.shape().to_vec();
        shape[0] *= 2;
        capsnet::export::write_grid(&capsnet::Tensor::new(shape, both)?, idx.len(), path)?;
    }
    if a.out.is_some() {
        write_json(&report, a.out.as_deref())?;
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let cfg = model_config(&a.model)?;
    capsnet::harness::with_threads(a.deterministic, || -> Result<()> {
        if a.routing {
            let mut rows = Vec::new();
            for nk in [32, 64, 128, 192, 256] {
                let n_in = cfg.clone().with_nk(nk).primary_count().unwrap_or(nk * 8);
                let r = routing_benchmark(n_in, cfg.n_classes, 8, cfg.out_caps_dim, a.batch_size, cfg.routing_iters, a.epochs, a.seed)?;
                println!("{:>5} primary capsules: {:.4}s", r.n_in, r.median_s);
                rows.push(r);
            }
            return write_json(&rows, a.out.as_deref());
        }
        let (train_ds, test_ds) = load_pair(a.model.dataset.kind(), a.model.expanded, &a.data, a.seed)?;
        let r = benchmark(&cfg, &train_ds, &test_ds, a.batch_size, a.epochs, a.seed)?;
        println!(
            "{} primary capsules, {} params: train {:.3}s/epoch, inference {:.3}s, routing {:.3}s",
            r.primary_caps, r.params, r.median_train_epoch_s, r.median_inference_s, r.median_routing_s
        );
        if a.out.is_some() {
            write_json(&r, a.out.as_deref())?;
        }
        Ok(())
    })?
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let kind = match a.kind {
        SweepArg::PcCount => SweepKind::PcCount,
        SweepArg::KdGrid => SweepKind::KdGrid,
    };
    let base = model_config(&a.model)?;
    let data = if a.epochs > 0 {
        Some(load_pair(a.model.dataset.kind(), a.model.expanded, &a.data, a.seed)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for cfg in sweep_configs(kind, &base) {
        let mut row = SweepRow {
            nk: cfg.conv2.channels,
            k: (kind == SweepKind::KdGrid).then_some(cfg.cfc_kernel),
            d: (kind == SweepKind::KdGrid).then_some(cfg.cfc_dim),
            primary_caps: cfg.primary_count()?,
            params: cfg.param_count()?,
            test_accuracy: None,
        };
        if let Some((train_ds, test_ds)) = &data {
            let mut tc = TrainConfig::new(cfg.clone(), a.model.dataset.kind());
            tc.epochs_normal = a.epochs;
            tc.epochs_hard = 0;
            tc.adam.lr = a.lr;
            tc.batch_size = a.batch_size;
            tc.seed = a.seed;
            tc.deterministic = a.deterministic;
            row.test_accuracy = Some(train(&tc, train_ds, test_ds, None)?.best_accuracy);
        }
        log::info!("{row:?}");
        rows.push(row);
    }
    match &a.out {
        Some(p) => write_sweep_csv(&rows, File::create(p)?)?,
        None => write_sweep_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn run_params(a: ParamsArgs) -> Result<()> {
    let cfg = model_config(&a.model)?;
    let layers = cfg.layer_params()?;
    let total = cfg.param_count()?;
    if a.json {
        let v = serde_json::json!({
            "layers": layers.iter().map(|(n, c)| serde_json::json!({"name": n, "params": c})).collect::<Vec<_>>(),
            "primary_caps": cfg.primary_count()?,
            "total": total,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    for (name, n) in &layers {
        println!("{name:<24}{n:>12}");
    }
    println!("{:<24}{:>12}", "primary capsules", cfg.primary_count()?);
    println!("{:<24}{:>12}  ({:.2}M)", "total", total, total as f64 / 1e6);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Bench(a) => run_bench(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Params(a) => run_params(a),
    }
}

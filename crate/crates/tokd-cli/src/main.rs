//! `tokd` — batch CLI for the view-synthesis pipeline: dataset generation,
//! training, evaluation, PCA feature dumps, cost accounting, and the
//! variant-by-data-condition ablation grid.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tokd_core::analysis::{count_cost, pca_layers, save_pca_dump};
use tokd_core::blocks::BlockVariant;
use tokd_core::datapipe::{
    generate_dataset, load_dataset, sample_example, GenConfig, RolePolicy, SceneRecord,
};
use tokd_core::experiments::{grid_csv, run_grid, AblateOptions, Condition};
use tokd_core::model::{Checkpoint, ModelConfig, ParamSet, PerceptualMode};
use tokd_core::rng::Rng;
use tokd_core::trainer::{evaluate, train, TrainConfig};

#[derive(Parser)]
#[command(name = "tokd", version, about = "Token-role-modulated novel view synthesis at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural scene dataset.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset; writes a per-scene CSV report.
    Eval(EvalArgs),
    /// Dump per-layer PCA feature images for one example.
    Pca(PcaArgs),
    /// Report parameter counts and forward FLOPs per block variant.
    Bench(BenchArgs),
    /// Run the variant x data-condition ablation grid and emit its CSV.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Plain,
    Tokd,
    TokdPlus,
}

impl VariantArg {
    fn to_variant(self) -> BlockVariant {
        match self {
            VariantArg::Plain => BlockVariant::Plain,
            VariantArg::Tokd => BlockVariant::TokD,
            VariantArg::TokdPlus => BlockVariant::TokDPlus,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    CleanTarget,
    Naive,
}

impl PolicyArg {
    fn to_policy(self) -> RolePolicy {
        match self {
            PolicyArg::CleanTarget => RolePolicy::CleanTarget,
            PolicyArg::Naive => RolePolicy::Naive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightsArg {
    Ema,
    Raw,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset root (scenes land under <out>/scenes/).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long, default_value_t = 5)]
    views: usize,
    /// Square image edge length in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Focal length in pixels; defaults to 1.25x the edge length.
    #[arg(long)]
    focal: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    synthetic_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    severity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoint.bin and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value overrides file (one per line, # comments).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = VariantArg::TokdPlus)]
    variant: VariantArg,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    sources: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::CleanTarget)]
    policy: PolicyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Linear warmup steps; defaults to 5% of --steps.
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this step (schedule still spans --steps).
    #[arg(long)]
    run_until: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    sources: usize,
    #[arg(long, default_value_t = 2)]
    examples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = WeightsArg::Ema)]
    weights: WeightsArg,
}

#[derive(Args)]
struct PcaArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for layer_<l>_{src,tgt}.png and cosines.csv.
    #[arg(long)]
    out: PathBuf,
    /// Scene index within the dataset.
    #[arg(long, default_value_t = 0)]
    scene: usize,
    #[arg(long, default_value_t = 2)]
    sources: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = WeightsArg::Ema)]
    weights: WeightsArg,
}

#[derive(Args)]
struct BenchArgs {
    /// Use the published model shape instead of the desk default.
    #[arg(long)]
    published_scale: bool,
    #[arg(long, default_value_t = 2)]
    sources: usize,
}

#[derive(Args)]
struct AblateArgs {
    /// Output directory; the summary lands in <out>/ablation.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long, default_value_t = 64)]
    scenes: usize,
    #[arg(long, default_value_t = 8)]
    heldout: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    sources: usize,
    #[arg(long, default_value_t = 0.5)]
    severity: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Linear warmup steps; defaults to 5% of --steps.
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict to one variant (default: all three).
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Restrict to one data condition (default: all three).
    #[arg(long)]
    condition: Option<String>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => do_train(a),
        Command::Eval(a) => do_eval(a),
        Command::Pca(a) => do_pca(a),
        Command::Bench(a) => do_bench(a),
        Command::Ablate(a) => do_ablate(a),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let cfg = GenConfig {
        n_scenes: a.scenes,
        views_per_scene: a.views,
        image_size: (a.size, a.size),
        focal: a.focal.unwrap_or(1.25 * a.size as f64),
        synthetic_fraction: a.synthetic_fraction,
        severity: a.severity,
        seed: a.seed,
    };
    let ids = generate_dataset(&cfg, &a.out).context("generating dataset")?;
    println!("wrote {} scenes under {}", ids.len(), a.out.join("scenes").display());
    Ok(())
}

/// Apply `key = value` lines from a config file onto the training setup.
fn apply_config_file(path: &Path, cfg: &mut TrainConfig) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| anyhow!("{}:{}: bad {what} '{value}'", path.display(), lineno + 1);
        match key {
            "steps" => cfg.steps = value.parse().map_err(|_| bad("integer"))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "n_sources" => cfg.n_sources = value.parse().map_err(|_| bad("integer"))?,
            "lr_peak" => cfg.lr_peak = value.parse().map_err(|_| bad("number"))?,
            "warmup" => cfg.warmup = value.parse().map_err(|_| bad("integer"))?,
            "beta1" => cfg.beta1 = value.parse().map_err(|_| bad("number"))?,
            "beta2" => cfg.beta2 = value.parse().map_err(|_| bad("number"))?,
            "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad("number"))?,
            "ema_decay" => cfg.ema_decay = value.parse().map_err(|_| bad("number"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
            "log_every" => cfg.log_every = value.parse().map_err(|_| bad("integer"))?,
            "checkpoint_every" => cfg.checkpoint_every = value.parse().map_err(|_| bad("integer"))?,
            "policy" => cfg.policy = RolePolicy::parse(value)?,
            "variant" => cfg.model.variant = BlockVariant::parse(value)?,
            "d_model" => cfg.model.d_model = value.parse().map_err(|_| bad("integer"))?,
            "n_layers" => cfg.model.n_layers = value.parse().map_err(|_| bad("integer"))?,
            "n_heads" => cfg.model.n_heads = value.parse().map_err(|_| bad("integer"))?,
            "patch" => cfg.model.patch = value.parse().map_err(|_| bad("integer"))?,
            "lambda_perceptual" => {
                cfg.model.lambda_perceptual = value.parse().map_err(|_| bad("number"))?
            }
            "perceptual" => {
                cfg.model.perceptual = match value {
                    "off" => PerceptualMode::Off,
                    "grad-diff" => PerceptualMode::GradientDiff,
                    _ => bail!("{}:{}: unknown perceptual mode '{value}'", path.display(), lineno + 1),
                }
            }
            _ => bail!("{}:{}: unknown config key '{key}'", path.display(), lineno + 1),
        }
    }
    Ok(())
}

fn dataset_image_size(scenes: &[SceneRecord]) -> anyhow::Result<(usize, usize)> {
    let shape = scenes
        .first()
        .and_then(|s| s.views.first())
        .map(|v| v.image.shape().to_vec())
        .ok_or_else(|| anyhow!("dataset has no views"))?;
    Ok((shape[0], shape[1]))
}

fn do_train(a: TrainArgs) -> anyhow::Result<()> {
    let scenes = load_dataset(&a.data).context("loading dataset")?;
    let mut model = ModelConfig::desk_default(a.variant.to_variant());
    model.d_model = a.d_model;
    model.n_layers = a.layers;
    model.n_heads = a.heads;
    model.patch = a.patch;
    model.image_size = dataset_image_size(&scenes)?;
    let mut cfg = TrainConfig::desk_default(model);
    cfg.steps = a.steps;
    cfg.batch_size = a.batch;
    cfg.n_sources = a.sources;
    cfg.policy = a.policy.to_policy();
    cfg.seed = a.seed;
    cfg.warmup = a.warmup.unwrap_or((a.steps / 20).max(1));
    cfg.run_until = a.run_until;
    if let Some(path) = &a.config {
        apply_config_file(path, &mut cfg)?;
    }
    let outcome = train::<f32>(&cfg, &scenes, &a.out, a.resume.as_deref())?;
    println!(
        "trained to step {} (loss {:.6}, psnr {:.2} dB raw / {:.2} dB ema); checkpoint {}",
        outcome.steps_done,
        outcome.last_loss,
        outcome.last_psnr_raw,
        outcome.last_psnr_ema,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn load_weights(path: &Path, which: WeightsArg) -> anyhow::Result<(ModelConfig, ParamSet<f32>)> {
    let ck: Checkpoint<f32> = Checkpoint::load(path)?;
    let params = match which {
        WeightsArg::Ema => ck.ema,
        WeightsArg::Raw => ck.params,
    };
    Ok((ck.config, params))
}

fn do_eval(a: EvalArgs) -> anyhow::Result<()> {
    let scenes = load_dataset(&a.data).context("loading dataset")?;
    let (model, params) = load_weights(&a.checkpoint, a.weights)?;
    let report = evaluate(&model, &params, &scenes, a.sources, a.examples, a.seed)?;
    let csv = report.to_csv();
    match &a.out {
        Some(path) => {
            std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "evaluated {} scenes: mean psnr {:.2} dB, ssim {:.4} -> {}",
                report.scenes.len(),
                report.psnr,
                report.ssim,
                path.display()
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn do_pca(a: PcaArgs) -> anyhow::Result<()> {
    let scenes = load_dataset(&a.data).context("loading dataset")?;
    let scene = scenes
        .get(a.scene)
        .ok_or_else(|| anyhow!("scene index {} out of range ({} scenes)", a.scene, scenes.len()))?;
    let (model, params) = load_weights(&a.checkpoint, a.weights)?;
    let mut rng = Rng::new(a.seed, 0);
    let ex = sample_example(scene, a.sources, RolePolicy::CleanTarget, &mut rng)?;
    let layers = pca_layers(&model, &params, &ex.sources, &ex.target_rays, a.seed)?;
    save_pca_dump(&a.out, &layers)?;
    println!("wrote {} layer dumps to {}", layers.len(), a.out.display());
    Ok(())
}

fn do_bench(a: BenchArgs) -> anyhow::Result<()> {
    println!("variant,params,gflops_forward");
    let mut base: Option<u64> = None;
    for variant in [BlockVariant::Plain, BlockVariant::TokD, BlockVariant::TokDPlus] {
        let cfg = if a.published_scale {
            ModelConfig::published_scale(variant)
        } else {
            ModelConfig::desk_default(variant)
        };
        let cost = count_cost(&cfg, a.sources)?;
        println!(
            "{},{},{:.4}",
            variant.as_str(),
            cost.params,
            cost.flops_forward as f64 / 1e9
        );
        if variant == BlockVariant::Plain {
            base = Some(cost.flops_forward);
        } else if variant == BlockVariant::TokDPlus {
            if let Some(b) = base {
                println!(
                    "# tokd-plus/plain flop ratio: {:.6}",
                    cost.flops_forward as f64 / b as f64
                );
            }
        }
    }
    Ok(())
}

fn do_ablate(a: AblateArgs) -> anyhow::Result<()> {
    let opts = AblateOptions {
        steps: a.steps,
        batch_size: a.batch,
        n_train_scenes: a.scenes,
        n_heldout_scenes: a.heldout,
        image_size: (a.size, a.size),
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        patch: a.patch,
        n_sources: a.sources,
        severity: a.severity,
        lr_peak: a.lr,
        warmup: a.warmup.unwrap_or((a.steps / 20).max(1)),
        seed: a.seed,
        seeds: a.seeds,
        ..AblateOptions::default()
    };
    let variants = match a.variant {
        Some(v) => vec![v.to_variant()],
        None => vec![BlockVariant::Plain, BlockVariant::TokD, BlockVariant::TokDPlus],
    };
    let conditions = match &a.condition {
        Some(c) => vec![Condition::parse(c)?],
        None => Condition::ALL.to_vec(),
    };
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))?;
    let cells = run_grid(&opts, &variants, &conditions, &a.out, |run| {
        println!(
            "{} / {} / seed {}: held-out psnr {:.2} dB (ssim {:.4})",
            run.variant.as_str(),
            run.condition.as_str(),
            run.seed_idx,
            run.psnr,
            run.ssim
        );
    })?;
    let csv = grid_csv(&cells);
    let csv_path = a.out.join("ablation.csv");
    std::fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    print!("{csv}");
    println!("# summary written to {}", csv_path.display());
    Ok(())
}

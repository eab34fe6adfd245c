//! The ablation grid: block variant x training-data condition, trained at desk
//! scale and scored on held-out clean scenes.

use crate::blocks::BlockVariant;
use crate::datapipe::{generate_scene, GenConfig, RolePolicy, SceneRecord};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, PerceptualMode};
use crate::trainer::{evaluate, train, TrainConfig};

pub use crate::trainer::TrainOutcome;

/// Training-data regime for one ablation cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// Clean renders only.
    RealOnly,
    /// Half the views degraded; targets drawn from all views.
    NaiveSynthetic,
    /// Half the views degraded; targets drawn from clean views only.
    CleanTargetSynthetic,
}

impl Condition {
    pub const ALL: [Condition; 3] = [
        Condition::RealOnly,
        Condition::NaiveSynthetic,
        Condition::CleanTargetSynthetic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::RealOnly => "real-only",
            Condition::NaiveSynthetic => "naive-synthetic",
            Condition::CleanTargetSynthetic => "clean-target-synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition '{s}'")))
    }

    pub fn synthetic_fraction(&self) -> f64 {
        match self {
            Condition::RealOnly => 0.0,
            _ => 0.5,
        }
    }

    pub fn policy(&self) -> RolePolicy {
        match self {
            Condition::NaiveSynthetic => RolePolicy::Naive,
            _ => RolePolicy::CleanTarget,
        }
    }
}

/// Desk-scale experiment shape shared by every cell of the grid.
#[derive(Debug, Clone, Copy)]
pub struct AblateOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub n_train_scenes: usize,
    pub n_heldout_scenes: usize,
    pub views_per_scene: usize,
    pub image_size: (usize, usize),
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch: usize,
    pub n_sources: usize,
    pub severity: f64,
    pub lr_peak: f64,
    pub warmup: u64,
    /// Base seed; per-run seeds are derived from it.
    pub seed: u64,
    pub seeds: usize,
}

impl Default for AblateOptions {
    fn default() -> Self {
        AblateOptions {
            steps: 2000,
            batch_size: 4,
            n_train_scenes: 64,
            n_heldout_scenes: 16,
            views_per_scene: 5,
            image_size: (32, 32),
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            patch: 8,
            n_sources: 2,
            severity: 0.5,
            lr_peak: 1e-3,
            warmup: 100,
            seed: 0,
            seeds: 3,
        }
    }
}

impl AblateOptions {
    pub fn model_config(&self, variant: BlockVariant) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            patch: self.patch,
            variant,
            lambda_perceptual: 0.5,
            perceptual: PerceptualMode::Off,
            image_size: self.image_size,
        }
    }

    fn gen_config(&self, fraction: f64, seed: u64, n_scenes: usize) -> GenConfig {
        GenConfig {
            n_scenes,
            views_per_scene: self.views_per_scene,
            image_size: self.image_size,
            focal: 1.25 * self.image_size.1 as f64,
            synthetic_fraction: fraction,
            severity: self.severity,
            seed,
        }
    }

    /// Training scenes for (condition, seed): identical across variants so the
    /// comparison is paired.
    pub fn train_scenes(&self, condition: Condition, seed_idx: usize) -> Result<Vec<SceneRecord>> {
        let seed = self
            .seed
            .wrapping_add(1000)
            .wrapping_add(seed_idx as u64)
            .wrapping_mul(2654435761);
        let cfg = self.gen_config(condition.synthetic_fraction(), seed, self.n_train_scenes);
        (0..self.n_train_scenes).map(|i| generate_scene(&cfg, i)).collect()
    }

    /// Clean held-out scenes, shared by every cell.
    pub fn heldout_scenes(&self) -> Result<Vec<SceneRecord>> {
        let cfg = self.gen_config(0.0, self.seed.wrapping_add(777), self.n_heldout_scenes);
        (0..self.n_heldout_scenes).map(|i| generate_scene(&cfg, i)).collect()
    }

    pub fn train_config(
        &self,
        variant: BlockVariant,
        condition: Condition,
        seed_idx: usize,
    ) -> TrainConfig {
        let mut t = TrainConfig::desk_default(self.model_config(variant));
        t.steps = self.steps;
        t.batch_size = self.batch_size;
        t.n_sources = self.n_sources;
        t.policy = condition.policy();
        t.lr_peak = self.lr_peak;
        t.warmup = self.warmup;
        t.seed = self.seed.wrapping_add(seed_idx as u64);
        t.log_every = (self.steps / 20).max(1);
        t.checkpoint_every = self.steps;
        t
    }
}

/// Result of one trained cell replicate.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub variant: BlockVariant,
    pub condition: Condition,
    pub seed_idx: usize,
    /// Aggregate held-out PSNR of the EMA weights.
    pub psnr: f64,
    pub ssim: f64,
    /// Where the trained checkpoint lives.
    pub checkpoint: std::path::PathBuf,
}

/// One grid cell summarized over seeds.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub variant: BlockVariant,
    pub condition: Condition,
    pub median_psnr: f64,
    pub seed_psnrs: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite psnr"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Train and score one replicate. Artifacts land under
/// `out_dir/<variant>_<condition>_s<seed>/`.
pub fn run_cell(
    opts: &AblateOptions,
    variant: BlockVariant,
    condition: Condition,
    seed_idx: usize,
    heldout: &[SceneRecord],
    out_dir: &std::path::Path,
) -> Result<CellRun> {
    let scenes = opts.train_scenes(condition, seed_idx)?;
    let tcfg = opts.train_config(variant, condition, seed_idx);
    let run_dir = out_dir.join(format!(
        "{}_{}_s{}",
        variant.as_str(),
        condition.as_str(),
        seed_idx
    ));
    let outcome = train::<f32>(&tcfg, &scenes, &run_dir, None)?;
    let ck: Checkpoint<f32> = Checkpoint::load(&outcome.checkpoint)?;
    // 8 draws per scene: the per-example PSNR spread is large, and a thin
    // evaluation drowns the variant effect in sampling noise
    let report = evaluate(
        &tcfg.model,
        &ck.ema,
        heldout,
        opts.n_sources,
        8,
        opts.seed.wrapping_add(31),
    )?;
    Ok(CellRun {
        variant,
        condition,
        seed_idx,
        psnr: report.psnr,
        ssim: report.ssim,
        checkpoint: outcome.checkpoint,
    })
}

/// Run the requested cells over all seeds and summarize with medians.
pub fn run_grid(
    opts: &AblateOptions,
    variants: &[BlockVariant],
    conditions: &[Condition],
    out_dir: &std::path::Path,
    mut progress: impl FnMut(&CellRun),
) -> Result<Vec<CellSummary>> {
    if opts.seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let heldout = opts.heldout_scenes()?;
    let mut summaries = Vec::new();
    for &variant in variants {
        for &condition in conditions {
            let mut seed_psnrs = Vec::with_capacity(opts.seeds);
            for seed_idx in 0..opts.seeds {
                let run = run_cell(opts, variant, condition, seed_idx, &heldout, out_dir)?;
                seed_psnrs.push(run.psnr);
                progress(&run);
            }
            summaries.push(CellSummary {
                variant,
                condition,
                median_psnr: median(&seed_psnrs),
                seed_psnrs,
            });
        }
    }
    Ok(summaries)
}

/// CSV with one row per (variant, condition) cell.
pub fn grid_csv(cells: &[CellSummary]) -> String {
    let mut out = String::from("variant,condition,median_psnr,seed_psnrs\n");
    for c in cells {
        let seeds = c
            .seed_psnrs
            .iter()
            .map(|p| format!("{p:.4}"))
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{:.4},{}\n",
            c.variant.as_str(),
            c.condition.as_str(),
            c.median_psnr,
            seeds
        ));
    }
    out
}

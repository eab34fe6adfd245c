//! Optimization: warmup/decay learning-rate schedule, AdamW with decoupled
//! weight decay, EMA weight shadows, and a deterministic, resumable training
//! loop over generated scene datasets.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::datapipe::{sample_example, RolePolicy, SceneRecord, TrainExample};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, MetricReport, SceneScore};
use crate::model::{
    forward, init_params, is_norm_param, loss_var, Checkpoint, ForwardOptions, ModelConfig,
    ParamSet,
};
use crate::rng::Rng;
use crate::tensor::Scalar;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub n_sources: usize,
    pub policy: RolePolicy,
    pub lr_peak: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Stop after this step while keeping the full schedule; the run can be
    /// resumed later from the checkpoint. `None` runs to `steps`.
    pub run_until: Option<u64>,
}

impl TrainConfig {
    /// Short CPU run over a small dataset.
    pub fn desk_default(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            steps: 2000,
            batch_size: 4,
            n_sources: 2,
            policy: RolePolicy::CleanTarget,
            lr_peak: 2e-4,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            ema_decay: 0.99,
            seed: 0,
            log_every: 50,
            checkpoint_every: 500,
            run_until: None,
        }
    }

    /// Published recipe (for reference; far beyond a CPU budget).
    pub fn published_preset(model: ModelConfig) -> Self {
        TrainConfig {
            steps: 100_000,
            batch_size: 64,
            warmup: 2500,
            ..TrainConfig::desk_default(model)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.n_sources == 0 {
            return Err(Error::Config(
                "steps, batch size and source count must be positive".into(),
            ));
        }
        if self.warmup >= self.steps {
            return Err(Error::Config(format!(
                "warmup {} must be shorter than the run ({} steps)",
                self.warmup, self.steps
            )));
        }
        if self.lr_peak <= 0.0 {
            return Err(Error::Config("peak learning rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("ema decay", self.ema_decay)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("log/checkpoint intervals must be positive".into()));
        }
        if let Some(until) = self.run_until {
            if until == 0 || until > self.steps {
                return Err(Error::Config(format!(
                    "run_until {until} outside 1..={}",
                    self.steps
                )));
            }
        }
        Ok(())
    }
}

/// Learning rate at 1-based step: linear warmup to the peak, then linear decay
/// to zero at `total`.
pub fn lr_at(step: u64, warmup: u64, total: u64, peak: f64) -> Result<f64> {
    if step == 0 || step > total {
        return Err(Error::Argument(format!(
            "step {step} outside the schedule (1..={total})"
        )));
    }
    if warmup >= total {
        return Err(Error::Config(format!(
            "warmup {warmup} must be shorter than the schedule ({total})"
        )));
    }
    if step <= warmup {
        Ok(peak * step as f64 / warmup.max(1) as f64)
    } else {
        Ok(peak * (total - step) as f64 / (total - warmup) as f64)
    }
}

/// One AdamW update, in place. `step` is 1-based for bias correction. Weight
/// decay is decoupled and skipped for normalization parameters.
pub fn adamw_step<E: Scalar>(
    params: &mut ParamSet<E>,
    grads: &ParamSet<E>,
    m: &mut ParamSet<E>,
    v: &mut ParamSet<E>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Argument("adamw step is 1-based".into()));
    }
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        let g = grads.get(name)?;
        g.check_finite(&format!("gradient of '{name}'"))?;
        let decay = if is_norm_param(name) { 0.0 } else { weight_decay };
        let p = params.get_mut(name)?;
        if g.shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} vs parameter '{name}' {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let mt = m.get_mut(name)?;
        let vt = v.get_mut(name)?;
        for i in 0..p.numel() {
            let gi = g.data()[i].to_f64();
            let mi = beta1 * mt.data()[i].to_f64() + (1.0 - beta1) * gi;
            let vi = beta2 * vt.data()[i].to_f64() + (1.0 - beta2) * gi * gi;
            mt.data_mut()[i] = E::from_f64(mi);
            vt.data_mut()[i] = E::from_f64(vi);
            let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            let pi = p.data()[i].to_f64();
            p.data_mut()[i] = E::from_f64(pi - lr * (update + decay * pi));
        }
    }
    Ok(())
}

/// ema <- decay * ema + (1 - decay) * params
pub fn ema_update<E: Scalar>(ema: &mut ParamSet<E>, params: &ParamSet<E>, decay: f64) -> Result<()> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        let p = params.get(name)?;
        let e = ema.get_mut(name)?;
        for i in 0..p.numel() {
            let v = decay * e.data()[i].to_f64() + (1.0 - decay) * p.data()[i].to_f64();
            e.data_mut()[i] = E::from_f64(v);
        }
    }
    Ok(())
}

/// Forward + backward over one example; returns (loss, prediction psnr,
/// gradients scaled by `1/scale`).
fn example_gradients<E: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<E>,
    ex: &TrainExample,
    scale: f64,
) -> Result<(f64, f64, ParamSet<E>)> {
    let mut fp = forward(
        cfg,
        params,
        &ex.sources,
        &ex.target_rays,
        ForwardOptions {
            train: true,
            capture_features: false,
        },
    )?;
    let gt = fp.tape.constant(ex.target_image.cast());
    let loss = loss_var(&mut fp.tape, fp.image, gt, cfg)?;
    fp.tape.backward(loss)?;
    let loss_val = fp.tape.value(loss)[0].to_f64();
    let pred = fp.predicted_image();
    let p = psnr(&pred, &ex.target_image)?;
    let mut grads = params.zeros_like();
    for (name, t) in grads.iter_mut() {
        let g = fp
            .tape
            .grad(fp.vars[name])
            .ok_or_else(|| Error::Numeric(format!("no gradient for '{name}'")))?;
        for (a, &gi) in t.data_mut().iter_mut().zip(g) {
            *a = E::from_f64(gi.to_f64() / scale);
        }
    }
    Ok((loss_val, p, grads))
}

/// Gradients for a whole batch, one thread per example. Results are folded in
/// batch order, so the outcome is independent of scheduling.
fn batch_gradients<E: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<E>,
    batch: &[TrainExample],
) -> Result<(f64, f64, ParamSet<E>)> {
    let scale = batch.len() as f64;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    // Threads buy nothing on a single core; skip the spawn/join overhead there.
    let results: Vec<Result<(f64, f64, ParamSet<E>)>> = if cores > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|ex| s.spawn(move || example_gradients(cfg, params, ex, scale)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Numeric("training worker panicked".into())))
                })
                .collect()
        })
    } else {
        batch
            .iter()
            .map(|ex| example_gradients(cfg, params, ex, scale))
            .collect()
    };
    let mut grads = params.zeros_like();
    let (mut loss_sum, mut psnr_sum) = (0.0, 0.0);
    for r in results {
        let (l, p, g) = r?;
        loss_sum += l;
        psnr_sum += p;
        for (name, t) in grads.iter_mut() {
            for (a, &b) in t.data_mut().iter_mut().zip(g.get(name)?.data()) {
                *a += b;
            }
        }
    }
    Ok((loss_sum / scale, psnr_sum / scale, grads))
}

/// Prediction PSNR of `params` on one example.
pub fn eval_psnr<E: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<E>,
    ex: &TrainExample,
) -> Result<f64> {
    let fp = forward(cfg, params, &ex.sources, &ex.target_rays, ForwardOptions::default())?;
    psnr(&fp.predicted_image(), &ex.target_image)
}

/// Score `params` on held-out scenes: `examples_per_scene` clean-target
/// examples per scene, averaged, then aggregated across scenes.
pub fn evaluate<E: Scalar>(
    mcfg: &ModelConfig,
    params: &ParamSet<E>,
    scenes: &[SceneRecord],
    n_sources: usize,
    examples_per_scene: usize,
    seed: u64,
) -> Result<MetricReport> {
    if examples_per_scene == 0 {
        return Err(Error::Argument("need at least one example per scene".into()));
    }
    let mut rows = Vec::with_capacity(scenes.len());
    for (si, scene) in scenes.iter().enumerate() {
        let mut rng = Rng::new(seed, si as u64);
        let (mut psum, mut ssum) = (0.0, 0.0);
        for _ in 0..examples_per_scene {
            let ex = sample_example(scene, n_sources, RolePolicy::CleanTarget, &mut rng)?;
            let fp = forward(mcfg, params, &ex.sources, &ex.target_rays, ForwardOptions::default())?;
            let pred = fp.predicted_image();
            psum += psnr(&pred, &ex.target_image)?;
            ssum += ssim(&pred, &ex.target_image)?;
        }
        rows.push(SceneScore {
            scene_id: scene.id.clone(),
            psnr: psum / examples_per_scene as f64,
            ssim: ssum / examples_per_scene as f64,
        });
    }
    MetricReport::from_scenes(rows, examples_per_scene, mcfg.digest())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps_done: u64,
    pub last_loss: f64,
    pub last_psnr_raw: f64,
    pub last_psnr_ema: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

const DATA_STREAM_SALT: u64 = 0x64617461;

/// Deterministic batch for a given step.
fn step_batch(
    cfg: &TrainConfig,
    scenes: &[SceneRecord],
    step: u64,
) -> Result<Vec<TrainExample>> {
    let mut rng = Rng::new(cfg.seed ^ DATA_STREAM_SALT, step);
    (0..cfg.batch_size)
        .map(|_| {
            let s = rng.below(scenes.len() as u64) as usize;
            sample_example(&scenes[s], cfg.n_sources, cfg.policy, &mut rng)
        })
        .collect()
}

/// Train (or resume) on `scenes`, writing `metrics.csv` and `checkpoint.bin`
/// under `out_dir`. Resuming from a checkpoint written by this function
/// reproduces the uninterrupted run bit for bit: the data stream is re-derived
/// from (seed, step) and the optimizer moments travel with the checkpoint.
///
/// A non-finite loss or gradient aborts with an error *before* the checkpoint
/// is overwritten, so the last good state survives.
pub fn train<E: Scalar>(
    cfg: &TrainConfig,
    scenes: &[SceneRecord],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("no scenes to train on".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let ck_path = out_dir.join("checkpoint.bin");
    let metrics_path = out_dir.join("metrics.csv");

    let (mut params, mut ema, mut m, mut v, start_step) = match resume {
        Some(path) => {
            let ck: Checkpoint<E> = Checkpoint::load(path)?;
            if ck.config != cfg.model {
                return Err(Error::Config(
                    "checkpoint model configuration does not match the run".into(),
                ));
            }
            if ck.step >= cfg.steps {
                return Err(Error::Argument(format!(
                    "checkpoint is already at step {} of {}",
                    ck.step, cfg.steps
                )));
            }
            let (m, v) = ck.optim.ok_or_else(|| {
                Error::Format("checkpoint has no optimizer state; cannot resume".into())
            })?;
            (ck.params, ck.ema, m, v, ck.step)
        }
        None => {
            let params: ParamSet<E> = init_params(&cfg.model, &mut Rng::new(cfg.seed, 0))?;
            let ema = params.clone();
            let m = params.zeros_like();
            let v = params.zeros_like();
            (params, ema, m, v, 0)
        }
    };

    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    if start_step == 0 {
        writeln!(metrics_file, "step,lr,loss,psnr_raw,psnr_ema")
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    }

    let end = cfg.run_until.unwrap_or(cfg.steps);
    if start_step >= end {
        return Err(Error::Argument(format!(
            "nothing to do: resuming at step {start_step} with end {end}"
        )));
    }
    let mut last = (f64::NAN, f64::NAN, f64::NAN); // loss, psnr_raw, psnr_ema
    for step0 in start_step..end {
        let step = step0 + 1; // 1-based
        let lr = lr_at(step, cfg.warmup, cfg.steps, cfg.lr_peak)?;
        let batch = step_batch(cfg, scenes, step)?;
        let (loss, psnr_raw, grads) = batch_gradients(&cfg.model, &params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became non-finite at step {step}; last good checkpoint: {}",
                ck_path.display()
            )));
        }
        adamw_step(
            &mut params,
            &grads,
            &mut m,
            &mut v,
            step,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.weight_decay,
        )?;
        ema_update(&mut ema, &params, cfg.ema_decay)?;

        if step % cfg.log_every == 0 || step == end {
            let psnr_ema = eval_psnr(&cfg.model, &ema, &batch[0])?;
            writeln!(metrics_file, "{step},{lr},{loss},{psnr_raw},{psnr_ema}")
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            last = (loss, psnr_raw, psnr_ema);
        } else {
            last = (loss, psnr_raw, last.2);
        }

        if step % cfg.checkpoint_every == 0 || step == end {
            let ck = Checkpoint {
                config: cfg.model,
                step,
                rng_state: Rng::new(cfg.seed ^ DATA_STREAM_SALT, step).state(),
                params: params.clone(),
                ema: ema.clone(),
                optim: Some((m.clone(), v.clone())),
            };
            ck.save(&ck_path)?;
        }
    }

    Ok(TrainOutcome {
        steps_done: end,
        last_loss: last.0,
        last_psnr_raw: last.1,
        last_psnr_ema: last.2,
        checkpoint: ck_path,
        metrics: metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockVariant;
    use crate::datapipe::{generate_scene, GenConfig};
    use crate::model::PerceptualMode;
    use crate::tensor::Tensor;

    #[test]
    fn lr_schedule_shape() {
        let (warmup, total, peak) = (100u64, 1000u64, 2e-4);
        assert!(lr_at(0, warmup, total, peak).is_err());
        assert!(lr_at(1001, warmup, total, peak).is_err());
        assert!((lr_at(50, warmup, total, peak).unwrap() - 1e-4).abs() < 1e-18);
        assert!((lr_at(100, warmup, total, peak).unwrap() - peak).abs() < 1e-18);
        assert!((lr_at(550, warmup, total, peak).unwrap() - peak * 0.5).abs() < 1e-18);
        assert_eq!(lr_at(1000, warmup, total, peak).unwrap(), 0.0);
        assert!(lr_at(5, 10, 10, peak).is_err());
    }

    fn singleton_set(name: &str, vals: &[f64]) -> ParamSet<f64> {
        let mut s = ParamSet::new();
        s.insert(name, Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        // minimize 0.5 * p^2; gradient is p
        let mut p = singleton_set("w", &[4.0, -3.0]);
        let mut m = p.zeros_like();
        let mut v = p.zeros_like();
        for t in 1..=300 {
            let grads = p.clone(); // d/dp 0.5 p^2 = p
            adamw_step(&mut p, &grads, &mut m, &mut v, t, 0.05, 0.9, 0.95, 0.0).unwrap();
        }
        for &w in p.get("w").unwrap().data() {
            assert!(w.abs() < 0.5, "did not descend: {w}");
        }
    }

    #[test]
    fn weight_decay_skips_norm_params() {
        let mut p = singleton_set("block00.attn.q.w", &[1.0]);
        p.insert("block00.ln.gain", Tensor::new(vec![1], vec![1.0]).unwrap());
        let grads = p.zeros_like();
        let mut m = p.zeros_like();
        let mut v = p.zeros_like();
        adamw_step(&mut p, &grads, &mut m, &mut v, 1, 0.1, 0.9, 0.95, 0.5).unwrap();
        // zero gradient: the only change is decoupled decay
        assert!((p.get("block00.attn.q.w").unwrap().data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(p.get("block00.ln.gain").unwrap().data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_names_the_param() {
        let mut p = singleton_set("embed.src.w", &[1.0]);
        let grads = singleton_set("embed.src.w", &[f64::NAN]);
        let mut m = p.zeros_like();
        let mut v = p.zeros_like();
        let err = adamw_step(&mut p, &grads, &mut m, &mut v, 1, 0.1, 0.9, 0.95, 0.0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("embed.src.w"), "{err}");
    }

    #[test]
    fn ema_blends_toward_params() {
        let mut ema = singleton_set("w", &[0.0]);
        let p = singleton_set("w", &[10.0]);
        ema_update(&mut ema, &p, 0.9).unwrap();
        assert!((ema.get("w").unwrap().data()[0] - 1.0).abs() < 1e-12);
    }

    fn tiny_train_cfg(steps: u64, seed: u64) -> TrainConfig {
        let model = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            patch: 4,
            variant: BlockVariant::TokD,
            lambda_perceptual: 0.5,
            perceptual: PerceptualMode::Off,
            image_size: (8, 8),
        };
        TrainConfig {
            steps,
            batch_size: 2,
            n_sources: 1,
            warmup: 2.min(steps - 1).max(1),
            log_every: 2,
            checkpoint_every: 2,
            seed,
            ..TrainConfig::desk_default(model)
        }
    }

    fn tiny_scenes(image_size: (usize, usize)) -> Vec<SceneRecord> {
        let cfg = GenConfig {
            n_scenes: 3,
            views_per_scene: 4,
            image_size,
            focal: image_size.1 as f64,
            synthetic_fraction: 0.25,
            severity: 0.5,
            seed: 5,
        };
        (0..cfg.n_scenes).map(|i| generate_scene(&cfg, i).unwrap()).collect()
    }

    #[test]
    fn training_runs_and_logs() {
        let cfg = tiny_train_cfg(4, 1);
        let scenes = tiny_scenes(cfg.model.image_size);
        let dir = tempfile::tempdir().unwrap();
        let out = train::<f32>(&cfg, &scenes, dir.path(), None).unwrap();
        assert_eq!(out.steps_done, 4);
        assert!(out.last_loss.is_finite());
        let csv = std::fs::read_to_string(&out.metrics).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,lr,loss,psnr_raw,psnr_ema");
        assert_eq!(lines.len(), 3); // header + steps 2 and 4
        let ck = Checkpoint::<f32>::load(&out.checkpoint).unwrap();
        assert_eq!(ck.step, 4);
        assert!(ck.optim.is_some());
    }

    #[test]
    fn resume_is_bitwise_identical() {
        let scenes = tiny_scenes((8, 8));
        let full_dir = tempfile::tempdir().unwrap();
        let split_dir = tempfile::tempdir().unwrap();

        let cfg4 = tiny_train_cfg(4, 2);
        let full = train::<f32>(&cfg4, &scenes, full_dir.path(), None).unwrap();

        let cfg2 = TrainConfig {
            run_until: Some(2),
            ..cfg4
        };
        train::<f32>(&cfg2, &scenes, split_dir.path(), None).unwrap();
        let resumed = train::<f32>(
            &cfg4,
            &scenes,
            split_dir.path(),
            Some(&split_dir.path().join("checkpoint.bin")),
        )
        .unwrap();

        let a = Checkpoint::<f32>::load(&full.checkpoint).unwrap();
        let b = Checkpoint::<f32>::load(&resumed.checkpoint).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes(), "resumed run diverged");

        // the split run's metrics are the same rows as the full run's
        let ma = std::fs::read_to_string(&full.metrics).unwrap();
        let mb = std::fs::read_to_string(&resumed.metrics).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn resume_rejects_config_mismatch() {
        let scenes = tiny_scenes((8, 8));
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train_cfg(2, 3);
        train::<f32>(&cfg, &scenes, dir.path(), None).unwrap();
        let mut cfg2 = tiny_train_cfg(4, 3);
        cfg2.model.d_model = 32;
        let err = train::<f32>(&cfg2, &scenes, dir.path(), Some(&dir.path().join("checkpoint.bin")));
        assert!(err.is_err());
    }

    #[test]
    fn loss_decreases_on_short_run() {
        let mut cfg = tiny_train_cfg(30, 4);
        cfg.warmup = 5;
        cfg.log_every = 1;
        let scenes = tiny_scenes(cfg.model.image_size);
        let dir = tempfile::tempdir().unwrap();
        let out = train::<f32>(&cfg, &scenes, dir.path(), None).unwrap();
        let csv = std::fs::read_to_string(&out.metrics).unwrap();
        let losses: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }
}

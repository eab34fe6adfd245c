//! Full view-synthesis model: embed source images and target rays, run the
//! transformer stack, detokenize target tokens, compute the training loss.
//! Also owns the checkpoint file format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use crate::blocks::{
    block_forward, compute_styles, BlockVariant, BlockVars, LayerNormVars, ModHeadVars, StyleVars,
    Styles,
};
use crate::error::{Error, Result};
use crate::geometry::PluckerMap;
use crate::nn::{AttentionVars, FfnVars};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{source_patch_rows, target_patch_rows, TokenRoles};

pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerceptualMode {
    /// Perceptual term contributes exactly zero.
    Off,
    /// Mean absolute difference of finite-difference image gradients.
    GradientDiff,
}

impl PerceptualMode {
    pub fn tag(&self) -> u8 {
        match self {
            PerceptualMode::Off => 0,
            PerceptualMode::GradientDiff => 1,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(PerceptualMode::Off),
            1 => Ok(PerceptualMode::GradientDiff),
            other => Err(Error::Format(format!("unknown perceptual tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch: usize,
    pub variant: BlockVariant,
    pub lambda_perceptual: f64,
    pub perceptual: PerceptualMode,
    /// (height, width)
    pub image_size: (usize, usize),
}

impl ModelConfig {
    /// Small CPU-friendly defaults.
    pub fn desk_default(variant: BlockVariant) -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 6,
            n_heads: 4,
            patch: 8,
            variant,
            lambda_perceptual: 0.5,
            perceptual: PerceptualMode::Off,
            image_size: (64, 64),
        }
    }

    /// Published configuration, used for parameter/FLOP accounting only.
    pub fn published_scale(variant: BlockVariant) -> Self {
        ModelConfig {
            d_model: 1024,
            n_layers: 24,
            n_heads: 16,
            patch: 8,
            variant,
            lambda_perceptual: 0.5,
            perceptual: PerceptualMode::Off,
            image_size: (256, 256),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        let (h, w) = self.image_size;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible by patch {}",
                self.patch
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("need at least one layer".into()));
        }
        Ok(())
    }

    /// FNV-1a hash of the configuration, for tagging metric reports.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for v in [
            self.d_model as u64,
            self.n_layers as u64,
            self.n_heads as u64,
            self.patch as u64,
            self.variant.tag() as u64,
            self.perceptual.tag() as u64,
            self.image_size.0 as u64,
            self.image_size.1 as u64,
        ] {
            eat(&v.to_le_bytes());
        }
        eat(&self.lambda_perceptual.to_le_bytes());
        h
    }

    pub fn d_style(&self) -> usize {
        self.d_model
    }

    pub fn tokens_per_view(&self) -> usize {
        let (h, w) = self.image_size;
        (h / self.patch) * (w / self.patch)
    }
}

/// Named parameter arrays in deterministic (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<E: Scalar> {
    entries: BTreeMap<String, Tensor<E>>,
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<E>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn cast<F: Scalar>(&self) -> ParamSet<F> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Same names, all-zero arrays.
    pub fn zeros_like(&self) -> ParamSet<E> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }
}

/// Normalization-layer parameters (and QK-norm temperatures) are exempt from
/// weight decay.
pub fn is_norm_param(name: &str) -> bool {
    name.contains(".ln.") || name.ends_with(".temps")
}

fn linear_init<E: Scalar>(
    params: &mut ParamSet<E>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut Rng,
) {
    let std = 1.0 / (d_in as f64).sqrt();
    params.insert(format!("{prefix}.w"), Tensor::randn(vec![d_in, d_out], std, rng));
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![d_out]));
}

/// Fresh model parameters. Modulation heads start at zero so the modulated
/// variants reduce exactly to the plain block.
pub fn init_params<E: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamSet<E>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let p = cfg.patch;
    let mut params = ParamSet::new();

    linear_init(&mut params, "embed.src", 9 * p * p, d, rng);
    linear_init(&mut params, "embed.tgt", 6 * p * p, d, rng);
    linear_init(&mut params, "detok", d, 3 * p * p, rng);

    for l in 0..cfg.n_layers {
        let b = format!("block{l:02}");
        linear_init(&mut params, &format!("{b}.attn.q"), d, d, rng);
        linear_init(&mut params, &format!("{b}.attn.k"), d, d, rng);
        linear_init(&mut params, &format!("{b}.attn.v"), d, d, rng);
        linear_init(&mut params, &format!("{b}.attn.o"), d, d, rng);
        params.insert(format!("{b}.attn.temps"), Tensor::full(vec![cfg.n_heads], E::one()));
        params.insert(format!("{b}.ln.gain"), Tensor::full(vec![d], E::one()));
        params.insert(format!("{b}.ln.bias"), Tensor::zeros(vec![d]));
        linear_init(&mut params, &format!("{b}.ffn.in"), d, FFN_MULT * d, rng);
        linear_init(&mut params, &format!("{b}.ffn.out"), FFN_MULT * d, d, rng);

        if cfg.variant.has_pre_modulation() {
            params.insert(format!("{b}.mod.pre_attn.w"), Tensor::zeros(vec![cfg.d_style(), 2 * d]));
            params.insert(format!("{b}.mod.pre_attn.b"), Tensor::zeros(vec![2 * d]));
            params.insert(format!("{b}.mod.pre_ffn.w"), Tensor::zeros(vec![cfg.d_style(), 2 * d]));
            params.insert(format!("{b}.mod.pre_ffn.b"), Tensor::zeros(vec![2 * d]));
        }
        if cfg.variant.has_post_modulation() {
            params.insert(format!("{b}.mod.post_attn.w"), Tensor::zeros(vec![cfg.d_style(), d]));
            params.insert(format!("{b}.mod.post_attn.b"), Tensor::zeros(vec![d]));
            params.insert(format!("{b}.mod.post_ffn.w"), Tensor::zeros(vec![cfg.d_style(), d]));
            params.insert(format!("{b}.mod.post_ffn.b"), Tensor::zeros(vec![d]));
        }
    }

    if cfg.variant.has_pre_modulation() {
        let ds = cfg.d_style();
        params.insert("style.table".to_string(), Tensor::randn(vec![2, ds], 1.0, rng));
        linear_init(&mut params, "style.map", ds, ds, rng);
    }
    Ok(params)
}

/// A model forward pass: the tape, parameter handles, and outputs.
pub struct ForwardPass<E: Scalar> {
    pub tape: Tape<E>,
    pub vars: BTreeMap<String, Var>,
    /// Predicted image, [H, W, 3], values in (0, 1).
    pub image: Var,
    /// Per-block output tokens, captured when requested.
    pub features: Vec<Var>,
    pub roles: TokenRoles,
}

impl<E: Scalar> ForwardPass<E> {
    pub fn predicted_image(&self) -> Tensor<f64> {
        self.tape.value_tensor(self.image).map(|v| v.to_f64())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Track gradients for all parameters.
    pub train: bool,
    /// Record each block's output tokens.
    pub capture_features: bool,
}

struct ModelVars {
    blocks: Vec<BlockVars>,
    styles: Option<Styles>,
}

fn bind_vars<E: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<E>,
    vars: &BTreeMap<String, Var>,
) -> Result<ModelVars> {
    let get = |name: &str| -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    };
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let b = format!("block{l:02}");
        let head = |site: &str| -> Result<ModHeadVars> {
            Ok(ModHeadVars {
                w: get(&format!("{b}.mod.{site}.w"))?,
                b: get(&format!("{b}.mod.{site}.b"))?,
            })
        };
        blocks.push(BlockVars {
            attn: AttentionVars {
                wq: get(&format!("{b}.attn.q.w"))?,
                bq: get(&format!("{b}.attn.q.b"))?,
                wk: get(&format!("{b}.attn.k.w"))?,
                bk: get(&format!("{b}.attn.k.b"))?,
                wv: get(&format!("{b}.attn.v.w"))?,
                bv: get(&format!("{b}.attn.v.b"))?,
                wo: get(&format!("{b}.attn.o.w"))?,
                bo: get(&format!("{b}.attn.o.b"))?,
                temps: get(&format!("{b}.attn.temps"))?,
            },
            ffn: FfnVars {
                w1: get(&format!("{b}.ffn.in.w"))?,
                b1: get(&format!("{b}.ffn.in.b"))?,
                w2: get(&format!("{b}.ffn.out.w"))?,
                b2: get(&format!("{b}.ffn.out.b"))?,
            },
            ln: LayerNormVars {
                gain: get(&format!("{b}.ln.gain"))?,
                bias: get(&format!("{b}.ln.bias"))?,
            },
            pre_attn: cfg.variant.has_pre_modulation().then(|| head("pre_attn")).transpose()?,
            pre_ffn: cfg.variant.has_pre_modulation().then(|| head("pre_ffn")).transpose()?,
            post_attn: cfg.variant.has_post_modulation().then(|| head("post_attn")).transpose()?,
            post_ffn: cfg.variant.has_post_modulation().then(|| head("post_ffn")).transpose()?,
        });
    }
    let styles = if cfg.variant.has_pre_modulation() {
        let sv = StyleVars {
            table: get("style.table")?,
            w: get("style.map.w")?,
            b: get("style.map.b")?,
        };
        Some(compute_styles(tape, &sv)?)
    } else {
        None
    };
    Ok(ModelVars { blocks, styles })
}

/// Flat-index permutation mapping patch-row layout to image layout.
fn unpatchify_perm(h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let gw = w / p;
    let patch_len = p * p * c;
    let mut perm = Vec::with_capacity(h * w * c);
    for row in 0..h {
        for col in 0..w {
            let (gy, gx) = (row / p, col / p);
            let (py, px) = (row % p, col % p);
            let base = (gy * gw + gx) * patch_len + (py * p + px) * c;
            for ch in 0..c {
                perm.push(base + ch);
            }
        }
    }
    perm
}

/// Run the model on source views and a target ray map.
pub fn forward<E: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<E>,
    sources: &[(Tensor<f64>, PluckerMap)],
    target_rays: &PluckerMap,
    opts: ForwardOptions,
) -> Result<ForwardPass<E>> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Argument("forward requires at least one source view".into()));
    }
    let (h, w) = cfg.image_size;
    for (img, plk) in sources {
        if img.shape() != [h, w, 3] {
            return Err(Error::Dimension(format!(
                "source image shape {:?}, expected [{h}, {w}, 3]",
                img.shape()
            )));
        }
        if plk.height != h || plk.width != w {
            return Err(Error::Dimension("source ray map size mismatch".into()));
        }
    }
    if target_rays.height != h || target_rays.width != w {
        return Err(Error::Dimension("target ray map size mismatch".into()));
    }

    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, t) in params.iter() {
        vars.insert(name.clone(), tape.input(t.clone(), opts.train));
    }
    let mv = bind_vars(cfg, &mut tape, &vars)?;

    let get = |name: &str| vars[name];
    let mut token_groups = Vec::with_capacity(sources.len() + 1);
    for (img, plk) in sources {
        let rows = source_patch_rows(img, plk, cfg.patch)?.cast::<E>();
        let rv = tape.constant(rows);
        token_groups.push(tape.linear(rv, get("embed.src.w"), Some(get("embed.src.b")))?);
    }
    let trows = target_patch_rows(target_rays, cfg.patch)?.cast::<E>();
    let tv = tape.constant(trows);
    token_groups.push(tape.linear(tv, get("embed.tgt.w"), Some(get("embed.tgt.b")))?);
    let mut x = tape.concat_rows(&token_groups)?;

    let per_view = cfg.tokens_per_view();
    let roles = TokenRoles::new(sources.len(), per_view, per_view);
    let n_src = sources.len() * per_view;

    let mut features = Vec::new();
    for bv in &mv.blocks {
        x = block_forward(&mut tape, x, n_src, cfg.n_heads, bv, mv.styles.as_ref(), cfg.variant)?;
        if opts.capture_features {
            features.push(x);
        }
    }

    // only target tokens are decoded; source token outputs are discarded
    let tgt_tokens = tape.slice_rows(x, n_src, per_view)?;
    let logits = tape.linear(tgt_tokens, get("detok.w"), Some(get("detok.b")))?;
    let patches = tape.sigmoid(logits);
    let perm = Rc::new(unpatchify_perm(h, w, 3, cfg.patch));
    let image = tape.permute(patches, perm, vec![h, w, 3])?;

    Ok(ForwardPass {
        tape,
        vars,
        image,
        features,
        roles,
    })
}

/// Training loss on the tape: MSE plus the optional perceptual term.
pub fn loss_var<E: Scalar>(
    tape: &mut Tape<E>,
    pred: Var,
    gt: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    if tape.shape(pred) != tape.shape(gt) {
        return Err(Error::Dimension(format!(
            "loss: prediction {:?} vs ground truth {:?}",
            tape.shape(pred),
            tape.shape(gt)
        )));
    }
    let mse = tape.mse(pred, gt)?;
    match cfg.perceptual {
        PerceptualMode::Off => Ok(mse),
        PerceptualMode::GradientDiff => {
            let shape = tape.shape(pred).to_vec();
            let (h, wc) = (shape[0], shape[1] * shape[2]);
            let c = shape[2];
            let p2 = tape.reshape(pred, vec![h, wc])?;
            let g2 = tape.reshape(gt, vec![h, wc])?;
            let mut terms = Vec::new();
            // horizontal neighbors (offset by one pixel = c columns)
            for (img, sign) in [(p2, 1.0), (g2, -1.0)] {
                let a = tape.slice_cols(img, c, wc - c)?;
                let b = tape.slice_cols(img, 0, wc - c)?;
                let d = tape.sub(a, b)?;
                terms.push(tape.scale(d, sign));
            }
            let dx = tape.add(terms[0], terms[1])?;
            let dx = tape.abs(dx);
            let dx = tape.mean_all(dx);
            // vertical neighbors
            let mut vterms = Vec::new();
            for (img, sign) in [(p2, 1.0), (g2, -1.0)] {
                let a = tape.slice_rows(img, 1, h - 1)?;
                let b = tape.slice_rows(img, 0, h - 1)?;
                let d = tape.sub(a, b)?;
                vterms.push(tape.scale(d, sign));
            }
            let dy = tape.add(vterms[0], vterms[1])?;
            let dy = tape.abs(dy);
            let dy = tape.mean_all(dy);
            let percep = tape.add(dx, dy)?;
            let weighted = tape.scale(percep, cfg.lambda_perceptual);
            tape.add(mse, weighted)
        }
    }
}

/// Loss of two concrete images (no gradients).
pub fn loss_value(pred: &Tensor<f64>, gt: &Tensor<f64>, cfg: &ModelConfig) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(pred.clone());
    let g = tape.constant(gt.clone());
    let l = loss_var(&mut tape, p, g, cfg)?;
    Ok(tape.value(l)[0])
}

/// Analytic-versus-central-difference check of the training-loss gradient over
/// the entire model. Samples `entries_per_param` entries from every parameter
/// and returns the worst error, measured relative to the infinity norm of that
/// parameter's gradient so accidentally tiny entries do not dominate.
pub fn model_grad_check(
    cfg: &ModelConfig,
    params: &ParamSet<f64>,
    sources: &[(Tensor<f64>, PluckerMap)],
    target_rays: &PluckerMap,
    gt: &Tensor<f64>,
    step: f64,
    entries_per_param: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let fp = forward(cfg, p, sources, target_rays, ForwardOptions::default())?;
        loss_value(&fp.predicted_image(), gt, cfg)
    };

    let mut fp = forward(
        cfg,
        params,
        sources,
        target_rays,
        ForwardOptions {
            train: true,
            capture_features: false,
        },
    )?;
    let gtv = fp.tape.constant(gt.cast());
    let loss = loss_var(&mut fp.tape, fp.image, gtv, cfg)?;
    fp.tape.backward(loss)?;

    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for name in &names {
        let grad = fp
            .tape
            .grad(fp.vars[name])
            .ok_or_else(|| Error::Numeric(format!("no gradient recorded for '{name}'")))?
            .to_vec();
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-8);
        let n_el = grad.len();
        for i in rng.sample_indices(n_el, entries_per_param.min(n_el)) {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + step;
            let lp = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - step;
            let lm = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let err = (grad[i] - fd).abs() / scale;
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

// ---- checkpoint format ----

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TOKD0001";

/// Serialized training state: parameters, EMA shadows, and (when present)
/// optimizer moments so that resumed runs reproduce the original trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<E: Scalar> {
    pub config: ModelConfig,
    pub step: u64,
    pub rng_state: (u64, u64, u64),
    pub params: ParamSet<E>,
    pub ema: ParamSet<E>,
    pub optim: Option<(ParamSet<E>, ParamSet<E>)>,
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_param_set<E: Scalar>(out: &mut Vec<u8>, set: &ParamSet<E>) {
    write_u32(out, set.len() as u32);
    for (name, t) in set.iter() {
        write_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        write_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            write_u64(out, d as u64);
        }
        for &v in t.data() {
            v.to_le_bytes(out);
        }
    }
}

fn read_param_set<E: Scalar>(r: &mut Reader) -> Result<ParamSet<E>> {
    let count = r.u32()? as usize;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("invalid parameter name".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * E::BYTES)?;
        let data: Vec<E> = bytes.chunks(E::BYTES).map(E::from_le_bytes).collect();
        set.insert(name, Tensor::new(shape, data)?);
    }
    Ok(set)
}

impl<E: Scalar> Checkpoint<E> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let c = &self.config;
        write_u32(&mut out, c.d_model as u32);
        write_u32(&mut out, c.n_layers as u32);
        write_u32(&mut out, c.n_heads as u32);
        write_u32(&mut out, c.patch as u32);
        out.push(c.variant.tag());
        write_f64(&mut out, c.lambda_perceptual);
        out.push(c.perceptual.tag());
        write_u32(&mut out, c.image_size.0 as u32);
        write_u32(&mut out, c.image_size.1 as u32);
        write_u64(&mut out, self.step);
        write_u64(&mut out, self.rng_state.0);
        write_u64(&mut out, self.rng_state.1);
        write_u64(&mut out, self.rng_state.2);
        out.push(E::BYTES as u8);
        write_param_set(&mut out, &self.params);
        write_param_set(&mut out, &self.ema);
        match &self.optim {
            None => out.push(0),
            Some((m, v)) => {
                out.push(1);
                write_param_set(&mut out, m);
                write_param_set(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let d_model = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let n_heads = r.u32()? as usize;
        let patch = r.u32()? as usize;
        let variant = BlockVariant::from_tag(r.u8()?)?;
        let lambda_perceptual = r.f64()?;
        let perceptual = PerceptualMode::from_tag(r.u8()?)?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let step = r.u64()?;
        let rng_state = (r.u64()?, r.u64()?, r.u64()?);
        let dtype = r.u8()? as usize;
        if dtype != E::BYTES {
            return Err(Error::Format(format!(
                "checkpoint stores {dtype}-byte floats, expected {}",
                E::BYTES
            )));
        }
        let config = ModelConfig {
            d_model,
            n_layers,
            n_heads,
            patch,
            variant,
            lambda_perceptual,
            perceptual,
            image_size: (h, w),
        };
        let params = read_param_set(&mut r)?;
        let ema = read_param_set(&mut r)?;
        let optim = match r.u8()? {
            0 => None,
            1 => Some((read_param_set(&mut r)?, read_param_set(&mut r)?)),
            other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            step,
            rng_state,
            params,
            ema,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Checkpoint::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{plucker_map, Intrinsics, Pose};

    fn tiny_cfg(variant: BlockVariant) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            patch: 2,
            variant,
            lambda_perceptual: 0.5,
            perceptual: PerceptualMode::Off,
            image_size: (4, 4),
        }
    }

    fn tiny_inputs(cfg: &ModelConfig, seed: u64) -> (Vec<(Tensor<f64>, PluckerMap)>, PluckerMap, Tensor<f64>) {
        let (h, w) = cfg.image_size;
        let intr = Intrinsics::centered(w as f64, w, h);
        let src_pose = Pose::look_at([0.0, 0.5, -3.0], [0.0, 0.0, 0.0]);
        let tgt_pose = Pose::look_at([0.5, 0.0, -3.0], [0.0, 0.0, 0.0]);
        let mut rng = Rng::new(seed, 0);
        let img = Tensor::new(
            vec![h, w, 3],
            (0..h * w * 3).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let gt = Tensor::new(
            vec![h, w, 3],
            (0..h * w * 3).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let sources = vec![(img, plucker_map(&intr, &src_pose))];
        (sources, plucker_map(&intr, &tgt_pose), gt)
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk_default(BlockVariant::Plain);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk_default(BlockVariant::Plain);
        c.image_size = (63, 64);
        assert!(c.validate().is_err());
    }

    #[test]
    fn norm_param_tagging() {
        assert!(is_norm_param("block03.ln.gain"));
        assert!(is_norm_param("block00.attn.temps"));
        assert!(!is_norm_param("block00.attn.q.w"));
        assert!(!is_norm_param("detok.b"));
    }

    #[test]
    fn plain_variant_has_no_modulation_params() {
        let rng = Rng::new(0, 0);
        let plain: ParamSet<f64> =
            init_params(&tiny_cfg(BlockVariant::Plain), &mut rng.derive(0)).unwrap();
        let tokd: ParamSet<f64> =
            init_params(&tiny_cfg(BlockVariant::TokD), &mut rng.derive(0)).unwrap();
        let plus: ParamSet<f64> =
            init_params(&tiny_cfg(BlockVariant::TokDPlus), &mut rng.derive(0)).unwrap();
        assert!(plain.iter().all(|(n, _)| !n.contains(".mod.") && !n.starts_with("style.")));
        assert!(tokd.iter().any(|(n, _)| n.contains(".mod.pre_attn.")));
        assert!(tokd.iter().all(|(n, _)| !n.contains(".mod.post_")));
        assert!(plus.iter().any(|(n, _)| n.contains(".mod.post_ffn.")));
        // modulation heads start at zero
        for (n, t) in tokd.iter().chain(plus.iter()) {
            if n.contains(".mod.") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{n} not zero");
            }
        }
    }

    #[test]
    fn forward_output_shape_and_range() {
        let cfg = tiny_cfg(BlockVariant::TokDPlus);
        let mut rng = Rng::new(1, 0);
        let params: ParamSet<f64> = init_params(&cfg, &mut rng).unwrap();
        let (sources, tgt, _) = tiny_inputs(&cfg, 2);
        let fp = forward(&cfg, &params, &sources, &tgt, ForwardOptions::default()).unwrap();
        let img = fp.predicted_image();
        assert_eq!(img.shape(), &[4, 4, 3]);
        assert!(img.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(fp.roles.n_source(), 4);
        assert_eq!(fp.roles.n_target(), 4);
    }

    #[test]
    fn fresh_variants_predict_identically() {
        // zero-initialized modulation heads: all three variants are the same
        // function of the shared weights, bit for bit.
        let (sources, tgt, _) = tiny_inputs(&tiny_cfg(BlockVariant::Plain), 3);
        let mut out = Vec::new();
        for v in [BlockVariant::Plain, BlockVariant::TokD, BlockVariant::TokDPlus] {
            let cfg = tiny_cfg(v);
            let params: ParamSet<f64> = init_params(&cfg, &mut Rng::new(7, 0)).unwrap();
            let fp = forward(&cfg, &params, &sources, &tgt, ForwardOptions::default()).unwrap();
            out.push(fp.predicted_image());
        }
        assert_eq!(out[0].data(), out[1].data());
        assert_eq!(out[0].data(), out[2].data());
    }

    #[test]
    fn feature_capture_counts_layers() {
        let cfg = tiny_cfg(BlockVariant::Plain);
        let params: ParamSet<f64> = init_params(&cfg, &mut Rng::new(4, 0)).unwrap();
        let (sources, tgt, _) = tiny_inputs(&cfg, 5);
        let opts = ForwardOptions { train: false, capture_features: true };
        let fp = forward(&cfg, &params, &sources, &tgt, opts).unwrap();
        assert_eq!(fp.features.len(), cfg.n_layers);
        assert_eq!(fp.tape.shape(fp.features[0]), &[8, 8]);
    }

    #[test]
    fn loss_zero_on_identical_images() {
        let cfg = tiny_cfg(BlockVariant::Plain);
        let (_, _, gt) = tiny_inputs(&cfg, 6);
        assert_eq!(loss_value(&gt, &gt, &cfg).unwrap(), 0.0);
        let mut c2 = cfg;
        c2.perceptual = PerceptualMode::GradientDiff;
        assert_eq!(loss_value(&gt, &gt, &c2).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_term_penalizes_gradient_mismatch() {
        // prediction and target differ by a constant: identical image
        // gradients, so the perceptual term adds nothing; a striped
        // prediction with the same MSE scores worse.
        let cfg = {
            let mut c = tiny_cfg(BlockVariant::Plain);
            c.perceptual = PerceptualMode::GradientDiff;
            c
        };
        let gt = Tensor::zeros(vec![4, 4, 3]);
        let flat = Tensor::full(vec![4, 4, 3], 0.1);
        let mut striped = Tensor::zeros(vec![4, 4, 3]);
        for (i, v) in striped.data_mut().iter_mut().enumerate() {
            // same per-pixel magnitude, alternating sign by column
            *v = if (i / 3) % 2 == 0 { 0.1 } else { -0.1 };
        }
        let l_flat = loss_value(&flat, &gt, &cfg).unwrap();
        let l_striped = loss_value(&striped, &gt, &cfg).unwrap();
        let base = tiny_cfg(BlockVariant::Plain);
        assert_eq!(loss_value(&flat, &gt, &base).unwrap(), loss_value(&striped, &gt, &base).unwrap());
        assert!((l_flat - 0.01).abs() < 1e-12, "constant offset adds no gradient term: {l_flat}");
        assert!(l_striped > l_flat + 0.01, "stripes not penalized: {l_striped}");
    }

    #[test]
    fn full_model_gradient_check() {
        for variant in [BlockVariant::Plain, BlockVariant::TokDPlus] {
            let cfg = tiny_cfg(variant);
            let mut rng = Rng::new(8, 0);
            let mut params: ParamSet<f64> = init_params(&cfg, &mut rng).unwrap();
            // move modulation heads off the zero init so their gradients are generic
            for (name, t) in params.iter_mut() {
                if name.contains(".mod.") {
                    for v in t.data_mut() {
                        *v = rng.normal() * 0.2;
                    }
                }
            }
            let (sources, tgt, gt) = tiny_inputs(&cfg, 9);
            let err = model_grad_check(&cfg, &params, &sources, &tgt, &gt, 1e-5, 4, &mut rng)
                .unwrap();
            assert!(err < 1e-4, "{variant:?} rel err {err}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let cfg = tiny_cfg(BlockVariant::TokD);
        let mut rng = Rng::new(10, 0);
        let params: ParamSet<f64> = init_params(&cfg, &mut rng).unwrap();
        let ema = params.clone();
        let m = params.zeros_like();
        let mut v = params.zeros_like();
        for (_, t) in v.iter_mut() {
            for x in t.data_mut() {
                *x = rng.uniform();
            }
        }
        let ck = Checkpoint {
            config: cfg,
            step: 1234,
            rng_state: (1, 2, 3),
            params,
            ema,
            optim: Some((m, v)),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_rejects_wrong_dtype_and_garbage() {
        let cfg = tiny_cfg(BlockVariant::Plain);
        let params: ParamSet<f32> = init_params(&cfg, &mut Rng::new(11, 0)).unwrap();
        let ck = Checkpoint {
            config: cfg,
            step: 0,
            rng_state: (0, 0, 0),
            ema: params.clone(),
            params,
            optim: None,
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"NOTMAGIC").is_err());
    }
}

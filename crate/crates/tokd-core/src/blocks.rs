//! Transformer block variants: the plain baseline block, the input-modulated
//! Tok-D block, and the fully modulated Tok-D-Plus block.
//!
//! Modulation heads are zero-initialized and parameterized as (1 + sigma), so
//! a freshly initialized Tok-D / Tok-D-Plus block computes exactly the plain
//! block. Tokens are laid out sources-first, targets-last; role selection is
//! by row range.

use crate::error::{Error, Result};
use crate::nn::{ffn, mhsa_qknorm, AttentionVars, FfnVars};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockVariant {
    Plain,
    TokD,
    TokDPlus,
}

impl BlockVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockVariant::Plain => "plain",
            BlockVariant::TokD => "tokd",
            BlockVariant::TokDPlus => "tokd-plus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(BlockVariant::Plain),
            "tokd" => Ok(BlockVariant::TokD),
            "tokd-plus" => Ok(BlockVariant::TokDPlus),
            other => Err(Error::Config(format!("unknown block variant '{other}'"))),
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            BlockVariant::Plain => 0,
            BlockVariant::TokD => 1,
            BlockVariant::TokDPlus => 2,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(BlockVariant::Plain),
            1 => Ok(BlockVariant::TokD),
            2 => Ok(BlockVariant::TokDPlus),
            other => Err(Error::Format(format!("unknown variant tag {other}"))),
        }
    }

    pub fn has_pre_modulation(&self) -> bool {
        !matches!(self, BlockVariant::Plain)
    }

    pub fn has_post_modulation(&self) -> bool {
        matches!(self, BlockVariant::TokDPlus)
    }
}

/// Style vectors for the two token roles, computed once per forward pass from
/// the two-row embedding table through a shared linear map.
#[derive(Debug, Clone, Copy)]
pub struct StyleVars {
    /// [2, d_style] embedding table: row 0 source, row 1 target.
    pub table: Var,
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Styles {
    /// [1, d_style]
    pub source: Var,
    pub target: Var,
}

pub fn compute_styles<E: Scalar>(tape: &mut Tape<E>, sv: &StyleVars) -> Result<Styles> {
    let src_row = tape.slice_rows(sv.table, 0, 1)?;
    let tgt_row = tape.slice_rows(sv.table, 1, 1)?;
    Ok(Styles {
        source: tape.linear(src_row, sv.w, Some(sv.b))?,
        target: tape.linear(tgt_row, sv.w, Some(sv.b))?,
    })
}

/// One modulation head: affine map style -> concatenated (sigma, mu) for pre
/// sites, or style -> sigma for post sites.
#[derive(Debug, Clone, Copy)]
pub struct ModHeadVars {
    pub w: Var,
    pub b: Var,
}

impl ModHeadVars {
    /// Evaluate the head for one role; output is [1, out_dim].
    fn eval<E: Scalar>(&self, tape: &mut Tape<E>, style: Var) -> Result<Var> {
        tape.linear(style, self.w, Some(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

/// All tape handles for one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub attn: AttentionVars,
    pub ffn: FfnVars,
    pub ln: LayerNormVars,
    pub pre_attn: Option<ModHeadVars>,
    pub pre_ffn: Option<ModHeadVars>,
    pub post_attn: Option<ModHeadVars>,
    pub post_ffn: Option<ModHeadVars>,
}

/// Per-role (sigma, mu) split out of a pre-modulation head output.
fn split_sigma_mu<E: Scalar>(tape: &mut Tape<E>, head_out: Var, d: usize) -> Result<(Var, Var)> {
    let sigma = tape.slice_cols(head_out, 0, d)?;
    let mu = tape.slice_cols(head_out, d, d)?;
    Ok((sigma, mu))
}

/// Apply (1 + sigma) * x + mu per role group. `shift` is optional so the same
/// path serves post-modulation (scaling only).
fn role_affine<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    n_src: usize,
    src: (Var, Option<Var>),
    tgt: (Var, Option<Var>),
) -> Result<Var> {
    let n = tape.shape(x)[0];
    if n_src == 0 || n_src >= n {
        return Err(Error::Argument(format!(
            "token batch must contain both roles (n_src = {n_src} of {n})"
        )));
    }
    let mut parts = Vec::with_capacity(2);
    for (range, (sigma, shift)) in [((0, n_src), src), ((n_src, n - n_src), tgt)] {
        let group = tape.slice_rows(x, range.0, range.1)?;
        let gain = tape.add_scalar(sigma, 1.0);
        let mut y = tape.mul_row(group, gain)?;
        if let Some(mu) = shift {
            y = tape.add_row(y, mu)?;
        }
        parts.push(y);
    }
    tape.concat_rows(&parts)
}

fn pre_modulate<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    n_src: usize,
    head: &ModHeadVars,
    styles: &Styles,
) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap();
    let src_out = head.eval(tape, styles.source)?;
    let tgt_out = head.eval(tape, styles.target)?;
    let (ss, sm) = split_sigma_mu(tape, src_out, d)?;
    let (ts, tm) = split_sigma_mu(tape, tgt_out, d)?;
    role_affine(tape, x, n_src, (ss, Some(sm)), (ts, Some(tm)))
}

fn post_scale<E: Scalar>(
    tape: &mut Tape<E>,
    branch: Var,
    n_src: usize,
    head: &ModHeadVars,
    styles: &Styles,
) -> Result<Var> {
    let src_sigma = head.eval(tape, styles.source)?;
    let tgt_sigma = head.eval(tape, styles.target)?;
    role_affine(tape, branch, n_src, (src_sigma, None), (tgt_sigma, None))
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Run one transformer block. `styles` is required for the modulated variants.
pub fn block_forward<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    n_src: usize,
    heads: usize,
    vars: &BlockVars,
    styles: Option<&Styles>,
    variant: BlockVariant,
) -> Result<Var> {
    let need_styles = || {
        styles.ok_or_else(|| Error::Config("modulated block variant requires style vectors".into()))
    };

    // attention sublayer
    let attn_in = if variant.has_pre_modulation() {
        let s = need_styles()?;
        let head = vars
            .pre_attn
            .as_ref()
            .ok_or_else(|| Error::Config("missing pre-attention modulation head".into()))?;
        pre_modulate(tape, x, n_src, head, s)?
    } else {
        x
    };
    let mut attn_out = mhsa_qknorm(tape, attn_in, heads, &vars.attn)?;
    if variant.has_post_modulation() {
        let s = need_styles()?;
        let head = vars
            .post_attn
            .as_ref()
            .ok_or_else(|| Error::Config("missing post-attention modulation head".into()))?;
        attn_out = post_scale(tape, attn_out, n_src, head, s)?;
    }
    let x = tape.add(x, attn_out)?;

    // feed-forward sublayer
    let ffn_in = if variant.has_pre_modulation() {
        let s = need_styles()?;
        let head = vars
            .pre_ffn
            .as_ref()
            .ok_or_else(|| Error::Config("missing pre-ffn modulation head".into()))?;
        pre_modulate(tape, x, n_src, head, s)?
    } else {
        x
    };
    let normed = tape.layer_norm(ffn_in, vars.ln.gain, vars.ln.bias, LAYER_NORM_EPS)?;
    let mut ffn_out = ffn(tape, normed, &vars.ffn)?;
    if variant.has_post_modulation() {
        let s = need_styles()?;
        let head = vars
            .post_ffn
            .as_ref()
            .ok_or_else(|| Error::Config("missing post-ffn modulation head".into()))?;
        ffn_out = post_scale(tape, ffn_out, n_src, head, s)?;
    }
    tape.add(x, ffn_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    // base block parameters: attn (9), ffn (4), ln (2)
    fn base_params(rng: &mut Rng, d: usize, heads: usize) -> Vec<Tensor<f64>> {
        let std = 0.4;
        vec![
            Tensor::randn(vec![d, d], std, rng),
            Tensor::randn(vec![d], std, rng),
            Tensor::randn(vec![d, d], std, rng),
            Tensor::randn(vec![d], std, rng),
            Tensor::randn(vec![d, d], std, rng),
            Tensor::randn(vec![d], std, rng),
            Tensor::randn(vec![d, d], std, rng),
            Tensor::randn(vec![d], std, rng),
            Tensor::full(vec![heads], 1.0),
            Tensor::randn(vec![d, 2 * d], std, rng),
            Tensor::randn(vec![2 * d], std, rng),
            Tensor::randn(vec![2 * d, d], std, rng),
            Tensor::randn(vec![d], std, rng),
            Tensor::full(vec![d], 1.0),
            Tensor::zeros(vec![d]),
        ]
    }

    // modulation parameters: pre_attn w/b, pre_ffn w/b, post_attn w/b,
    // post_ffn w/b, style table, style map w/b
    fn mod_params(rng: &mut Rng, d: usize, head_std: f64) -> Vec<Tensor<f64>> {
        let mk = |shape: Vec<usize>, rng: &mut Rng| {
            if head_std == 0.0 {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, head_std, rng)
            }
        };
        vec![
            mk(vec![d, 2 * d], rng),
            mk(vec![2 * d], rng),
            mk(vec![d, 2 * d], rng),
            mk(vec![2 * d], rng),
            mk(vec![d, d], rng),
            mk(vec![d], rng),
            mk(vec![d, d], rng),
            mk(vec![d], rng),
            Tensor::randn(vec![2, d], 1.0, rng),
            Tensor::randn(vec![d, d], 0.4, rng),
            Tensor::randn(vec![d], 0.4, rng),
        ]
    }

    fn block_vars(p: &[Var], with_mods: bool) -> BlockVars {
        BlockVars {
            attn: AttentionVars {
                wq: p[0],
                bq: p[1],
                wk: p[2],
                bk: p[3],
                wv: p[4],
                bv: p[5],
                wo: p[6],
                bo: p[7],
                temps: p[8],
            },
            ffn: FfnVars {
                w1: p[9],
                b1: p[10],
                w2: p[11],
                b2: p[12],
            },
            ln: LayerNormVars {
                gain: p[13],
                bias: p[14],
            },
            pre_attn: with_mods.then(|| ModHeadVars { w: p[15], b: p[16] }),
            pre_ffn: with_mods.then(|| ModHeadVars { w: p[17], b: p[18] }),
            post_attn: with_mods.then(|| ModHeadVars { w: p[19], b: p[20] }),
            post_ffn: with_mods.then(|| ModHeadVars { w: p[21], b: p[22] }),
        }
    }

    fn run_block(
        x: &Tensor<f64>,
        n_src: usize,
        heads: usize,
        base: &[Tensor<f64>],
        mods: Option<&[Tensor<f64>]>,
        variant: BlockVariant,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut pv: Vec<Var> = base.iter().map(|t| tape.constant(t.clone())).collect();
        let styles = mods.map(|m| {
            pv.extend(m.iter().map(|t| tape.constant(t.clone())));
            let sv = StyleVars {
                table: pv[23],
                w: pv[24],
                b: pv[25],
            };
            compute_styles(&mut tape, &sv).unwrap()
        });
        let vars = block_vars(&pv, mods.is_some());
        let out = block_forward(&mut tape, xv, n_src, heads, &vars, styles.as_ref(), variant).unwrap();
        tape.value_tensor(out)
    }

    #[test]
    fn zero_heads_reduce_to_plain_bitwise() {
        let mut rng = Rng::new(10, 0);
        let (n, d, heads, n_src) = (6, 8, 2, 4);
        let base = base_params(&mut rng, d, heads);
        let mods = mod_params(&mut rng, d, 0.0); // zero heads, random style path
        let x = Tensor::randn(vec![n, d], 1.0, &mut rng);

        let plain = run_block(&x, n_src, heads, &base, None, BlockVariant::Plain);
        let tokd = run_block(&x, n_src, heads, &base, Some(&mods), BlockVariant::TokD);
        let plus = run_block(&x, n_src, heads, &base, Some(&mods), BlockVariant::TokDPlus);
        assert_eq!(plain.data(), tokd.data());
        assert_eq!(plain.data(), plus.data());
    }

    #[test]
    fn zero_post_heads_make_plus_equal_tokd() {
        let mut rng = Rng::new(11, 0);
        let (n, d, heads, n_src) = (6, 8, 2, 3);
        let base = base_params(&mut rng, d, heads);
        let mut mods = mod_params(&mut rng, d, 0.3);
        for i in 4..8 {
            mods[i] = Tensor::zeros(mods[i].shape().to_vec()); // post heads
        }
        let x = Tensor::randn(vec![n, d], 1.0, &mut rng);
        let tokd = run_block(&x, n_src, heads, &base, Some(&mods), BlockVariant::TokD);
        let plus = run_block(&x, n_src, heads, &base, Some(&mods), BlockVariant::TokDPlus);
        assert_eq!(tokd.data(), plus.data());
    }

    #[test]
    fn modulation_separates_roles() {
        // identical input rows: the plain block maps them identically, a
        // modulated block treats source and target rows differently.
        let mut rng = Rng::new(12, 0);
        let (d, heads, n_src) = (8, 2, 2);
        let base = base_params(&mut rng, d, heads);
        let mods = mod_params(&mut rng, d, 0.5);
        let row = Tensor::randn(vec![1, d], 1.0, &mut rng);
        let mut x = Tensor::zeros(vec![4, d]);
        for r in 0..4 {
            x.data_mut()[r * d..(r + 1) * d].copy_from_slice(row.data());
        }

        let plain = run_block(&x, n_src, heads, &base, None, BlockVariant::Plain);
        assert_eq!(plain.data()[..d], plain.data()[3 * d..4 * d]);

        let tokd = run_block(&x, n_src, heads, &base, Some(&mods), BlockVariant::TokD);
        let src_row = &tokd.data()[..d];
        let tgt_row = &tokd.data()[3 * d..4 * d];
        let diff: f64 = src_row
            .iter()
            .zip(tgt_row)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-3, "roles indistinguishable, diff {diff}");
    }

    #[test]
    fn both_roles_required() {
        let mut rng = Rng::new(13, 0);
        let (d, heads) = (8, 2);
        let base = base_params(&mut rng, d, heads);
        let mods = mod_params(&mut rng, d, 0.3);
        let x = Tensor::randn(vec![4, d], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut pv: Vec<Var> = base.iter().map(|t| tape.constant(t.clone())).collect();
        pv.extend(mods.iter().map(|t| tape.constant(t.clone())));
        let sv = StyleVars {
            table: pv[23],
            w: pv[24],
            b: pv[25],
        };
        let styles = compute_styles(&mut tape, &sv).unwrap();
        let vars = block_vars(&pv, true);
        for bad_n_src in [0usize, 4] {
            let r = block_forward(
                &mut tape,
                xv,
                bad_n_src,
                heads,
                &vars,
                Some(&styles),
                BlockVariant::TokD,
            );
            assert!(r.is_err(), "n_src = {bad_n_src} accepted");
        }
    }

    #[test]
    fn tokd_plus_gradient_matches_finite_differences() {
        let mut rng = Rng::new(14, 0);
        let (n, d, heads, n_src) = (4, 6, 2, 2);
        let mut params = base_params(&mut rng, d, heads);
        params.extend(mod_params(&mut rng, d, 0.3));
        params.push(Tensor::randn(vec![n, d], 1.0, &mut rng));
        let f = move |tape: &mut Tape<f64>, p: &[Var]| {
            let sv = StyleVars {
                table: p[23],
                w: p[24],
                b: p[25],
            };
            let styles = compute_styles(tape, &sv)?;
            let vars = block_vars(p, true);
            let out = block_forward(
                tape,
                p[26],
                n_src,
                heads,
                &vars,
                Some(&styles),
                BlockVariant::TokDPlus,
            )?;
            Ok(tape.sum_all(out))
        };
        let err = grad_check(&f, &params, 1e-4).unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in [BlockVariant::Plain, BlockVariant::TokD, BlockVariant::TokDPlus] {
            assert_eq!(BlockVariant::parse(v.as_str()).unwrap(), v);
            assert_eq!(BlockVariant::from_tag(v.tag()).unwrap(), v);
        }
        assert!(BlockVariant::parse("other").is_err());
        assert!(BlockVariant::from_tag(9).is_err());
    }
}

//! Network building blocks on top of the tape: QK-normalized multi-head
//! self-attention and the feed-forward network.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Tape handles for one attention layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    /// Learned per-head temperature applied to the normalized logits, [heads].
    pub temps: Var,
}

/// Full (non-causal) self-attention over all tokens with per-head
/// L2-normalization of queries and keys before the dot product.
pub fn mhsa_qknorm<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    heads: usize,
    p: &AttentionVars,
) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    let hd = d / heads;

    let q = tape.linear(x, p.wq, Some(p.bq))?;
    let k = tape.linear(x, p.wk, Some(p.bk))?;
    let v = tape.linear(x, p.wv, Some(p.bv))?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let qn = tape.rows_unit_norm(qh);
        let kn = tape.rows_unit_norm(kh);
        let kt = tape.transpose2d(kn)?;
        let logits = tape.matmul(qn, kt)?;
        let scaled = tape.scale_by_elem(logits, p.temps, h)?;
        let weights = tape.softmax(scaled);
        head_outs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    tape.linear(merged, p.wo, Some(p.bo))
}

/// Tape handles for one feed-forward layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Two-layer MLP with GELU.
pub fn ffn<E: Scalar>(tape: &mut Tape<E>, x: Var, p: &FfnVars) -> Result<Var> {
    let h = tape.linear(x, p.w1, Some(p.b1))?;
    let a = tape.gelu(h);
    tape.linear(a, p.w2, Some(p.b2))
}

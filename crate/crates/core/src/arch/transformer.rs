//! Multi-head attention and the encoder/decoder blocks.

use super::{ModelConfig, PriorQueries};
use crate::error::{dim_err, Error, Result};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Intermediate activations of one attention call.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub out: Var,
    /// Value input as passed in, before projection.
    pub value_input: Var,
    /// Projected values.
    pub values: Var,
    /// Scaled pre-softmax scores, one `[N, N]` matrix per head.
    pub logits: Vec<Var>,
    /// Attention weights, one `[N, N]` matrix per head; rows sum to one.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over `heads` heads with input and output
/// projections `{prefix}.{q,k,v,o}.{weight,bias}`. Inputs are `[N, D]`.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    prefix: &str,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<AttentionTrace> {
    let &[_, d] = tape.shape(q) else {
        return dim_err("attention inputs must be [N, D]");
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "token dimension {d} is not divisible by {heads} heads"
        )));
    }
    if tape.shape(k) != tape.shape(v) || tape.shape(k)[1] != d {
        return dim_err(format!(
            "attention key/value shapes {:?}/{:?} do not match query width {d}",
            tape.shape(k),
            tape.shape(v)
        ));
    }
    let proj = |tape: &mut Tape<T>, x: Var, which: &str| -> Result<Var> {
        let w = params.var(&format!("{prefix}.{which}.weight"))?;
        let b = params.var(&format!("{prefix}.{which}.bias"))?;
        tape.linear(x, w, b)
    };
    let qp = proj(tape, q, "q")?;
    let kp = proj(tape, k, "k")?;
    let vp = proj(tape, v, "v")?;

    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut logits = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                tape.slice_cols(qp, h * dh, dh)?,
                tape.slice_cols(kp, h * dh, dh)?,
                tape.slice_cols(vp, h * dh, dh)?,
            )
        };
        let scores = tape.matmul(qh, kh, true)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores);
        outs.push(tape.matmul(attn, vh, false)?);
        logits.push(scores);
        weights.push(attn);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let out = proj(tape, merged, "o")?;
    Ok(AttentionTrace {
        out,
        value_input: v,
        values: vp,
        logits,
        weights,
    })
}

fn layernorm<T: Scalar>(tape: &mut Tape<T>, params: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = params.var(&format!("{prefix}.gain"))?;
    let s = params.var(&format!("{prefix}.shift"))?;
    tape.layernorm(x, g, s, T::of(eps))
}

/// Position-wise linear → ReLU → linear.
fn feed_forward<T: Scalar>(tape: &mut Tape<T>, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.linear(
        x,
        params.var(&format!("{prefix}.fc1.weight"))?,
        params.var(&format!("{prefix}.fc1.bias"))?,
    )?;
    let h = tape.relu(h);
    tape.linear(
        h,
        params.var(&format!("{prefix}.fc2.weight"))?,
        params.var(&format!("{prefix}.fc2.bias"))?,
    )
}

/// Pre-norm transformer encoder block:
///
/// ```text
/// x' = MSA(LN(x), LN(x), LN(x)) + x
/// o  = FFN(LN(x')) + x'
/// ```
pub fn encoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    prefix: &str,
    x: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let eps = cfg.layernorm_eps;
    let n1 = layernorm(tape, params, &format!("{prefix}.ln1"), x, eps)?;
    let attn = multi_head_attention(tape, params, &format!("{prefix}.attn"), n1, n1, n1, cfg.heads)?;
    let x1 = tape.add(attn.out, x)?;
    let n2 = layernorm(tape, params, &format!("{prefix}.ln2"), x1, eps)?;
    let f = feed_forward(tape, params, &format!("{prefix}.ffn"), n2)?;
    tape.add(f, x1)
}

/// Activations of a decoder block, exposed for structural checks.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub out: Var,
    pub self_attn: AttentionTrace,
    pub cross_attn: AttentionTrace,
}

/// Decoder block conditioned on prior queries. With `l = LN(o_e)`:
///
/// ```text
/// y   = MSA(l + Q, l + Q, l) + o_e
/// y'  = MSA(LN(y) + Q, l, l) + y
/// o_d = FFN(LN(y')) + y'
/// ```
///
/// `Q` enters queries and keys only, never values.
pub fn decoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    prefix: &str,
    o_e: Var,
    q: PriorQueries,
    cfg: &ModelConfig,
) -> Result<DecoderTrace> {
    if tape.shape(o_e) != tape.shape(q.0) {
        return dim_err(format!(
            "prior queries {:?} do not match encoder output {:?}",
            tape.shape(q.0),
            tape.shape(o_e)
        ));
    }
    let eps = cfg.layernorm_eps;
    let l = layernorm(tape, params, &format!("{prefix}.ln1"), o_e, eps)?;
    let lq = tape.add(l, q.0)?;
    let self_attn = multi_head_attention(tape, params, &format!("{prefix}.attn1"), lq, lq, l, cfg.heads)?;
    let y = tape.add(self_attn.out, o_e)?;

    let ly = layernorm(tape, params, &format!("{prefix}.ln2"), y, eps)?;
    let lyq = tape.add(ly, q.0)?;
    let cross_attn = multi_head_attention(tape, params, &format!("{prefix}.attn2"), lyq, l, l, cfg.heads)?;
    let y2 = tape.add(cross_attn.out, y)?;

    let ly2 = layernorm(tape, params, &format!("{prefix}.ln3"), y2, eps)?;
    let f = feed_forward(tape, params, &format!("{prefix}.ffn"), ly2)?;
    let out = tape.add(f, y2)?;
    Ok(DecoderTrace {
        out,
        self_attn,
        cross_attn,
    })
}

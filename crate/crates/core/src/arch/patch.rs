//! Conversion between `[C, H, W]` feature maps and `[N, C·P²]` token sequences.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Source offsets in a `[c, h, w]` map for each element of the token matrix.
///
/// Tokens are the non-overlapping `p × p` blocks in raster order; within a
/// token, elements are channel-major, then row, then column.
pub fn patchify_index(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return dim_err(format!("patch size {p} does not divide {h}x{w}"));
    }
    let (by, bx) = (h / p, w / p);
    let mut index = Vec::with_capacity(c * h * w);
    for ty in 0..by {
        for tx in 0..bx {
            for ch in 0..c {
                for py in 0..p {
                    let row = (ch * h + ty * p + py) * w + tx * p;
                    index.extend(row..row + p);
                }
            }
        }
    }
    Ok(index)
}

/// Splits `[C, H, W]` into `[N, C·P²]` tokens.
pub fn patchify<T: Scalar>(tape: &mut Tape<T>, f: Var, p: usize) -> Result<Var> {
    let &[c, h, w] = tape.shape(f) else {
        return dim_err("patchify expects a [C, H, W] map");
    };
    let index = patchify_index(c, h, w, p)?;
    let n = (h / p) * (w / p);
    tape.gather(f, index, &[n, c * p * p])
}

/// Inverse of [`patchify`]: reassembles `[N, C·P²]` tokens into `[C, H, W]`.
pub fn unpatchify<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Var> {
    let forward = patchify_index(c, h, w, p)?;
    if tape.value(tokens).len() != forward.len() {
        return dim_err(format!(
            "unpatchify: {:?} tokens cannot fill a {c}x{h}x{w} map",
            tape.shape(tokens)
        ));
    }
    let mut inverse = vec![0; forward.len()];
    for (token_pos, &map_pos) in forward.iter().enumerate() {
        inverse[map_pos] = token_pos;
    }
    tape.gather(tokens, inverse, &[c, h, w])
}

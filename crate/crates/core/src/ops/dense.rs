//! Matrix products, affine maps and row-wise normalizations.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// `c += a · b` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &b) in crow.iter_mut().zip(brow) {
                *c += aip * b;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: [m, k]`, `b: [n, k]`, `c: [m, n]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c += aᵀ · b` with `a: [k, m]`, `b: [k, n]`, `c: [m, n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            for (c, &b) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *c += api * b;
            }
        }
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl<T: Scalar> Tape<T> {
    /// Matrix product `a · b`, or `a · bᵀ` when `trans_b` is set.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (Some((m, k)), Some((r, c))) =
            (as_matrix(self.shape(a)), as_matrix(self.shape(b)))
        else {
            return dim_err("matmul expects rank-2 operands");
        };
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return dim_err(format!("matmul inner dimensions {k} and {kb} differ"));
        }
        let mut out = vec![T::zero(); m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if trans_b {
            matmul_nt(av, bv, &mut out, m, k, n);
        } else {
            matmul(av, bv, &mut out, m, k, n);
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }))
    }

    /// Affine map `x · weightᵀ + bias` along the last axis of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let Some((d_out, d_in)) = as_matrix(self.shape(weight)) else {
            return dim_err("linear weight must be [d_out, d_in]");
        };
        let xs = self.shape(x);
        if xs.last() != Some(&d_in) {
            return dim_err(format!(
                "linear: input last dim {:?} does not match weight d_in {d_in}",
                xs.last()
            ));
        }
        if self.shape(bias) != [d_out] {
            return dim_err(format!("linear: bias must be [{d_out}]"));
        }
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let rows = self.value(x).len() / d_in;
        let mut out = Vec::with_capacity(rows * d_out);
        for _ in 0..rows {
            out.extend_from_slice(self.value(bias).data());
        }
        matmul_nt(
            self.value(x).data(),
            self.value(weight).data(),
            &mut out,
            rows,
            d_in,
            d_out,
        );
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::Linear { x, weight, bias }))
    }

    /// Layer normalization over the last axis followed by a per-feature affine map.
    pub fn layernorm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 {
            return dim_err("layernorm needs a non-empty last axis");
        }
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return dim_err(format!("layernorm: gain and shift must be [{d}]"));
        }
        let xv = self.value(x);
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let rows = xv.len() / d;
        let dn = T::of(d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + s[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax along the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        let out = Tensor::new(xv.shape().to_vec(), out).expect("softmax preserves shape");
        self.push(out, Op::Softmax(x))
    }
}

pub(crate) fn matmul_backward<T: Scalar>(
    a: Var,
    b: Var,
    trans_b: bool,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (av, bv) = (sink.value(a), sink.value(b));
    let (m, k) = (av.shape()[0], av.shape()[1]);
    let n = g.len() / m;
    if let Some(da) = sink.slot(a) {
        if trans_b {
            // b: [n, k]
            matmul(g, bv.data(), da, m, n, k);
        } else {
            // b: [k, n]
            matmul_nt(g, bv.data(), da, m, n, k);
        }
    }
    if let Some(db) = sink.slot(b) {
        if trans_b {
            matmul_tn(g, av.data(), db, n, m, k);
        } else {
            matmul_tn(av.data(), g, db, k, m, n);
        }
    }
}

pub(crate) fn linear_backward<T: Scalar>(
    x: Var,
    weight: Var,
    bias: Var,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (xv, wv) = (sink.value(x), sink.value(weight));
    let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
    let rows = xv.len() / d_in;
    if let Some(dx) = sink.slot(x) {
        matmul(g, wv.data(), dx, rows, d_out, d_in);
    }
    if let Some(dw) = sink.slot(weight) {
        matmul_tn(g, xv.data(), dw, d_out, rows, d_in);
    }
    if let Some(db) = sink.slot(bias) {
        for row in g.chunks(d_out) {
            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
        }
    }
}

pub(crate) fn layernorm_backward<T: Scalar>(
    x: Var,
    gain: Var,
    shift: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let gv = sink.value(gain);
    let d = gv.len();
    let dn = T::of(d as f64);
    if let Some(dx) = sink.slot(x) {
        for (r, &inv) in inv_std.iter().enumerate() {
            let span = r * d..(r + 1) * d;
            let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
            let mut sum_dh = T::zero();
            let mut sum_dh_h = T::zero();
            for j in 0..d {
                let dh = gr[j] * gv.data()[j];
                sum_dh += dh;
                sum_dh_h += dh * hr[j];
            }
            for (j, dx) in dx[span].iter_mut().enumerate() {
                let dh = gr[j] * gv.data()[j];
                *dx += inv / dn * (dn * dh - sum_dh - hr[j] * sum_dh_h);
            }
        }
    }
    if let Some(dg) = sink.slot(gain) {
        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
            for j in 0..d {
                dg[j] += gr[j] * hr[j];
            }
        }
    }
    if let Some(ds) = sink.slot(shift) {
        for gr in g.chunks(d) {
            ds.iter_mut().zip(gr).for_each(|(d, &g)| *d += g);
        }
    }
}

pub(crate) fn softmax_backward<T: Scalar>(
    x: Var,
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let d = *out.shape().last().unwrap_or(&1);
    if let Some(dx) = sink.slot(x) {
        for ((dxr, yr), gr) in dx.chunks_mut(d).zip(out.data().chunks(d)).zip(g.chunks(d)) {
            let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
            for j in 0..d {
                dxr[j] += yr[j] * (gr[j] - dot);
            }
        }
    }
}

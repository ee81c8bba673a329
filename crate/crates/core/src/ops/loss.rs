//! Loss primitives: mean absolute error, row normalization and sampled InfoNCE.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// One InfoNCE term over a row of a logit matrix.
///
/// `columns[0]` is the positive; the remaining columns are negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NceRow {
    pub row: usize,
    pub columns: Vec<usize>,
}

/// Floor under the row norm; keeps all-zero rows finite.
const NORM_EPS: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    /// Mean absolute deviation over all elements.
    pub fn l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return dim_err(format!(
                "l1: prediction {:?} and target {:?} differ in shape",
                p.shape(),
                t.shape()
            ));
        }
        let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let out = Tensor::scalar(total / T::of(p.len() as f64));
        Ok(self.push(out, Op::L1(pred, target)))
    }

    /// Scales each row of a matrix to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let &[_, d] = self.shape(x) else {
            return dim_err("normalize_rows expects a matrix");
        };
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.shape()[0]);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let n = (row.iter().map(|&v| v * v).sum::<T>() + T::of(NORM_EPS)).sqrt();
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::NormalizeRows { x, norms }))
    }

    /// Sum over `rows` of `-log softmax(logits[row, columns])[0]`.
    pub fn sampled_nce(&mut self, logits: Var, rows: Vec<NceRow>) -> Result<Var> {
        let &[n_rows, n_cols] = self.shape(logits) else {
            return dim_err("sampled_nce expects a logit matrix");
        };
        for r in &rows {
            if r.row >= n_rows || r.columns.is_empty() || r.columns.iter().any(|&c| c >= n_cols) {
                return dim_err(format!("sampled_nce: row spec {r:?} out of range"));
            }
        }
        let lv = self.value(logits).data();
        let total: T = rows
            .iter()
            .map(|r| {
                let row = &lv[r.row * n_cols..(r.row + 1) * n_cols];
                let picked: Vec<T> = r.columns.iter().map(|&c| row[c]).collect();
                let max = picked.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = picked.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                lse + (max - picked[0])
            })
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::SampledNce { logits, rows }))
    }
}

pub(crate) fn l1_backward<T: Scalar>(a: Var, b: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let (av, bv) = (sink.value(a), sink.value(b));
    let k = g[0] / T::of(av.len() as f64);
    let sign = |d: T| {
        if d > T::zero() {
            k
        } else if d < T::zero() {
            -k
        } else {
            T::zero()
        }
    };
    if let Some(da) = sink.slot(a) {
        for ((d, &x), &y) in da.iter_mut().zip(av.data()).zip(bv.data()) {
            *d += sign(x - y);
        }
    }
    if let Some(db) = sink.slot(b) {
        for ((d, &x), &y) in db.iter_mut().zip(av.data()).zip(bv.data()) {
            *d -= sign(x - y);
        }
    }
}

pub(crate) fn normalize_rows_backward<T: Scalar>(
    x: Var,
    out: &Tensor<T>,
    norms: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let d = out.shape()[1];
    if let Some(dx) = sink.slot(x) {
        for (r, &n) in norms.iter().enumerate() {
            let span = r * d..(r + 1) * d;
            let (y, gr) = (&out.data()[span.clone()], &g[span.clone()]);
            let dot: T = y.iter().zip(gr).map(|(&y, &g)| y * g).sum();
            for (j, dx) in dx[span].iter_mut().enumerate() {
                *dx += (gr[j] - y[j] * dot) / n;
            }
        }
    }
}

pub(crate) fn sampled_nce_backward<T: Scalar>(
    logits: Var,
    rows: &[NceRow],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let lv = sink.value(logits);
    let n_cols = lv.shape()[1];
    if let Some(dl) = sink.slot(logits) {
        for r in rows {
            let row = &lv.data()[r.row * n_cols..(r.row + 1) * n_cols];
            let max = r.columns.iter().map(|&c| row[c]).fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = r.columns.iter().map(|&c| (row[c] - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            for (k, (&c, &e)) in r.columns.iter().zip(&exps).enumerate() {
                let p = e / z;
                let target = if k == 0 { T::one() } else { T::zero() };
                dl[r.row * n_cols + c] += g[0] * (p - target);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_constant_offset() {
        let mut tape = Tape::<f64>::new();
        let p = tape.variable(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1));
        let t = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 + 0.5));
        let l = tape.l1(p, t).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-15);
        tape.backward(l).unwrap();
        assert!(tape.grad(p).unwrap().iter().all(|&g| g == -1.0 / 6.0));
    }

    #[test]
    fn l1_of_identical_is_zero_with_zero_subgradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.variable(Tensor::full(&[4], 0.3));
        let t = tape.constant(Tensor::full(&[4], 0.3));
        let l = tape.l1(p, t).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn l1_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros(&[4]));
        let t = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.l1(p, t).is_err());
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).cos() * 3.0));
        let y = tape.normalize_rows(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nce_equal_logits() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::full(&[3, 3], 14.2857));
        let rows = (0..3)
            .map(|i| NceRow {
                row: i,
                columns: std::iter::once(i).chain((0..3).filter(|&j| j != i)).collect(),
            })
            .collect();
        let l = tape.sampled_nce(s, rows).unwrap();
        assert!((tape.value(l).item() - 3.0 * 3f64.ln()).abs() < 1e-12);
    }
}

//! Index-based reshuffles: slicing, permutation and concatenation.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    ///
    /// Indices may repeat; gradients of repeated reads accumulate.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return dim_err(format!("gather: {} indices cannot fill {shape:?}", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return dim_err(format!("gather: index {bad} out of range for {} elements", xv.len()));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather { x, index }))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let &[rows, cols] = self.shape(x) else {
            return dim_err("slice_rows expects a matrix");
        };
        if start + count > rows {
            return dim_err(format!("slice_rows: {start}+{count} exceeds {rows} rows"));
        }
        let index = (start * cols..(start + count) * cols).collect();
        self.gather(x, index, &[count, cols])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let &[rows, cols] = self.shape(x) else {
            return dim_err("slice_cols expects a matrix");
        };
        if start + len > cols {
            return dim_err(format!("slice_cols: {start}+{len} exceeds {cols} columns"));
        }
        let index = (0..rows)
            .flat_map(|r| r * cols + start..r * cols + start + len)
            .collect();
        self.gather(x, index, &[rows, len])
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_cols needs at least one part");
        };
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match *self.shape(p) {
                [r, c] if r == rows => widths.push(c),
                ref s => return dim_err(format!("concat_cols: part shape {s:?} vs {rows} rows")),
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }
}

pub(crate) fn gather_backward<T: Scalar>(
    x: Var,
    index: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if let Some(dx) = sink.slot(x) {
        for (&i, &g) in index.iter().zip(g) {
            dx[i] += g;
        }
    }
}

pub(crate) fn concat_cols_backward<T: Scalar>(
    parts: &[Var],
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (rows, total) = (out.shape()[0], out.shape()[1]);
    let mut offset = 0;
    for &p in parts {
        let w = sink.value(p).shape()[1];
        if let Some(dp) = sink.slot(p) {
            for r in 0..rows {
                let src = &g[r * total + offset..r * total + offset + w];
                dp[r * w..(r + 1) * w]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, &g)| *d += g);
            }
        }
        offset += w;
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn split_and_concat_columns_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_fn(&[3, 4], |i| i as f64));
        let a = tape.slice_cols(x, 0, 1).unwrap();
        let b = tape.slice_cols(x, 1, 3).unwrap();
        let y = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn repeated_gather_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_fn(&[3], |i| i as f64));
        let y = tape.gather(x, vec![0, 0, 2], &[3]).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn slice_rows_bounds() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(tape.slice_rows(x, 2, 2).is_ok());
        assert!(tape.slice_rows(x, 3, 2).is_err());
    }
}

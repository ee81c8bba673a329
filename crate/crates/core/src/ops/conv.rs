//! Same-size 2D convolution via im2col.

use super::dense::{matmul, matmul_nt, matmul_tn};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Unfolds `[c_in, h, w]` into columns `[c_in·k·k, h·w]`; padding reads as zero.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.h * g.w;
    let mut cols = vec![T::zero(); g.patch_len() * hw];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.h * g.w;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &[usize], kernel: &[usize], bias: &[usize], pad: usize) -> Result<ConvGeom> {
    let [c_in, h, w] = *x else {
        return dim_err(format!("conv2d input must be [C, H, W], got {x:?}"));
    };
    let [c_out, kc, kh, kw] = *kernel else {
        return dim_err(format!("conv2d kernel must be [C_out, C_in, k, k], got {kernel:?}"));
    };
    if kc != c_in {
        return dim_err(format!(
            "conv2d kernel expects {kc} input channels but input has {c_in}"
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return dim_err(format!("conv2d kernel must be square with odd size, got {kh}x{kw}"));
    }
    if pad != (kh - 1) / 2 {
        return dim_err(format!("conv2d padding must be {} for a {kh}x{kh} kernel", (kh - 1) / 2));
    }
    if bias != [c_out] {
        return dim_err(format!("conv2d bias must be [{c_out}], got {bias:?}"));
    }
    Ok(ConvGeom {
        c_in,
        c_out,
        h,
        w,
        k: kh,
        pad,
    })
}

/// Convolution outside any tape.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), kernel.shape(), bias.shape(), padding)?;
    let (out, _) = run(x.data(), kernel.data(), bias.data(), &g);
    Tensor::new(vec![g.c_out, g.h, g.w], out)
}

fn run<T: Scalar>(x: &[T], kernel: &[T], bias: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let hw = g.h * g.w;
    let cols = im2col(x, g);
    let mut out = Vec::with_capacity(g.c_out * hw);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, hw));
    }
    matmul(kernel, &cols, &mut out, g.c_out, g.patch_len(), hw);
    (out, cols)
}

impl<T: Scalar> Tape<T> {
    /// Same-size convolution of `[C_in, H, W]` with `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let geom = geometry(self.shape(x), self.shape(kernel), self.shape(bias), padding)?;
        let (out, cols) = run(
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let out = Tensor::new(vec![geom.c_out, geom.h, geom.w], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                cols,
                geom,
            },
        ))
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: Var,
    kernel: Var,
    bias: Var,
    cols: &[T],
    geom: &ConvGeom,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let hw = geom.h * geom.w;
    let pl = geom.patch_len();
    let kv = sink.value(kernel);
    if let Some(dk) = sink.slot(kernel) {
        matmul_nt(g, cols, dk, geom.c_out, hw, pl);
    }
    if let Some(db) = sink.slot(bias) {
        for (d, row) in db.iter_mut().zip(g.chunks(hw)) {
            *d += row.iter().copied().sum::<T>();
        }
    }
    if sink.slot(x).is_some() {
        let mut dcols = vec![T::zero(); pl * hw];
        matmul_tn(kv.data(), g, &mut dcols, pl, geom.c_out, hw);
        let dx = sink.slot(x).expect("checked above");
        col2im(&dcols, geom, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_hand_convolution() {
        let x = Tensor::full(&[1, 3, 3], 1.0f64);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &k, &b, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn(&[2, 4, 5], |i| (i as f64 * 0.37).sin());
        let k = Tensor::from_fn(&[2, 2, 3, 3], |i| {
            let (o, rest) = (i / 18, i % 18);
            let (c, p) = (rest / 9, rest % 9);
            if o == c && p == 4 {
                1.0
            } else {
                0.0
            }
        });
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[2]), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1).is_err());
    }

    #[test]
    fn wrong_padding_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 0).is_err());
    }
}

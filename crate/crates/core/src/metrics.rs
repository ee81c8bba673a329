//! Image quality: PSNR and SSIM on `[0, 1]` images (peak value 1).
//!
//! SSIM uses non-overlapping square windows (8×8 by default) rather than the
//! usual 11×11 Gaussian weighting; rows and columns that do not fill a whole
//! window are ignored.

use crate::degrade::Pair;
use crate::error::{dim_err, Result};
use crate::pipeline::{restore_image, Checkpoint};
use crate::tensor::Tensor;
use std::fmt::Write as _;

fn same_shape(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(1 / MSE)`; identical images give `+∞`.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    ssim_with(a, b, 8, 0.01, 0.03)
}

/// Mean SSIM over `window × window` tiles of every channel, with
/// `C1 = K1²` and `C2 = K2²`.
pub fn ssim_with(a: &Tensor<f64>, b: &Tensor<f64>, window: usize, k1: f64, k2: f64) -> Result<f64> {
    same_shape(a, b)?;
    if a.rank() != 3 {
        return dim_err(format!("ssim expects [C, H, W] images, got {:?}", a.shape()));
    }
    let (ch, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if window == 0 || h < window || w < window {
        return dim_err(format!("image {h}x{w} is smaller than the {window}x{window} SSIM window"));
    }
    let (c1, c2) = (k1 * k1, k2 * k2);
    let (da, db) = (a.data(), b.data());
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for top in (0..=h - window).step_by(window) {
            for left in (0..=w - window).step_by(window) {
                let idx = |r: usize, q: usize| c * h * w + (top + r) * w + left + q;
                let (mut sa, mut sb) = (0.0, 0.0);
                for r in 0..window {
                    for q in 0..window {
                        sa += da[idx(r, q)];
                        sb += db[idx(r, q)];
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
                for r in 0..window {
                    for q in 0..window {
                        let (x, y) = (da[idx(r, q)] - ma, db[idx(r, q)] - mb);
                        vaa += x * x;
                        vbb += y * y;
                        vab += x * y;
                    }
                }
                let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
                total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-image scores for one task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub task: String,
    /// PSNR of the restored images against ground truth.
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// PSNR of the degraded inputs, the baseline to beat.
    pub input_psnr: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt_db(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x:.6}")
    }
}

impl EvalReport {
    pub fn count(&self) -> usize {
        self.psnr.len()
    }

    /// Arithmetic mean; `+∞` if any image was restored exactly.
    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }

    pub fn mean_input_psnr(&self) -> f64 {
        mean(&self.input_psnr)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,image,input_psnr,psnr,ssim\n");
        for i in 0..self.count() {
            writeln!(
                s,
                "{},{i},{},{},{:.6}",
                self.task,
                fmt_db(self.input_psnr[i]),
                fmt_db(self.psnr[i]),
                self.ssim[i]
            )
            .expect("writing to a String");
        }
        writeln!(
            s,
            "{},mean,{},{},{:.6}",
            self.task,
            fmt_db(self.mean_input_psnr()),
            fmt_db(self.mean_psnr()),
            self.mean_ssim()
        )
        .expect("writing to a String");
        s
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>6} {:>11} {:>11} {:>8}\n", "task", "images", "input PSNR", "PSNR", "SSIM");
        writeln!(
            s,
            "{:<12} {:>6} {:>11} {:>11} {:>8.4}",
            self.task,
            self.count(),
            fmt_db(self.mean_input_psnr()),
            fmt_db(self.mean_psnr()),
            self.mean_ssim()
        )
        .expect("writing to a String");
        s
    }
}

/// Scores any restoration function on a set of pairs.
pub fn evaluate_with(pairs: &[Pair], mut restore: impl FnMut(&Tensor<f64>) -> Result<Tensor<f64>>) -> Result<EvalReport> {
    let Some(first) = pairs.first() else {
        return Err(crate::Error::Usage("evaluation needs at least one pair".into()));
    };
    let mut report = EvalReport {
        task: first.task.clone(),
        ..EvalReport::default()
    };
    for p in pairs {
        let out = restore(&p.corrupted)?;
        report.psnr.push(psnr(&out, &p.clean)?);
        report.ssim.push(ssim(&out, &p.clean)?);
        report.input_psnr.push(psnr(&p.corrupted, &p.clean)?);
    }
    Ok(report)
}

/// Restores every pair with `ckpt` and scores the result.
pub fn evaluate_set(ckpt: &Checkpoint, pairs: &[Pair]) -> Result<EvalReport> {
    evaluate_with(pairs, |x| restore_image(ckpt, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_formula() {
        let a = Tensor::full(&[3, 8, 8], 0.0);
        let b = Tensor::full(&[3, 8, 8], 0.5f64.sqrt());
        assert!((psnr(&a, &b).unwrap() - 10.0 * 2f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_of_constants() {
        let a = Tensor::full(&[3, 8, 8], 0.3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&a, &Tensor::full(&[3, 8, 8], 0.7)).unwrap() < 1.0);
    }

    #[test]
    fn ssim_window_must_fit() {
        let a = Tensor::full(&[3, 7, 16], 0.3);
        assert!(ssim(&a, &a).is_err());
    }
}

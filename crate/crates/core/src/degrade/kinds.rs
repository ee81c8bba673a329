use super::synth::{box_blur, Polygon};
use super::{DegradationKind, DegradationSpec};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

/// Unclipped corruption; the caller clamps.
pub(super) fn apply<R: Rng + ?Sized>(clean: &Tensor<f64>, spec: &DegradationSpec, rng: &mut R) -> Tensor<f64> {
    let mut out = clean.clone();
    let (h, w) = (clean.dim_back(1), clean.dim_back(0));
    match spec.kind {
        DegradationKind::GaussianNoise => noise(&mut out, spec, rng),
        DegradationKind::RainStreaks => rain(&mut out, h, w, spec, rng),
        DegradationKind::Raindrops => drops(&mut out, h, w, spec, rng),
        DegradationKind::Moire => moire(&mut out, h, w, spec, rng),
        DegradationKind::Snow => snow(&mut out, h, w, spec, rng),
        DegradationKind::Shadow => shadow(&mut out, h, w, spec, rng),
    }
    out
}

/// Element count for a density given per 16×16 area.
fn count<R: Rng + ?Sized>(spec: &DegradationSpec, h: usize, w: usize, rng: &mut R) -> usize {
    (spec.draw("count", rng) * (h * w) as f64 / 256.0).round() as usize
}

fn noise<R: Rng + ?Sized>(img: &mut Tensor<f64>, spec: &DegradationSpec, rng: &mut R) {
    let sigma = spec.draw("sigma", rng) / 255.0;
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    img.data_mut().iter_mut().for_each(|x| *x += normal.sample(rng));
}

/// Screen-blends `alpha` of white into every channel of pixel `p`.
fn brighten(img: &mut [f64], plane: usize, p: usize, alpha: f64) {
    for c in 0..3 {
        let x = &mut img[c * plane + p];
        *x += alpha * (1.0 - *x);
    }
}

fn rain<R: Rng + ?Sized>(img: &mut Tensor<f64>, h: usize, w: usize, spec: &DegradationSpec, rng: &mut R) {
    let tilt_max = spec.param("tilt_max").to_radians();
    let tilt = rng.random_range(-tilt_max..=tilt_max);
    let (dx, dy) = (tilt.sin(), tilt.cos());
    let width = spec.param("width");
    let plane = h * w;
    for _ in 0..count(spec, h, w, rng) {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let half = spec.draw("length", rng) / 2.0;
        let intensity = spec.draw("intensity", rng);
        let d = img.data_mut();
        for r in 0..h {
            for q in 0..w {
                let (px, py) = (q as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                // distance to the segment centred at (cx, cy)
                let t = (px * dx + py * dy).clamp(-half, half);
                let dist = (px - t * dx).hypot(py - t * dy);
                let a = (1.0 - dist / width).max(0.0) * intensity;
                if a > 0.0 {
                    brighten(d, plane, r * w + q, a);
                }
            }
        }
    }
}

fn drops<R: Rng + ?Sized>(img: &mut Tensor<f64>, h: usize, w: usize, spec: &DegradationSpec, rng: &mut R) {
    let blurred = box_blur(img, spec.param("blur").round() as usize);
    let lift = spec.param("brighten");
    let plane = h * w;
    for _ in 0..count(spec, h, w, rng) {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = spec.draw("radius", rng);
        let ry = rx * rng.random_range(0.6..=1.0);
        let d = img.data_mut();
        for r in 0..h {
            for q in 0..w {
                let u = (q as f64 + 0.5 - cx) / rx;
                let v = (r as f64 + 0.5 - cy) / ry;
                // soft rim over the outer third of the ellipse
                let a = ((1.0 - (u * u + v * v)) * 3.0).clamp(0.0, 1.0);
                if a > 0.0 {
                    for c in 0..3 {
                        let i = c * plane + r * w + q;
                        d[i] = (1.0 - a) * d[i] + a * (blurred.data()[i] + lift);
                    }
                }
            }
        }
    }
}

fn moire<R: Rng + ?Sized>(img: &mut Tensor<f64>, h: usize, w: usize, spec: &DegradationSpec, rng: &mut R) {
    let amp = spec.draw("amplitude", rng);
    let freq = spec.draw("freq", rng);
    let (s, c) = rng.random_range(0.0..PI).sin_cos();
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    let plane = h * w;
    let d = img.data_mut();
    for (ch, ph) in phase.iter().enumerate() {
        for r in 0..h {
            for q in 0..w {
                d[ch * plane + r * w + q] *= 1.0 + amp * (freq * (q as f64 * c + r as f64 * s) + ph).sin();
            }
        }
    }
}

fn snow<R: Rng + ?Sized>(img: &mut Tensor<f64>, h: usize, w: usize, spec: &DegradationSpec, rng: &mut R) {
    let plane = h * w;
    for _ in 0..count(spec, h, w, rng) {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let sigma = spec.draw("radius", rng);
        let intensity = spec.draw("intensity", rng);
        let reach = 3.0 * sigma;
        let d = img.data_mut();
        for r in 0..h {
            for q in 0..w {
                let (px, py) = (q as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                if px.abs() > reach || py.abs() > reach {
                    continue;
                }
                let a = intensity * (-(px * px + py * py) / (2.0 * sigma * sigma)).exp();
                brighten(d, plane, r * w + q, a);
            }
        }
    }
}

fn shadow<R: Rng + ?Sized>(img: &mut Tensor<f64>, h: usize, w: usize, spec: &DegradationSpec, rng: &mut R) {
    let factor = spec.draw("factor", rng);
    let radius = spec.draw("size", rng) * h.min(w) as f64;
    let vertices = spec.draw("vertices", rng).round() as usize;
    let center = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
    let poly = Polygon::random(rng, center, radius, vertices);
    let plane = h * w;
    let d = img.data_mut();
    for r in 0..h {
        for q in 0..w {
            let cov = poly.coverage(r, q);
            if cov > 0.0 {
                for c in 0..3 {
                    d[c * plane + r * w + q] *= 1.0 - (1.0 - factor) * cov;
                }
            }
        }
    }
}

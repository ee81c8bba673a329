//! Procedural clean images and the small raster helpers the degradations share.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;
use rand::Rng;
use std::f64::consts::PI;

/// Convex polygon with counter-clockwise vertices, in pixel coordinates.
pub(crate) struct Polygon(Vec<(f64, f64)>);

impl Polygon {
    /// Vertices at sorted random angles on a rotated ellipse, which keeps the
    /// polygon convex.
    pub(crate) fn random<R: Rng + ?Sized>(
        rng: &mut R,
        center: (f64, f64),
        radius: f64,
        vertices: usize,
    ) -> Self {
        let aspect = rng.random_range(0.6..=1.0);
        let rot = rng.random_range(0.0..PI);
        let mut angles: Vec<f64> = (0..vertices).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        let (s, c) = rot.sin_cos();
        Polygon(
            angles
                .into_iter()
                .map(|a| {
                    let (x, y) = (radius * a.cos(), radius * aspect * a.sin());
                    (center.0 + c * x - s * y, center.1 + s * x + c * y)
                })
                .collect(),
        )
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let v = &self.0;
        (0..v.len()).all(|i| {
            let (x0, y0) = v[i];
            let (x1, y1) = v[(i + 1) % v.len()];
            (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
        })
    }

    /// Fraction of pixel `(row, col)` covered, from a 4×4 supersample grid.
    pub(crate) fn coverage(&self, row: usize, col: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..4 {
            for sx in 0..4 {
                let x = col as f64 + (sx as f64 + 0.5) / 4.0;
                let y = row as f64 + (sy as f64 + 0.5) / 4.0;
                hits += self.contains(x, y) as u32;
            }
        }
        hits as f64 / 16.0
    }
}

/// Composite of a bilinear colour gradient, a few band-limited sinusoids and
/// anti-aliased convex polygons, clipped to `[0, 1]`.
pub fn gen_clean_patch<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Result<Tensor<f64>> {
    if height < 8 || width < 8 {
        return dim_err(format!("clean patches must be at least 8×8, got {height}×{width}"));
    }
    let plane = height * width;
    let mut img = vec![0.0; 3 * plane];

    let corners: Vec<[f64; 4]> = (0..3)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.1..0.9)))
        .collect();
    for (c, k) in corners.iter().enumerate() {
        for r in 0..height {
            let v = (r as f64 + 0.5) / height as f64;
            for q in 0..width {
                let u = (q as f64 + 0.5) / width as f64;
                img[c * plane + r * width + q] = k[0] * (1.0 - u) * (1.0 - v)
                    + k[1] * u * (1.0 - v)
                    + k[2] * (1.0 - u) * v
                    + k[3] * u * v;
            }
        }
    }

    for _ in 0..rng.random_range(1..=3) {
        let amp = rng.random_range(0.02..0.12);
        let freq = rng.random_range(0.2..1.2);
        let (s, c) = rng.random_range(0.0..PI).sin_cos();
        let phase = rng.random_range(0.0..2.0 * PI);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..1.0));
        for (ch, t) in tint.iter().enumerate() {
            for r in 0..height {
                for q in 0..width {
                    let d = q as f64 * c + r as f64 * s;
                    img[ch * plane + r * width + q] += amp * t * (freq * d + phase).sin();
                }
            }
        }
    }

    let short = height.min(width) as f64;
    for _ in 0..rng.random_range(1..=3) {
        let center = (rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64));
        let radius = rng.random_range(0.15..0.45) * short;
        let vertices = rng.random_range(3..=6);
        let poly = Polygon::random(rng, center, radius, vertices);
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let alpha = rng.random_range(0.6..1.0);
        for r in 0..height {
            for q in 0..width {
                let a = alpha * poly.coverage(r, q);
                if a > 0.0 {
                    for (ch, col) in colour.iter().enumerate() {
                        let p = &mut img[ch * plane + r * width + q];
                        *p = (1.0 - a) * *p + a * col;
                    }
                }
            }
        }
    }

    img.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    Tensor::new(vec![3, height, width], img)
}

/// Box blur with the given radius; the window is truncated at the borders.
pub(crate) fn box_blur(img: &Tensor<f64>, radius: usize) -> Tensor<f64> {
    let (h, w) = (img.dim_back(1), img.dim_back(0));
    let plane = h * w;
    let d = img.data();
    Tensor::from_fn(img.shape(), |i| {
        let (c, r, q) = (i / plane, (i % plane) / w, i % w);
        let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(h - 1));
        let (q0, q1) = (q.saturating_sub(radius), (q + radius).min(w - 1));
        let mut sum = 0.0;
        for rr in r0..=r1 {
            for qq in q0..=q1 {
                sum += d[c * plane + rr * w + qq];
            }
        }
        sum / ((r1 - r0 + 1) * (q1 - q0 + 1)) as f64
    })
}

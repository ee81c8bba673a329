//! Binary PPM (P6) images as `[3, H, W]` tensors in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::ErrorKind;
use std::path::Path;

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return format_err(start, format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| format_err(start, format!("{what} out of range")), Ok)
    }
}

/// Decodes a P6 image; samples are divided by the header's maxval.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return format_err(0, "not a binary PPM (missing P6 magic)");
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return format_err(h.pos, "image has zero size");
    }
    if maxval == 0 || maxval > 65535 {
        return format_err(h.pos, format!("maxval {maxval} outside 1..=65535"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return format_err(h.pos, "expected a single whitespace after maxval"),
    }
    let wide = maxval > 255;
    let n = 3 * width * height;
    let need = if wide { 2 * n } else { n };
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(Error::Io {
            path: "<ppm payload>".into(),
            source: std::io::Error::new(
                ErrorKind::UnexpectedEof,
                format!("pixel data truncated: {} of {need} bytes", payload.len()),
            ),
        });
    }
    let scale = 1.0 / maxval as f64;
    let sample = |i: usize| -> f64 {
        let v = if wide {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as f64
        } else {
            payload[i] as f64
        };
        (v * scale).min(1.0)
    };
    // interleaved RGB -> planar
    let plane = width * height;
    Tensor::new(
        vec![3, height, width],
        (0..n).map(|k| sample((k % plane) * 3 + k / plane)).collect(),
    )
}

/// Encodes a `[3, H, W]` tensor as 8-bit P6, clamping to `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let &[3, height, width] = image.shape() else {
        return Err(Error::Dimension(format!(
            "PPM needs a [3, H, W] image, got {:?}",
            image.shape()
        )));
    };
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    let plane = width * height;
    let d = image.data();
    for p in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f64>) -> Result<()> {
    let bytes = encode_ppm(image)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_value_maps_to_one() {
        let bytes = b"P6\n1 1\n255\n\xff\x00\x80";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P6 # made by hand\n2 1\n# depth\n255\n\x01\x02\x03\x04\x05\x06";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        // planar: R plane = [1, 4]
        assert_eq!(t.data()[1], 4.0 / 255.0);
    }

    #[test]
    fn truncated_payload_is_an_io_error() {
        let bytes = b"P6\n2 2\n255\n\x00\x00\x00";
        assert!(matches!(decode_ppm(bytes), Err(Error::Io { .. })));
    }

    #[test]
    fn bad_magic_reports_offset() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn sixteen_bit_samples() {
        let bytes = b"P6\n1 1\n65535\n\xff\xff\x00\x00\x80\x00";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.data()[0], 1.0);
        assert!((t.data()[2] - 32768.0 / 65535.0).abs() < 1e-15);
    }
}

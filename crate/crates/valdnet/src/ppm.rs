//! Binary PPM (P6, maxval 255) frame I/O.
//!
//! Frames decode to `[3,H,W]` tensors scaled into [0,1] by 1/255 and encode
//! back with round-to-nearest, so byte → tensor → byte is the identity.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decode a binary P6 image into `[3,H,W]` with values in [0,1].
pub fn load_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut p = Parser { bytes, pos: 0 };
    if p.take(2)? != b"P6" {
        return Err(Error::Format("PPM magic is not P6".into()));
    }
    let width = p.ascii_number()?;
    let height = p.ascii_number()?;
    let maxval = p.ascii_number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval}, only 255 supported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("PPM extents {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    let sep = p.take(1)?;
    if !sep[0].is_ascii_whitespace() {
        return Err(Error::Format("PPM header not terminated by whitespace".into()));
    }
    let pixels = p.take(width * height * 3)?;
    if p.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after PPM pixel data",
            bytes.len() - p.pos
        )));
    }
    // Interleaved RGB bytes -> planar channels.
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = pixels[i * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Encode a `[3,H,W]` tensor as binary P6; values are clamped to [0,1] and
/// rounded to the nearest byte.
pub fn write_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dim(format!("write_ppm wants [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_ppm_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    load_ppm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_ppm_file(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, write_ppm(image)?)?;
    Ok(())
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated PPM data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skip whitespace and `#` comment lines, then read a decimal number.
    fn ascii_number(&mut self) -> Result<usize> {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(b) = self.peek() {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format("expected number in PPM header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format("oversized number in PPM header".into()))
    }
}

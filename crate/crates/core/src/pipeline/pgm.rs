//! Binary PGM (P5) images with a fixed 255 maxval on write.
//!
//! Pixels map to [0, 1] floats: encode rounds clamp(v, 0, 1) * 255,
//! decode divides by the file's maxval.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serialize a rank-2 grayscale image.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 2 {
        return Err(Error::BadShape {
            op: "encode_pgm",
            detail: "image must be rank 2".into(),
            shape: img.shape().to_vec(),
        });
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    /// Next whitespace-delimited header token, skipping # comments.
    fn next(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some(&self.bytes[start..self.pos])
    }
}

/// Parse a P5 stream. `origin` labels errors, usually the file path.
pub fn decode_pgm(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let fail = |reason: String| Error::ImageFormat { path: origin.to_string(), reason };
    let mut toks = Tokens { bytes, pos: 0 };
    let magic = toks.next().ok_or_else(|| fail("empty file".into()))?;
    if magic != b"P5" {
        return Err(fail(format!("bad magic {:?}, expected \"P5\"", String::from_utf8_lossy(magic))));
    }
    let mut field = |what: &str| -> Result<usize> {
        let tok = toks.next().ok_or_else(|| fail(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| fail(format!("bad {what} {:?}", String::from_utf8_lossy(tok))))
    };
    let w = field("width")?;
    let h = field("height")?;
    let maxval = field("maxval")?;
    if w == 0 || h == 0 {
        return Err(fail(format!("degenerate size {w}x{h}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(fail(format!("maxval {maxval} outside 1..=255")));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = &bytes[toks.pos + 1..];
    if raster.len() != w * h {
        return Err(fail(format!("raster has {} bytes, expected {}", raster.len(), w * h)));
    }
    let data = raster.iter().map(|&b| b as f32 / maxval as f32).collect();
    Tensor::new(vec![h, w], data)
}

pub fn save_pgm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

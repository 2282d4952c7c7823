//! Binary Netpbm codecs: P6 (RGB) decode/encode and P5 (gray) encode.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// Planar `3 x H x W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("rgb shape")
    }

    /// Inverse of [`RgbImage::to_tensor`]; values are clamped and rounded.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = match t.shape()[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::dim("ppm", format!("expected 3xHxW, got {:?}", t.shape()))),
        };
        if c != 3 {
            return Err(Error::dim("ppm", format!("expected 3 channels, got {c}")));
        }
        let plane = h * w;
        let mut data = vec![0u8; 3 * plane];
        for i in 0..plane {
            for ch in 0..3 {
                data[i * 3 + ch] = to_byte(t.data()[ch * plane + i]);
            }
        }
        Ok(RgbImage { width: w, height: h, data })
    }
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("missing or malformed {what} at byte {start}"))
    }
}

/// Decodes an 8-bit binary P6 image.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err("not a binary P6 image".into());
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval != 255 {
        return Err(format!("only 8-bit images (maxval 255) are supported, got {maxval}"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err("missing whitespace after header".into()),
    }
    let need = width * height * 3;
    let body = &bytes[h.pos..];
    if body.len() < need {
        return Err(format!("pixel data truncated: need {need} bytes, have {}", body.len()));
    }
    Ok(RgbImage { width, height, data: body[..need].to_vec() })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|detail| Error::Format { offset: 0, detail: format!("{}: {detail}", path.display()) })
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

//! Binary PPM (P6) / PGM (P5) images and conversion to network input.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mrfdet_core::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `3 × H × W` tensor with values `(v - 127.5) / 64`, optionally mirrored left-right.
    pub fn to_tensor(&self, hflip: bool) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, rest) = (i / (h * w), i % (h * w));
            let (y, x) = (rest / w, rest % w);
            let sx = if hflip { w - 1 - x } else { x };
            (self.data[(y * w + sx) * 3 + c] as f64 - 127.5) / 64.0
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let (magic, w, h, pixels) = decode_netpbm(bytes)?;
        if magic != "P6" {
            bail!("expected a binary PPM (P6), found {magic}");
        }
        if pixels.len() != w * h * 3 {
            bail!("PPM payload holds {} bytes, expected {}", pixels.len(), w * h * 3);
        }
        Ok(Self { width: w, height: h, data: pixels.to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::decode_ppm(&bytes).with_context(|| format!("decoding {}", path.display()))
    }
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Header fields and payload of a binary netpbm file with maxval 255.
fn decode_netpbm(bytes: &[u8]) -> Result<(String, usize, usize, &[u8])> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("truncated netpbm header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().with_context(|| format!("bad header field {s:?}"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        bail!("only 8-bit netpbm files are supported (maxval {maxval})");
    }
    Ok((fields[0].clone(), w, h, bytes.get(pos..).unwrap_or(&[])))
}

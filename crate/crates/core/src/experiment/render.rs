use std::path::Path;

use crate::error::{Error, Result};

/// Decoded binary PPM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
}

impl Ppm {
    pub fn rgb(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 2 x n grid: originals on the top row, reconstructions below, one
/// white pixel between cells. Images are `C x H x W` in [0, 1] with C = 1 (gray,
/// replicated) or 3.
pub fn encode_grid(originals: &[Vec<f64>], reconstructions: &[Vec<f64>], shape: [usize; 3]) -> Result<Vec<u8>> {
    let [c, h, w] = shape;
    if originals.is_empty() {
        return Err(Error::InvalidArgument("nothing to render".into()));
    }
    if originals.len() != reconstructions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} originals but {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!("cannot render {c}-channel images")));
    }
    let plane = h * w;
    if let Some(bad) = originals.iter().chain(reconstructions).find(|img| img.len() != c * plane) {
        return Err(Error::shape("render_grid", format!("image of {} values, expected {}", bad.len(), c * plane)));
    }
    let n = originals.len();
    let width = n * w + (n - 1);
    let height = 2 * h + 1;
    let mut pixels = vec![255u8; 3 * width * height];
    for (row, set) in [originals, reconstructions].into_iter().enumerate() {
        for (k, img) in set.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let at = 3 * ((row * (h + 1) + y) * width + k * (w + 1) + x);
                    for ch in 0..3 {
                        let src = if c == 1 { 0 } else { ch };
                        pixels[at + ch] = to_byte(img[src * plane + y * w + x]);
                    }
                }
            }
        }
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// [`encode_grid`] written atomically to `path`.
pub fn render_grid(originals: &[Vec<f64>], reconstructions: &[Vec<f64>], shape: [usize; 3], path: &Path) -> Result<()> {
    let bytes = encode_grid(originals, reconstructions, shape)?;
    super::write_atomic(path, &bytes)
}

/// Parses a binary (P6, maxval 255) PPM; `#` comments are allowed in the header.
pub fn parse_ppm(bytes: &[u8]) -> Result<Ppm> {
    let bad = |m: &str| Error::InvalidArgument(format!("ppm: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if bytes.get(pos) == Some(&b'#') {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let mut number = || -> Result<usize> { token()?.parse().map_err(|_| bad("bad header number")) };
    let (width, height, maxval) = (number()?, number()?, number()?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the payload
    let payload = bytes.get(pos + 1..).ok_or_else(|| bad("missing payload"))?;
    if payload.len() != 3 * width * height {
        return Err(bad("payload size does not match the header"));
    }
    Ok(Ppm {
        width,
        height,
        pixels: payload.to_vec(),
    })
}

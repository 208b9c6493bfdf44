//! 8-bit RGB images with binary PPM (P6) I/O and the bundled test texture.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use tc_core::error::{Error, Result};
use tc_core::tensor::DenseTensor;

/// RGB image; samples in PPM raster order (rows top to bottom, RGB triples).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<u8>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            samples: vec![0; height * width * Self::CHANNELS],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.samples[(row * self.width + col) * Self::CHANNELS + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: u8) {
        self.samples[(row * self.width + col) * Self::CHANNELS + ch] = v;
    }

    /// `(height, width, 3)` tensor of sample values in `[0, 255]`.
    pub fn to_tensor(&self) -> DenseTensor<f64> {
        DenseTensor::from_fn(&[self.height, self.width, Self::CHANNELS], |ix| {
            self.get(ix[0], ix[1], ix[2]) as f64
        })
    }

    /// Quantizes a `(h, w, 3)` tensor, clamping to `[0, 255]`.
    pub fn from_tensor(t: &DenseTensor<f64>) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 3 || dims[2] != Self::CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "image tensor must be (h, w, 3), got {dims:?}"
            )));
        }
        let mut img = Self::new(dims[0], dims[1]);
        for row in 0..dims[0] {
            for col in 0..dims[1] {
                for ch in 0..Self::CHANNELS {
                    let v = t.get(&[row, col, ch]).round().clamp(0.0, 255.0);
                    img.set(row, col, ch, v as u8);
                }
            }
        }
        Ok(img)
    }
}

/// Loads a binary PPM (P6, maxval 255).  `#` comments in the header are
/// skipped.
pub fn load_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    parse_ppm(&bytes)
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<Vec<u8>> {
        // Skip whitespace and comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Parse("truncated ppm header".into()));
        }
        Ok(bytes[start..*pos].to_vec())
    };
    let magic = token(&mut pos)?;
    if magic != b"P6" {
        return Err(Error::Parse("not a binary ppm (P6) file".into()));
    }
    let parse_num = |t: Vec<u8>| -> Result<usize> {
        std::str::from_utf8(&t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse("bad ppm header number".into()))
    };
    let width = parse_num(token(&mut pos)?)?;
    let height = parse_num(token(&mut pos)?)?;
    let maxval = parse_num(token(&mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Parse(format!("unsupported ppm maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * Image::CHANNELS;
    if bytes.len() < pos + need {
        return Err(Error::Parse("ppm raster truncated".into()));
    }
    Ok(Image {
        height,
        width,
        samples: bytes[pos..pos + need].to_vec(),
    })
}

/// Saves as binary PPM (P6, maxval 255); round trips bit-exactly.
pub fn save_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.samples.len() + 32);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    out.extend_from_slice(&img.samples);
    fs::write(path, out)?;
    Ok(())
}

/// Loads an image by extension; only `.ppm` is built in.
pub fn load_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => load_ppm(path),
        other => Err(Error::InvalidArgument(format!(
            "unsupported image format {other:?}; use binary ppm"
        ))),
    }
}

/// Deterministic 60x90 test texture: smooth color gradients, a soft blob,
/// and diagonal banding, quantized to 8 bits.
pub fn bundled_texture() -> Image {
    let (h, w) = (60usize, 90usize);
    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let xf = x as f64;
            let yf = y as f64;
            let swirl = (0.09 * xf + 0.35 * (0.11 * yf).sin() * 6.0).sin()
                * (0.07 * yf - 0.2 * (0.05 * xf).cos() * 4.0).cos();
            let blob = (-((xf - 30.0).powi(2) + (yf - 22.0).powi(2)) / 260.0).exp();
            let band = (0.22 * (xf + 0.6 * yf)).sin();
            let r = 118.0 + 62.0 * swirl + 45.0 * blob + 14.0 * band;
            let g = 102.0 + 58.0 * swirl - 22.0 * blob + 20.0 * band;
            let b = 134.0 - 48.0 * swirl + 30.0 * blob - 12.0 * band;
            img.set(y, x, 0, r.round().clamp(0.0, 255.0) as u8);
            img.set(y, x, 1, g.round().clamp(0.0, 255.0) as u8);
            img.set(y, x, 2, b.round().clamp(0.0, 255.0) as u8);
        }
    }
    img
}

//! Binary PGM (P5) image I/O.
//!
//! Images are square grayscale rasters with pixels in `[0, 1]`; files use
//! the netpbm P5 format with maxval 255, so a round trip quantizes to 8
//! bits. PGM keeps the on-disk format header-plus-raw-bytes simple.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image, row-major, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    /// All-black image.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    /// Builds an image from row-major pixels, clamping each into `[0, 1]`.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension {
                expected: width * height,
                got: pixels.len(),
                context: "pixel buffer length",
            });
        }
        let pixels = pixels
            .into_iter()
            .map(|p| if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }
}

/// Writes a binary PGM: `P5`, dimensions, maxval 255, then one byte per
/// pixel rounded from the `[0, 1]` value.
pub fn save_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a binary PGM written by [`save_pgm`] or any P5 file with
/// maxval ≤ 255, handling `#` comments in the header.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic).map_err(|_| pgm_err("empty file"))?;
    if &magic != b"P5" {
        return Err(pgm_err("not a P5 file"));
    }

    let width = read_header_int(&mut r)?;
    let height = read_header_int(&mut r)?;
    let maxval = read_header_int(&mut r)?;
    if width == 0 || height == 0 {
        return Err(pgm_err("zero dimension"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(pgm_err(format!("unsupported maxval {maxval}")));
    }

    let mut bytes = vec![0u8; width * height];
    r.read_exact(&mut bytes)
        .map_err(|_| pgm_err("truncated raster"))?;
    let pixels = bytes.iter().map(|&b| b as f64 / maxval as f64).collect();
    GrayImage::from_pixels(width, height, pixels)
}

/// Reads one whitespace-delimited decimal from the header, skipping
/// `#`-to-newline comments. Exactly one whitespace byte follows the token.
fn read_header_int(r: &mut impl Read) -> Result<usize> {
    let mut byte = [0u8; 1];
    let mut next = || -> Result<u8> {
        r.read_exact(&mut byte).map_err(|_| pgm_err("truncated header"))?;
        Ok(byte[0])
    };

    let mut b = next()?;
    loop {
        if b == b'#' {
            while b != b'\n' {
                b = next()?;
            }
        } else if b.is_ascii_whitespace() {
            b = next()?;
        } else {
            break;
        }
    }

    let mut value: usize = 0;
    let mut digits = 0;
    while b.is_ascii_digit() {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| pgm_err("header value overflow"))?;
        digits += 1;
        b = next()?;
    }
    if digits == 0 {
        return Err(pgm_err("expected integer in header"));
    }
    if !b.is_ascii_whitespace() {
        return Err(pgm_err("missing whitespace after header value"));
    }
    Ok(value)
}

fn pgm_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "PGM",
        reason: reason.into(),
    }
}

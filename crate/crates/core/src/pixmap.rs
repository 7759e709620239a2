//! In-memory RGB images and binary PPM/PGM files.
//!
//! Pixels live in `[0, 1]` as `f32`, row-major, channels interleaved. Disk
//! round-trips quantize through `u8`, so a freshly loaded image always holds
//! exact multiples of 1/255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// `height * width * 3` values in `[0, 1]`.
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Image {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width * 3, "pixel buffer length");
        debug_assert!(
            pixels.iter().all(|v| (0.0..=1.0).contains(v)),
            "pixel out of [0, 1]"
        );
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Draws a one-pixel hollow rectangle, clipped to the image.
    pub fn draw_rect(&mut self, x1: usize, y1: usize, x2: usize, y2: usize, rgb: [f32; 3]) {
        for x in x1..=x2.min(self.width - 1) {
            if y1 < self.height {
                self.set(y1, x, rgb);
            }
            if y2 < self.height {
                self.set(y2, x, rgb);
            }
        }
        for y in y1..=y2.min(self.height - 1) {
            if x1 < self.width {
                self.set(y, x1, rgb);
            }
            if x2 < self.width {
                self.set(y, x2, rgb);
            }
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height).map_err(io_err)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| quantize(v)).collect();
        w.write_all(&bytes).map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        parse_ppm(&bytes).map_err(|msg| Error::ImageFormat(format!("{}: {msg}", path.display())))
    }
}

/// Writes a grayscale map as a binary PGM, useful for inspecting attention.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), height * width, "pgm buffer length");
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    write!(w, "P5\n{width} {height}\n255\n").map_err(io_err)?;
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes).map_err(io_err)?;
    w.flush().map_err(io_err)?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or("missing magic")?;
    if magic != b"P6" {
        return Err(format!(
            "expected P6, found {:?}",
            String::from_utf8_lossy(magic)
        ));
    }
    let width = parse_dim(bytes, &mut pos, "width")?;
    let height = parse_dim(bytes, &mut pos, "height")?;
    let maxval = parse_dim(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes"))?;
    let pixels = raster.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image::from_pixels(height, width, pixels))
}

fn parse_dim(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, String> {
    let tok = next_token(bytes, pos).ok_or_else(|| format!("missing {what}"))?;
    let s = std::str::from_utf8(tok).map_err(|_| format!("non-ascii {what}"))?;
    let v: usize = s.parse().map_err(|_| format!("bad {what}: {s:?}"))?;
    if v == 0 || v > 1 << 20 {
        return Err(format!("{what} {v} out of range"));
    }
    Ok(v)
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

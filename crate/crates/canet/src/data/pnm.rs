//! Binary PPM (P6) image and PGM (P5) label I/O, maxval 255. Round trips are
//! lossless for 8-bit data; parse errors carry the byte offset.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Scanner { bytes, pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    fn expect_magic(&mut self, magic: &str) -> Result<()> {
        if self.bytes.len() < 2 || &self.bytes[..2] != magic.as_bytes() {
            return Err(self.err(format!("expected {magic} magic")));
        }
        self.pos = 2;
        Ok(())
    }

    /// Skips whitespace and `#` comment lines between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("bad {what}")))
    }

    /// Header ends with exactly one whitespace byte before the raster.
    fn payload(&mut self, expected: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(self.err("expected single whitespace before raster"));
        }
        self.pos += 1;
        let actual = self.bytes.len() - self.pos;
        if actual < expected {
            return Err(self.err(format!("truncated {what}: expected {expected} bytes, found {actual}")));
        }
        Ok(&self.bytes[self.pos..self.pos + expected])
    }
}

fn parse_header(scanner: &mut Scanner, magic: &str) -> Result<(usize, usize)> {
    scanner.expect_magic(magic)?;
    let width = scanner.read_number("width")?;
    let height = scanner.read_number("height")?;
    let maxval = scanner.read_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(scanner.err("zero image dimension"));
    }
    if maxval != 255 {
        return Err(scanner.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    Ok((width, height))
}

/// Parses a binary PPM into a (1,3,H,W) tensor with values in [0,1].
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut scanner = Scanner::new(bytes);
    let (width, height) = parse_header(&mut scanner, "P6")?;
    let raster = scanner.payload(width * height * 3, "pixel data")?;
    let shape = Shape::new(1, 3, height, width);
    let mut data = vec![0.0; shape.numel()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                data[shape.index(0, c, y, x)] = raster[(y * width + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(shape, data))
}

pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    assert_eq!((s.n, s.c), (1, 3), "expected a (1,3,H,W) image, got {s}");
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push((image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Parses a binary PGM into a label map; pixel value is the class id.
pub fn parse_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let mut scanner = Scanner::new(bytes);
    let (width, height) = parse_header(&mut scanner, "P5")?;
    let raster = scanner.payload(width * height, "pixel data")?;
    Ok(LabelMap::from_vec(1, height, width, raster.to_vec()))
}

pub fn encode_pgm(label: &LabelMap) -> Vec<u8> {
    assert_eq!(label.n, 1, "expected a single label map");
    let mut out = format!("P5\n{} {}\n255\n", label.w, label.h).into_bytes();
    out.extend_from_slice(label.data());
    out
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

pub fn write_pgm(path: &Path, label: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(label)).map_err(|e| Error::io(path, e))
}

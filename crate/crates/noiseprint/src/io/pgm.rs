//! Binary (P5) PGM reading and writing.
//!
//! Planes hold values in [0, 1]; writers quantize to the chosen bit depth
//! and the reader maps samples back through division by maxval. 16-bit
//! samples are big-endian on disk, as the format requires.

use crate::error::{Error, Result};
use crate::plane::{Mask, Plane};
use std::fs;
use std::path::Path;

pub fn write_pgm8(path: &Path, plane: &Plane) -> Result<()> {
    let mut bytes = header(plane, 255);
    bytes.reserve(plane.len());
    for &v in plane.data() {
        bytes.push(quantize(v, 255.0) as u8);
    }
    super::write_atomic(path, &bytes)
}

pub fn write_pgm16(path: &Path, plane: &Plane) -> Result<()> {
    let mut bytes = header(plane, 65535);
    bytes.reserve(plane.len() * 2);
    for &v in plane.data() {
        bytes.extend_from_slice(&(quantize(v, 65535.0) as u16).to_be_bytes());
    }
    super::write_atomic(path, &bytes)
}

/// Writes a mask as an 8-bit PGM with 255 marking the region.
pub fn write_mask_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    bytes.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    super::write_atomic(path, &bytes)
}

pub fn read_pgm(path: &Path) -> Result<Plane> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let (width, height, maxval, offset) = parse_header(path, &bytes)?;
    let n = width * height;
    let mut data = Vec::with_capacity(n);
    if maxval < 256 {
        let samples = bytes
            .get(offset..offset + n)
            .ok_or_else(|| Error::format(path, 0, format!("truncated: expected {n} samples")))?;
        data.extend(samples.iter().map(|&b| b as f32 / maxval as f32));
    } else {
        let samples = bytes.get(offset..offset + 2 * n).ok_or_else(|| {
            Error::format(path, 0, format!("truncated: expected {n} 16-bit samples"))
        })?;
        data.extend(
            samples
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / maxval as f32),
        );
    }
    Plane::from_vec(width, height, data)
}

/// Reads a PGM as a mask; any nonzero sample marks the pixel.
pub fn read_mask_pgm(path: &Path) -> Result<Mask> {
    let plane = read_pgm(path)?;
    let mut mask = Mask::empty(plane.width(), plane.height());
    for y in 0..plane.height() {
        for x in 0..plane.width() {
            if plane.get(x, y) > 0.0 {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

fn header(plane: &Plane, maxval: u32) -> Vec<u8> {
    format!("P5\n{} {}\n{}\n", plane.width(), plane.height(), maxval).into_bytes()
}

fn quantize(v: f32, maxval: f32) -> u32 {
    (v.clamp(0.0, 1.0) * maxval).round() as u32
}

/// Parses "P5 <w> <h> <maxval>" allowing comments and arbitrary whitespace,
/// returning the offset of the first raster byte.
fn parse_header(path: &Path, bytes: &[u8]) -> Result<(usize, usize, u32, usize)> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::format(path, 1, "not a binary PGM (missing P5 magic)".to_string()));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        // Skip whitespace and '#' comments that run to end of line.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => {
                    return Err(Error::format(path, 1, "truncated PGM header".to_string()));
                }
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(Error::format(path, 1, "expected a number in PGM header".to_string()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits are valid utf8")
            .parse()
            .map_err(|_| Error::format(path, 1, "PGM header number out of range".to_string()))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format(path, 1, "missing separator before PGM raster".to_string()));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0] as usize, fields[1] as usize, fields[2] as u32);
    if w == 0 || h == 0 {
        return Err(Error::format(path, 1, format!("degenerate PGM dimensions {w}x{h}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, 1, format!("unsupported PGM maxval {maxval}")));
    }
    Ok((w, h, maxval, pos))
}

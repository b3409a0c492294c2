//! Binary 8-bit PGM (P5) and PPM (P6) encoding, plus a strict decoder that
//! accepts exactly what the encoder writes.

use std::path::Path;

use crate::error::{Error, Result};

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Image(format!(
            "P5 payload has {} bytes, expected {}",
            pixels.len(),
            width * height
        )));
    }
    let mut out = header("P5", width, height);
    out.extend_from_slice(pixels);
    Ok(out)
}

/// `pixels` is interleaved RGB.
pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != 3 * width * height {
        return Err(Error::Image(format!(
            "P6 payload has {} bytes, expected {}",
            pixels.len(),
            3 * width * height
        )));
    }
    let mut out = header("P6", width, height);
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, pixels)?)?;
    Ok(())
}

pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, encode_ppm(width, height, pixels)?)?;
    Ok(())
}

/// Decoded raster: width, height, and the raw samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Parse a P5 or P6 file: magic, single whitespace-separated decimal
/// width/height/maxval fields, maxval 255, then exactly the payload.
pub fn decode_strict(bytes: &[u8]) -> Result<Raster> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Image("missing P5/P6 magic".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(Error::Image(format!("expected whitespace at byte {pos}")));
        }
        pos += 1;
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image(format!("expected a decimal field at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image("header field out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Image("missing separator after maxval".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Image(format!("maxval {maxval}, expected 255")));
    }
    let payload = &bytes[pos..];
    if payload.len() != width * height * channels {
        return Err(Error::Image(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            width * height * channels
        )));
    }
    Ok(Raster {
        width,
        height,
        channels,
        pixels: payload.to_vec(),
    })
}

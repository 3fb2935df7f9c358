//! Binary PGM (P5) and PPM (P6) images. 16-bit samples are big-endian, as
//! the Netpbm format requires.

use std::path::Path;

use echodepth_core::{Error, Result};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// A decoded grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

pub fn encode_pgm16(width: usize, height: usize, pixels: &[u16]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &p in pixels {
        buf.extend_from_slice(&p.to_be_bytes());
    }
    buf
}

pub fn encode_pgm8(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    buf
}

/// `rgb` is interleaved, three bytes per pixel.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(rgb);
    buf
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
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
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Gray> {
    let mut pos = 0;
    if token(bytes, &mut pos) != Some(b"P5") {
        return Err(format_err(path, "not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format_err(path, format!("bad PGM {what}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("PGM maxval {maxval} out of range")));
    }
    pos += 1;
    let n = width * height;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let data = bytes
        .get(pos..)
        .filter(|d| d.len() == need)
        .ok_or_else(|| format_err(path, format!("expected {need} bytes of pixel data")))?;
    let pixels = if wide {
        data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    Ok(Gray {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_pgm(&bytes, path)
}

/// Meters per 16-bit level in exported depth maps.
pub const DEPTH_METERS_PER_LEVEL: f64 = 0.001;

/// Depth in meters to 16-bit levels; values past the top level saturate.
pub fn depth_to_levels(depth: &[f64]) -> Vec<u16> {
    depth
        .iter()
        .map(|&d| (d.max(0.0) / DEPTH_METERS_PER_LEVEL).round().min(65535.0) as u16)
        .collect()
}

pub fn levels_to_depth(levels: &[u16]) -> Vec<f64> {
    levels.iter().map(|&l| l as f64 * DEPTH_METERS_PER_LEVEL).collect()
}

/// Maps values in `[0, 1]` to bytes, clamping anything outside.
pub fn unit_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Log-magnitude heatmap normalised by its own maximum.
pub fn heatmap(values: &[f64]) -> Vec<u8> {
    let logs: Vec<f64> = values.iter().map(|v| v.max(0.0).ln_1p()).collect();
    let top = logs.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return vec![0; values.len()];
    }
    unit_to_bytes(&logs.iter().map(|v| v / top).collect::<Vec<_>>())
}

//! Binary PGM (P5, 8-bit) reading and writing.

use crate::error::{invalid, Error, Result};
use crate::ioutil::write_atomic;
use std::fs;
use std::path::Path;

/// Writes an 8-bit P5 image.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(invalid(format!(
            "pgm: {} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    write_atomic(path, &bytes)
}

/// Writes depth values in [0, 1] as `round(255 * value)`.
pub fn write_depth_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let pixels: Vec<u8> = values
        .iter()
        .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    write_pgm(path, width, height, &pixels)
}

/// Writes arbitrary values min-max normalized to the full 8-bit range.
/// A constant image maps to mid-gray.
pub fn write_normalized_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = if span <= 0.0 {
        vec![128; values.len()]
    } else {
        values
            .iter()
            .map(|v| (255.0 * (v - lo) / span).round() as u8)
            .collect()
    };
    write_pgm(path, width, height, &pixels)
}

/// Reads a P5 image; returns (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;

    let mut next_token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comment lines between header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
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
            return Err(Error::Parse {
                line: 0,
                message: "unexpected end of pgm header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(&bytes)?;
    if magic != "P5" {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected P5 magic, got '{magic}'"),
        });
    }
    let parse_dim = |tok: String| -> Result<usize> {
        tok.parse::<usize>().map_err(|_| Error::Parse {
            line: 1,
            message: format!("non-numeric pgm header token '{tok}'"),
        })
    };
    let width = parse_dim(next_token(&bytes)?)?;
    let height = parse_dim(next_token(&bytes)?)?;
    let maxval = parse_dim(next_token(&bytes)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported pgm maxval {maxval}"),
        });
    }
    // Exactly one whitespace byte separates the header from raster data.
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "pgm raster truncated: need {need} bytes, have {}",
                bytes.len().saturating_sub(pos)
            ),
        });
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

/// Reads a P5 image back into [0, 1] depth values.
pub fn read_depth_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (w, h, pixels) = read_pgm(path)?;
    Ok((w, h, pixels.iter().map(|p| *p as f64 / 255.0).collect()))
}

//! Fixture and dump formats: 16-bit PGM maps, 8-bit PPM previews and
//! little-endian matrix blobs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, SpatialMap};

const BLOB_HEADER: usize = 8;

/// Binary P5 PGM with maxval 65535. Values are divided by `max`, clamped to
/// `[0, 1]` and rounded; samples are big-endian as Netpbm requires.
pub fn encode_pgm16(map: &SpatialMap, max: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width(), map.height()).into_bytes();
    out.reserve(map.values().len() * 2);
    for &v in map.values() {
        let scaled = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        let sample = (scaled * 65535.0).round() as u16;
        out.extend_from_slice(&sample.to_be_bytes());
    }
    out
}

/// Inverse of [`encode_pgm16`], multiplying samples back by `max`.
pub fn decode_pgm16(bytes: &[u8], max: f64) -> Result<SpatialMap> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or_default().to_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(Error::Format("expected 16-bit P5 PGM".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM dimension {s:?}")))
    };
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != width * height * 2 {
        return Err(Error::Format("PGM body length mismatch".into()));
    }
    let values = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0 * max)
        .collect();
    SpatialMap::new(height, width, values)
}

pub fn write_pgm16(path: impl AsRef<Path>, map: &SpatialMap, max: f64) -> Result<()> {
    fs::write(path, encode_pgm16(map, max))?;
    Ok(())
}

/// 8-bit P6 preview of three channels of a latent laid out on `grid`,
/// each channel min-max scaled independently.
pub fn encode_latent_ppm(latent: &Matrix, grid: (usize, usize)) -> Result<Vec<u8>> {
    let (h, w) = grid;
    if latent.rows() != h * w || latent.cols() == 0 {
        return Err(Error::shape(format!(
            "latent {:?} does not cover a {h}x{w} grid",
            latent.shape()
        )));
    }
    let channels: Vec<usize> = (0..3).map(|c| c.min(latent.cols() - 1)).collect();
    let ranges: Vec<(f64, f64)> = channels
        .iter()
        .map(|&c| {
            (0..latent.rows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                let v = latent.get(r, c);
                (lo.min(v), hi.max(v))
            })
        })
        .collect();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for r in 0..latent.rows() {
        for (&c, &(lo, hi)) in channels.iter().zip(&ranges) {
            let v = if hi > lo {
                (latent.get(r, c) - lo) / (hi - lo)
            } else {
                0.0
            };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// `rows: u32 LE | cols: u32 LE | rows*cols f64 LE`.
pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(BLOB_HEADER + m.data().len() * 8);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one blob from the front of `bytes`, returning it and the bytes consumed.
pub fn decode_matrix_prefix(bytes: &[u8]) -> Result<(Matrix, usize)> {
    if bytes.len() < BLOB_HEADER {
        return Err(Error::Format("matrix blob shorter than its header".into()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let len = BLOB_HEADER + rows * cols * 8;
    if bytes.len() < len {
        return Err(Error::Format(format!(
            "matrix blob {rows}x{cols} truncated: {} of {len} bytes",
            bytes.len()
        )));
    }
    let data = bytes[BLOB_HEADER..len]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Matrix::new(rows, cols, data)?, len))
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let (m, used) = decode_matrix_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after matrix blob",
            bytes.len() - used
        )));
    }
    Ok(m)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    fs::write(path, encode_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    decode_matrix(&fs::read(path)?)
}

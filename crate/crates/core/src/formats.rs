//! File formats: PDIT tensors, PGM frames and masks, `step,value` series.
//!
//! A PDIT file is a 16-byte preamble (`b"PDIT"`, version, rank, reserved
//! zero word, all little-endian `u32`), then `rank` extents as `u32`, then
//! the elements as little-endian `f64` in row-major order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dit::{Grid, LatentVideo};
use crate::error::{Error, Result};
use crate::profiler::ForegroundMask;
use crate::tensor::Tensor;

const PDIT_MAGIC: &[u8; 4] = b"PDIT";
const PDIT_VERSION: u32 = 1;

pub fn encode_pdit(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(PDIT_MAGIC);
    out.extend_from_slice(&PDIT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_pdit(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header".into()))
    };
    if bytes.get(..4) != Some(PDIT_MAGIC.as_slice()) {
        return Err(bad("missing PDIT magic".into()));
    }
    let version = word(4)?;
    if version != PDIT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let rank = word(8)? as usize;
    word(12)?;
    let shape = (0..rank).map(|i| word(16 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let body = &bytes[16 + 4 * rank..];
    let n: usize = shape.iter().product();
    if body.len() != 8 * n {
        return Err(bad(format!("expected {} data bytes, found {}", 8 * n, body.len())));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_pdit(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_pdit(t))
}

pub fn read_pdit(path: &Path) -> Result<Tensor> {
    decode_pdit(&read_bytes(path)?, path)
}

/// Binary greyscale image, maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a P5 image with maxval 255, returning `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if bytes.get(i) == Some(&b'#') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = bytes.get(i + 1..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != w * h {
        return Err(bad("raster size does not match header"));
    }
    Ok((w, h, raster.to_vec()))
}

/// One image per frame: per-token L2 norm over channels, min-max scaled to
/// 0..=255 within the frame (a flat frame renders black).
pub fn render_frames(latent: &LatentVideo) -> Vec<Vec<u8>> {
    let g = latent.grid();
    let tokens = latent.to_tokens();
    (0..g.frames)
        .map(|f| {
            let norms: Vec<f64> = (0..g.frame_tokens())
                .map(|k| tokens.row(f * g.frame_tokens() + k).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pixels: Vec<u8> = norms
                .iter()
                .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
                .collect();
            encode_pgm(g.width, g.height, &pixels)
        })
        .collect()
}

/// Reads a mask image with the frames stacked vertically (`H * T_f` rows of
/// width `W`); nonzero pixels are foreground.
pub fn read_mask_pgm(path: &Path, grid: Grid) -> Result<ForegroundMask> {
    let (w, h, pixels) = decode_pgm(&read_bytes(path)?, path)?;
    if w != grid.width || h != grid.height * grid.frames {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "mask is {w}x{h}, expected {}x{} ({} frames of {}x{})",
                grid.width,
                grid.height * grid.frames,
                grid.frames,
                grid.width,
                grid.height
            ),
        });
    }
    Ok(ForegroundMask::external(pixels.into_iter().map(|p| p != 0).collect()))
}

pub fn mask_to_pgm(mask: &ForegroundMask, grid: Grid) -> Vec<u8> {
    let pixels: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_pgm(grid.width, grid.height * grid.frames, &pixels)
}

/// `header` line then `index,value` rows; floats use shortest round-trip form.
pub fn series_csv<T: std::fmt::Display>(header: &str, values: &[T]) -> String {
    let mut out = format!("{header}\n");
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{i},{v}").unwrap();
    }
    out
}

//! Grayscale PFM disparity maps, 8-bit PGM previews and PPM colour images.

use std::fs;
use std::path::{Path, PathBuf};

use mafnet_core::head::DisparityMap;
use mafnet_core::Tensor;

use crate::error::{Error, Result};

/// Written in place of invalid disparities.
pub const INVALID: f32 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Grayscale PFM bytes: rows bottom to top, the scale sign encoding byte order.
pub fn encode_pfm(map: &DisparityMap, endian: Endian) -> Vec<u8> {
    let (h, w) = (map.height(), map.width());
    let scale = match endian {
        Endian::Little => "-1.0",
        Endian::Big => "1.0",
    };
    let mut out = format!("Pf\n{w} {h}\n{scale}\n").into_bytes();
    out.reserve(4 * h * w);
    for y in (0..h).rev() {
        for x in 0..w {
            let i = y * w + x;
            let v = if map.valid[i] { map.values.data()[i] as f32 } else { INVALID };
            out.extend_from_slice(&match endian {
                Endian::Little => v.to_le_bytes(),
                Endian::Big => v.to_be_bytes(),
            });
        }
    }
    out
}

/// Splits off whitespace-separated header tokens, returning the token and the
/// rest after exactly one delimiter byte.
fn token<'a>(bytes: &'a [u8], path: &Path, field: &'static str) -> Result<(&'a str, &'a [u8])> {
    let start = bytes
        .iter()
        .position(|b| !b.is_ascii_whitespace())
        .ok_or_else(|| format_err(path, field, "missing"))?;
    let rest = &bytes[start..];
    let end = rest
        .iter()
        .position(|b| b.is_ascii_whitespace())
        .ok_or_else(|| format_err(path, field, "unterminated"))?;
    let tok = std::str::from_utf8(&rest[..end]).map_err(|_| format_err(path, field, "not ASCII"))?;
    Ok((tok, &rest[end + 1..]))
}

fn format_err(path: &Path, field: &'static str, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field,
        msg: msg.into(),
    }
}

fn dimension(tok: &str, path: &Path, field: &'static str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format_err(path, field, format!("expected a positive integer, got {tok:?}"))),
    }
}

/// Parse grayscale PFM. Negative and non-finite samples read back as invalid.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<DisparityMap> {
    let (magic, rest) = token(bytes, path, "magic")?;
    match magic {
        "Pf" => {}
        "PF" => return Err(format_err(path, "magic", "colour PFM (PF) is not supported")),
        other => return Err(format_err(path, "magic", format!("expected Pf, got {other:?}"))),
    }
    let (w, rest) = token(rest, path, "width")?;
    let w = dimension(w, path, "width")?;
    let (h, rest) = token(rest, path, "height")?;
    let h = dimension(h, path, "height")?;
    let (scale, payload) = token(rest, path, "scale")?;
    let scale: f64 = scale
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| format_err(path, "scale", format!("expected a non-zero number, got {scale:?}")))?;
    let endian = if scale < 0.0 { Endian::Little } else { Endian::Big };
    let need = 4 * h * w;
    if payload.len() < need {
        return Err(format_err(
            path,
            "payload",
            format!("truncated: {} of {} bytes", payload.len(), need),
        ));
    }
    let mut vals = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    for (k, chunk) in payload[..need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = match endian {
            Endian::Little => f32::from_le_bytes(raw),
            Endian::Big => f32::from_be_bytes(raw),
        };
        // file rows run bottom to top
        let (fy, x) = (k / w, k % w);
        let i = (h - 1 - fy) * w + x;
        if v.is_finite() && v >= 0.0 {
            vals[i] = v as f64;
            valid[i] = true;
        }
    }
    Ok(DisparityMap::new(Tensor::new(&[h, w], vals)?, valid)?)
}

pub fn write_pfm(map: &DisparityMap, path: &Path) -> Result<()> {
    fs::write(path, encode_pfm(map, Endian::Little)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<DisparityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

/// 8-bit preview, `[0, dmax]` mapped linearly to `[0, 255]`; invalid pixels
/// are black.
pub fn encode_pgm(map: &DisparityMap, dmax: f64) -> Vec<u8> {
    let (h, w) = (map.height(), map.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let scale = if dmax > 0.0 { 255.0 / dmax } else { 0.0 };
    out.extend(map.values.data().iter().zip(&map.valid).map(|(v, ok)| {
        if *ok {
            (v * scale).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(map: &DisparityMap, dmax: f64, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(map, dmax)).map_err(|e| Error::io(path, e))
}

/// Binary PPM of a `[3, H, W]` image in `[0, 1]`.
pub fn encode_ppm(img: &Tensor) -> Vec<u8> {
    let (h, w) = (img.dim(1), img.dim(2));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// `[3, H, W]` in `[0, 1]` from binary PPM (P6) or PGM (P5, replicated to three
/// channels), 8-bit only.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (magic, rest) = token(bytes, path, "magic")?;
    let channels = match magic {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format_err(path, "magic", format!("expected P6 or P5, got {other:?}"))),
    };
    let (w, rest) = token(rest, path, "width")?;
    let w = dimension(w, path, "width")?;
    let (h, rest) = token(rest, path, "height")?;
    let h = dimension(h, path, "height")?;
    let (maxval, payload) = token(rest, path, "maxval")?;
    if maxval != "255" {
        return Err(format_err(path, "maxval", format!("only 8-bit images are supported, got {maxval}")));
    }
    let need = channels * h * w;
    if payload.len() < need {
        return Err(format_err(
            path,
            "payload",
            format!("truncated: {} of {} bytes", payload.len(), need),
        ));
    }
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let src = if channels == 3 { p * 3 + c } else { p };
        payload[src] as f64 / 255.0
    }))
}

pub fn write_ppm(img: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// `<dir>/<index>_left.ppm` and friends.
pub fn sample_paths(dir: &Path, index: usize) -> [PathBuf; 3] {
    [
        dir.join(format!("{index:04}_left.ppm")),
        dir.join(format!("{index:04}_right.ppm")),
        dir.join(format!("{index:04}_disp.pfm")),
    ]
}

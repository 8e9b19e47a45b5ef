//! Netpbm writers (binary PGM / PPM) for masks, samples and perturbations.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5) from row-major intensities in [0, 1].
pub fn encode_pgm(width: usize, height: usize, gray: &[f32]) -> Result<Vec<u8>> {
    if gray.len() != width * height {
        return Err(Error::Format(format!(
            "pgm expects {} values, got {}",
            width * height,
            gray.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(gray.iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Binary PPM (P6) from a planar `[3, H, W]` image in [0, 1].
pub fn encode_ppm(width: usize, height: usize, chw: &[f32]) -> Result<Vec<u8>> {
    let plane = width * height;
    if chw.len() != 3 * plane {
        return Err(Error::Format(format!(
            "ppm expects {} values, got {}",
            3 * plane,
            chw.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_byte(chw[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Parse a binary PPM written by [`encode_ppm`] back into planar floats.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut fields = Vec::new();
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only 8-bit P6 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated body"))?;
    let plane = w * h;
    let mut chw = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            chw[c * plane + p] = body[3 * p + c] as f32 / 255.0;
        }
    }
    Ok((w, h, chw))
}

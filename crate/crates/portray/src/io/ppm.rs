//! Binary 8-bit portable pixmap (P6) read/write.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Write planar RGB data (`[3, h, w]`, values in [0,1]) as a P6 file.
pub fn write_ppm(path: &Path, h: usize, w: usize, planar_rgb: &[f64]) -> Result<()> {
    assert_eq!(planar_rgb.len(), 3 * h * w);
    let mut buf = Vec::with_capacity(3 * h * w + 32);
    buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let v = planar_rgb[(c * h + i) * w + j];
                buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a P6 file into planar RGB `[3, h, w]` with values in [0,1].
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_ppm(&bytes)
}

pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated pixmap header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).to_string())
    };
    if token(bytes)? != "P6" {
        return Err(Error::Format("not a P6 pixmap".into()));
    }
    let w: usize = token(bytes)?.parse().map_err(|_| Error::Format("bad width".into()))?;
    let h: usize = token(bytes)?.parse().map_err(|_| Error::Format("bad height".into()))?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| Error::Format("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::Format("truncated pixel data".into()));
    }
    let mut planar = vec![0.0f64; need];
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                planar[(c * h + i) * w + j] = bytes[pos + (i * w + j) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok((h, w, planar))
}

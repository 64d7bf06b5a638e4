//! Binary PGM/PPM encoders and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diag::InfluenceMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::toydit::LatentGrid;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid("path", format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// 8-bit binary PGM (P5).
pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    if gray.len() != width * height {
        return Err(Error::shape("pgm pixels", width * height, gray.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    Ok(out)
}

/// 8-bit binary PPM (P6).
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::shape("ppm pixels", 3 * width * height, rgb.len()));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn influence_pgm(map: &InfluenceMap) -> Result<Vec<u8>> {
    encode_pgm(map.grid_w, map.grid_h, &map.to_gray())
}

/// RGB bytes from the first three channels, each mapped linearly from its
/// own `[min, max]` to `[0, 255]`. Missing channels repeat the last one;
/// constant channels map to 0.
pub fn latent_rgb<T: Scalar>(latent: &LatentGrid<T>) -> Vec<u8> {
    let cells = latent.height * latent.width;
    let ch = latent.channels;
    let pick = |k: usize| k.min(ch - 1);
    let ranges: Vec<(f64, f64)> = (0..3)
        .map(|k| {
            let c = pick(k);
            (0..cells).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                let v = latent.data[i * ch + c].as_f64();
                (lo.min(v), hi.max(v))
            })
        })
        .collect();
    let mut out = Vec::with_capacity(3 * cells);
    for i in 0..cells {
        for (k, &(lo, hi)) in ranges.iter().enumerate() {
            let v = latent.data[i * ch + pick(k)].as_f64();
            let span = hi - lo;
            let x = if span > 0.0 { (v - lo) / span } else { 0.0 };
            out.push((x * 255.0).round() as u8);
        }
    }
    out
}

pub fn latent_ppm<T: Scalar>(latent: &LatentGrid<T>) -> Result<Vec<u8>> {
    encode_ppm(latent.width, latent.height, &latent_rgb(latent))
}

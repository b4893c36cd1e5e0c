//! IDX container reading and writing (big-endian header, unsigned bytes).

use std::path::Path;

use crate::error::{Error, Result};

use super::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, format!("truncated header at byte {at}")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &str) -> Result<()> {
    let got = bytes
        .get(..4)
        .ok_or_else(|| Error::format(path, "file shorter than the 4-byte magic"))?;
    if u32::from_be_bytes(got.try_into().unwrap()) != expected {
        return Err(Error::format(
            path,
            format!(
                "bad magic {:02x} {:02x} {:02x} {:02x}, expected {expected:08x}",
                got[0], got[1], got[2], got[3]
            ),
        ));
    }
    Ok(())
}

/// `(count, rows, cols, pixels)` from an IDX image file.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IMAGES_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::format(
            path,
            format!("{n} images of {rows}x{cols} need {need} bytes, found {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(path, format!("{n} labels declared, found {} bytes", body.len())));
    }
    Ok(body.to_vec())
}

pub fn write_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Load an image/label file pair. Ten classes.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = std::fs::read(ip).map_err(|e| Error::format(ip, e.to_string()))?;
    let lb = std::fs::read(lp).map_err(|e| Error::format(lp, e.to_string()))?;
    let (n, rows, cols, pixels) = parse_idx_images(&ib, &ip.display().to_string())?;
    let labels = parse_idx_labels(&lb, &lp.display().to_string())?;
    if labels.len() != n {
        return Err(Error::format(
            lp,
            format!("{} labels for {n} images in {}", labels.len(), ip.display()),
        ));
    }
    Dataset::new([1, rows, cols], 10, pixels, labels)
}

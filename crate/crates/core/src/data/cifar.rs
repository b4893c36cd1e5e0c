//! CIFAR-10 binary batches: 3073-byte records, one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes.

use std::path::Path;

use crate::error::{Error, Result};

use super::Dataset;

pub const RECORD_LEN: usize = 3073;

pub fn parse_cifar(bytes: &[u8], path: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::format(
            path,
            format!("length {} is not a multiple of {RECORD_LEN}", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD_LEN - 1));
    for rec in bytes.chunks_exact(RECORD_LEN) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

pub fn load_cifar_binary<P: AsRef<Path>>(files: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let f = f.as_ref();
        let bytes = std::fs::read(f).map_err(|e| Error::format(f, e.to_string()))?;
        let (p, l) = parse_cifar(&bytes, &f.display().to_string())?;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::new([3, 32, 32], 10, pixels, labels)
}

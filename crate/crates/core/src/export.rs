//! Binary PGM/PPM grids of image batches, for eyeballing reconstructions.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Tile a `[B, C, H, W]` batch (C = 1 or 3, values in [0, 1]) into a grid
/// `cols` images wide with a one-pixel gap. Returns
/// `(width, height, channels, bytes)`, channels interleaved.
pub fn tile<T: Real>(images: &Tensor<T>, cols: usize) -> Result<(usize, usize, usize, Vec<u8>)> {
    let &[b, c, h, w] = images.shape() else {
        return Err(Error::shape("tile", format!("expected [B,C,H,W], got {:?}", images.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::shape("tile", format!("{c} channels")));
    }
    let cols = cols.clamp(1, b.max(1));
    let rows = b.div_ceil(cols);
    let gw = cols * (w + 1) - 1;
    let gh = rows * (h + 1) - 1;
    let mut out = vec![0u8; gw * gh * c];
    let data = images.data();
    for n in 0..b {
        let (oy, ox) = ((n / cols) * (h + 1), (n % cols) * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = data[((n * c + ch) * h + y) * w + x].to_f64().unwrap_or(0.0);
                    out[((oy + y) * gw + ox + x) * c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    Ok((gw, gh, c, out))
}

/// Write the grid as P5 (grey) or P6 (RGB).
pub fn write_grid<T: Real>(images: &Tensor<T>, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    let (w, h, c, bytes) = tile(images, cols)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P{}\n{w} {h}\n255\n", if c == 1 { 5 } else { 6 })?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout() {
        let t = Tensor::<f64>::from_f64(vec![3, 1, 2, 2], &[0.0, 1.0, 0.5, 0.0, 1.0, 1.0, 1.0, 1.0, 0.2, 0.2, 0.2, 0.2]).unwrap();
        let (w, h, c, px) = tile(&t, 2).unwrap();
        assert_eq!((w, h, c), (5, 5, 1));
        assert_eq!(&px[..5], &[0, 255, 0, 255, 255]);
        assert_eq!(px[2 * 5 + 2], 0);
        assert_eq!(px[3 * 5], 51);
    }
}

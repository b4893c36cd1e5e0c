//! Expanded MNIST: 28x28 digits placed at a random offset on a 40x40
//! zero canvas, 13 x 13 = 169 possible placements.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::Dataset;

pub const EXPANDED_SIDE: usize = 40;
/// Largest offset on either axis.
pub const EXPANDED_MARGIN: usize = 12;

/// Place a 28x28 image with its top-left corner at `(dx, dy)`.
pub fn place_at(image: &[u8], dx: usize, dy: usize) -> Result<Vec<u8>> {
    if image.len() != 28 * 28 {
        return Err(Error::shape(
            "expanded mnist",
            format!("expected a 28x28 image, got {} pixels", image.len()),
        ));
    }
    if dx > EXPANDED_MARGIN || dy > EXPANDED_MARGIN {
        return Err(Error::InvalidArgument(format!("offset ({dx}, {dy}) outside [0, 12]")));
    }
    let mut out = vec![0u8; EXPANDED_SIDE * EXPANDED_SIDE];
    for (y, row) in image.chunks_exact(28).enumerate() {
        let at = (y + dy) * EXPANDED_SIDE + dx;
        out[at..at + 28].copy_from_slice(row);
    }
    Ok(out)
}

/// Uniformly random placement; returns the canvas and `(dx, dy)`.
pub fn expanded_mnist_sample<R: Rng + ?Sized>(image: &[u8], rng: &mut R) -> Result<(Vec<u8>, (usize, usize))> {
    let dx = rng.random_range(0..=EXPANDED_MARGIN);
    let dy = rng.random_range(0..=EXPANDED_MARGIN);
    Ok((place_at(image, dx, dy)?, (dx, dy)))
}

/// Expanded copy of a 28x28 dataset with one random placement per image.
pub fn expand_dataset(ds: &Dataset, seed: u64) -> Result<Dataset> {
    if ds.shape != [1, 28, 28] {
        return Err(Error::shape("expanded mnist", format!("dataset images are {:?}", ds.shape)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(ds.len() * EXPANDED_SIDE * EXPANDED_SIDE);
    for i in 0..ds.len() {
        pixels.extend(expanded_mnist_sample(ds.image(i), &mut rng)?.0);
    }
    let mut out = Dataset::new(
        [1, EXPANDED_SIDE, EXPANDED_SIDE],
        ds.n_classes,
        pixels,
        ds.labels().to_vec(),
    )?;
    out.name = format!("{}-expanded", ds.name);
    out.split = ds.split;
    Ok(out)
}

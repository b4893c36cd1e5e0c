//! Datasets kept as raw bytes and scaled to `[0,1]` when batched.

pub mod batch;
pub mod cifar;
pub mod expanded;
pub mod idx;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use batch::{batch_iter, BatchIter};
pub use cifar::{load_cifar_binary, parse_cifar};
pub use expanded::{expand_dataset, expanded_mnist_sample, place_at, EXPANDED_MARGIN};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fmnist,
    Cifar10,
}

impl DatasetKind {
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist | DatasetKind::Fmnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fmnist => "fmnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// Load a split from `root/<name>/`. MNIST-style sets use the canonical
    /// IDX file names; CIFAR-10 uses `data_batch_{1..5}.bin` and
    /// `test_batch.bin`, optionally inside `cifar-10-batches-bin/`.
    pub fn load(self, root: &Path, split: Split) -> Result<Dataset> {
        let dir = root.join(self.dir_name());
        let mut ds = match self {
            DatasetKind::Mnist | DatasetKind::Fmnist => {
                let prefix = match split {
                    Split::Train => "train",
                    Split::Test => "t10k",
                };
                load_idx(
                    dir.join(format!("{prefix}-images-idx3-ubyte")),
                    dir.join(format!("{prefix}-labels-idx1-ubyte")),
                )?
            }
            DatasetKind::Cifar10 => {
                let nested = dir.join("cifar-10-batches-bin");
                let base = if nested.is_dir() { nested } else { dir };
                let files: Vec<PathBuf> = match split {
                    Split::Train => (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect(),
                    Split::Test => vec![base.join("test_batch.bin")],
                };
                load_cifar_binary(&files)?
            }
        };
        ds.name = self.dir_name().to_string();
        ds.split = split;
        Ok(ds)
    }
}

/// Dataset root: explicit path, else `DATA_DIR`, else `./data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Random images of `shape`: noise in [0, 64) plus one bright 4x4 patch
/// whose position encodes the label. Labels cycle through the classes.
pub fn synthetic(shape: [usize; 3], n_classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    use rand::{Rng, SeedableRng};
    let [c, h, w] = shape;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut pixels: Vec<u8> = (0..n * c * h * w).map(|_| rng.random_range(0..64)).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % n_classes) as u8).collect();
    let slots_x = (w / 4).max(1);
    for (i, &l) in labels.iter().enumerate() {
        let slot = l as usize % (slots_x * (h / 4).max(1));
        let (y0, x0) = ((slot / slots_x) * 4, (slot % slots_x) * 4);
        for ch in 0..c {
            for y in y0..(y0 + 4).min(h) {
                for x in x0..(x0 + 4).min(w) {
                    pixels[((i * c + ch) * h + y) * w + x] = 255;
                }
            }
        }
    }
    let mut ds = Dataset::new(shape, n_classes, pixels, labels)?;
    ds.name = "synthetic".into();
    Ok(ds)
}

/// Images as bytes in `[n,C,H,W]` order plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub shape: [usize; 3],
    pub n_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], n_classes: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} pixel bytes for {} images of {shape:?}", pixels.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::ClassIndex {
                index: bad as usize,
                classes: n_classes,
            });
        }
        Ok(Self {
            name: String::new(),
            split: Split::Train,
            shape,
            n_classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Images `[B,C,H,W]` scaled by 1/255 and their labels.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let scale = T::from_f64_lossy(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::from_u8(p).unwrap() * scale));
        }
        let [c, h, w] = self.shape;
        let images = Tensor::new(vec![indices.len(), c, h, w], data)?;
        Ok((images, indices.iter().map(|&i| self.label(i)).collect()))
    }

    /// Every image as one `[n,C,H,W]` tensor.
    pub fn images<T: Real>(&self) -> Result<Tensor<T>> {
        let all: Vec<usize> = (0..self.len()).collect();
        Ok(self.batch(&all)?.0)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            name: self.name.clone(),
            split: self.split,
            shape: self.shape,
            n_classes: self.n_classes,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

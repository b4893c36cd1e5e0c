//! Reconstruction decoders and the capsule masking that feeds them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::capsule::{capsule_lengths, select_forward, CapsuleSet};
use crate::error::{Error, Result};
use crate::init::{init_with_rng, InitScheme};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Masked output capsules through fully-connected layers.
    Fc,
    /// Winning capsule only, projected and upsampled by deconvolutions.
    ClassIndependent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeconvLayer {
    pub kernel: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// All capsules, non-winners zeroed, flattened.
    MaskAll,
    /// Only the winning capsule.
    SelectOne,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    /// `[C,H,W]` of the reconstructed image.
    pub image: [usize; 3],
    pub n_classes: usize,
    pub caps_dim: usize,
    pub fc_hidden: Vec<usize>,
    pub projection_channels: usize,
    pub deconv: Vec<DeconvLayer>,
}

const DECONV_KERNELS: [usize; 7] = [3, 5, 5, 5, 5, 3, 3];
const DECONV_CHANNELS: [usize; 6] = [128, 64, 32, 16, 16, 16];

impl DecoderConfig {
    pub fn fc(image: [usize; 3], n_classes: usize, caps_dim: usize) -> Self {
        Self {
            kind: DecoderKind::Fc,
            image,
            n_classes,
            caps_dim,
            fc_hidden: vec![512, 1024],
            projection_channels: 8,
            deconv: default_chain(image[0]),
        }
    }

    pub fn class_independent(image: [usize; 3], n_classes: usize, caps_dim: usize) -> Self {
        Self {
            kind: DecoderKind::ClassIndependent,
            ..Self::fc(image, n_classes, caps_dim)
        }
    }

    pub fn with_kind(image: [usize; 3], n_classes: usize, caps_dim: usize, kind: DecoderKind) -> Self {
        Self {
            kind,
            ..Self::fc(image, n_classes, caps_dim)
        }
    }

    pub fn image_len(&self) -> usize {
        self.image.iter().product()
    }

    pub fn input_len(&self) -> usize {
        match self.kind {
            DecoderKind::Fc => self.n_classes * self.caps_dim,
            DecoderKind::ClassIndependent => self.caps_dim,
        }
    }

    /// Side of the square map the capsule is projected to, `H - sum(k-1)`.
    pub fn projection_side(&self) -> Result<usize> {
        let shrink: usize = self.deconv.iter().map(|l| l.kernel.saturating_sub(1)).sum();
        let [_, h, w] = self.image;
        if h != w {
            return Err(Error::Config(format!(
                "deconvolutional decoder needs square images, got {h}x{w}"
            )));
        }
        if shrink >= h {
            return Err(Error::Config(format!(
                "deconvolution chain grows by {shrink}, image side is only {h}"
            )));
        }
        Ok(h - shrink)
    }

    pub fn projection_shape(&self) -> Result<[usize; 3]> {
        let s = self.projection_side()?;
        Ok([self.projection_channels, s, s])
    }

    /// `[C,H,W]` entering each deconvolution, followed by the final output.
    pub fn shape_chain(&self) -> Result<Vec<[usize; 3]>> {
        let mut cur = self.projection_shape()?;
        let mut out = vec![cur];
        for l in &self.deconv {
            cur = [l.channels, cur[1] + l.kernel - 1, cur[2] + l.kernel - 1];
            out.push(cur);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.contains(&0) || self.n_classes == 0 || self.caps_dim == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        match self.kind {
            DecoderKind::Fc => {
                if self.fc_hidden.contains(&0) {
                    return Err(Error::Config("hidden layer widths must be positive".into()));
                }
            }
            DecoderKind::ClassIndependent => {
                let last = self
                    .shape_chain()?
                    .pop()
                    .expect("chain holds at least the projection");
                if self.deconv.iter().any(|l| l.kernel == 0 || l.channels == 0) || self.projection_channels == 0 {
                    return Err(Error::Config("deconvolution kernels and channels must be positive".into()));
                }
                if self.deconv.is_empty() || last != self.image {
                    return Err(Error::Config(format!(
                        "deconvolution chain ends at {last:?}, image is {:?}",
                        self.image
                    )));
                }
            }
        }
        Ok(())
    }

    /// Named trainable-scalar counts per layer.
    pub fn layer_params(&self) -> Result<Vec<(String, usize)>> {
        let mut out = Vec::new();
        match self.kind {
            DecoderKind::Fc => {
                let mut n = self.input_len();
                let widths = self.fc_hidden.iter().copied().chain([self.image_len()]);
                for (i, m) in widths.enumerate() {
                    out.push((format!("decoder.fc{}", i + 1), n * m + m));
                    n = m;
                }
            }
            DecoderKind::ClassIndependent => {
                let proj: usize = self.projection_shape()?.iter().product();
                out.push(("decoder.projection".into(), self.caps_dim * proj + proj));
                let mut c = self.projection_channels;
                for (i, l) in self.deconv.iter().enumerate() {
                    out.push((
                        format!("decoder.deconv{}", i + 1),
                        c * l.channels * l.kernel * l.kernel + l.channels,
                    ));
                    c = l.channels;
                }
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layer_params()?.iter().map(|(_, n)| n).sum())
    }
}

fn default_chain(out_channels: usize) -> Vec<DeconvLayer> {
    DECONV_KERNELS
        .iter()
        .zip(DECONV_CHANNELS.iter().copied().chain([out_channels]))
        .map(|(&kernel, channels)| DeconvLayer { kernel, channels })
        .collect()
}

#[derive(Clone, Debug)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

/// Decoder parameters registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    layers: Vec<Affine>,
}

impl Decoder {
    pub fn build<T: Real, R: Rng + ?Sized>(config: DecoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut add = |store: &mut ParamStore<T>, name: String, wshape: Vec<usize>, fan_in: usize, bias: usize| {
            let scheme = InitScheme::UniformFanIn { fan_in };
            let weight = store.add(format!("{name}.weight"), init_with_rng(&wshape, scheme, rng));
            let bias = store.add(format!("{name}.bias"), init_with_rng(&[bias], scheme, rng));
            layers.push(Affine { weight, bias });
        };
        match config.kind {
            DecoderKind::Fc => {
                let mut n = config.input_len();
                let widths: Vec<usize> = config.fc_hidden.iter().copied().chain([config.image_len()]).collect();
                for (i, m) in widths.into_iter().enumerate() {
                    add(store, format!("decoder.fc{}", i + 1), vec![m, n], n, m);
                    n = m;
                }
            }
            DecoderKind::ClassIndependent => {
                let proj: usize = config.projection_shape()?.iter().product();
                add(store, "decoder.projection".into(), vec![proj, config.caps_dim], config.caps_dim, proj);
                let mut c = config.projection_channels;
                for (i, l) in config.deconv.iter().enumerate() {
                    let k = l.kernel;
                    add(
                        store,
                        format!("decoder.deconv{}", i + 1),
                        vec![c, l.channels, k, k],
                        c * k * k,
                        l.channels,
                    );
                    c = l.channels;
                }
            }
        }
        Ok(Self { config, layers })
    }

    /// `input: [B, input_len]` to reconstructions `[B,C,H,W]`.
    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, input: Var) -> Result<Var> {
        let batch = g.shape(input)[0];
        let last = self.layers.len() - 1;
        let mut x = input;
        match self.config.kind {
            DecoderKind::Fc => {
                for (i, l) in self.layers.iter().enumerate() {
                    let (w, b) = (g.param(store, l.weight), g.param(store, l.bias));
                    x = g.linear(x, w, Some(b))?;
                    x = if i == last { g.sigmoid(x) } else { g.relu(x) };
                    g.check_finite(x, &format!("decoder.fc{}", i + 1))?;
                }
                let [c, h, w] = self.config.image;
                g.reshape(x, vec![batch, c, h, w])
            }
            DecoderKind::ClassIndependent => {
                let proj = &self.layers[0];
                let (w, b) = (g.param(store, proj.weight), g.param(store, proj.bias));
                x = g.linear(x, w, Some(b))?;
                x = g.relu(x);
                let [c, h, wd] = self.config.projection_shape()?;
                x = g.reshape(x, vec![batch, c, h, wd])?;
                g.check_finite(x, "decoder.projection")?;
                for (i, l) in self.layers.iter().enumerate().skip(1) {
                    let (k, b) = (g.param(store, l.weight), g.param(store, l.bias));
                    x = g.deconv2d(x, k, Some(b))?;
                    x = if i == last { g.sigmoid(x) } else { g.relu(x) };
                    g.check_finite(x, &format!("decoder.deconv{i}"))?;
                }
                Ok(x)
            }
        }
    }

    /// Decoder input from output capsules `[B,classes,dim]`: the labelled
    /// capsule alone, or all capsules with the others zeroed.
    pub fn select<T: Real>(&self, g: &mut Graph<'_, T>, caps: Var, labels: &[usize]) -> Result<Var> {
        g.select_capsule(caps, labels.to_vec(), self.config.kind == DecoderKind::Fc)
    }

    /// Reconstruct images from already-masked inputs `[B, input_len]`.
    pub fn reconstruct<T: Real>(&self, store: &ParamStore<T>, masked: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(masked.clone());
        let out = self.forward(&mut g, store, x)?;
        Ok(g.value(out).clone())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Decoder input for a single capsule set. Without a label the capsule
/// with the greatest length wins.
pub fn mask_select<T: Real>(caps: &CapsuleSet<T>, label: Option<usize>, mode: MaskMode) -> Result<Tensor<T>> {
    let label = match label {
        Some(l) => l,
        None => argmax(capsule_lengths(caps).data()),
    };
    let x = caps.vectors().clone().reshape(vec![1, caps.count(), caps.dim()])?;
    let out = select_forward(&x, &[label], mode == MaskMode::MaskAll)?;
    let n = out.numel();
    out.reshape(vec![n])
}

/// Fully-connected decoder on one masked vector, `[classes*dim] -> [C,H,W]`.
pub fn fc_decoder<T: Real>(decoder: &Decoder, store: &ParamStore<T>, masked: &Tensor<T>) -> Result<Tensor<T>> {
    if decoder.config.kind != DecoderKind::Fc {
        return Err(Error::Config("fc_decoder called on a deconvolutional decoder".into()));
    }
    decode_one(decoder, store, masked)
}

/// Class-independent decoder on one winning capsule, `[dim] -> [C,H,W]`.
pub fn deconv_decoder<T: Real>(decoder: &Decoder, store: &ParamStore<T>, winning: &Tensor<T>) -> Result<Tensor<T>> {
    if decoder.config.kind != DecoderKind::ClassIndependent {
        return Err(Error::Config("deconv_decoder called on a fully-connected decoder".into()));
    }
    decode_one(decoder, store, winning)
}

fn decode_one<T: Real>(decoder: &Decoder, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let n = decoder.config.input_len();
    if input.numel() != n {
        return Err(Error::shape(
            "decoder",
            format!("input has {} values, decoder expects {n}", input.numel()),
        ));
    }
    let out = decoder.reconstruct(store, &input.clone().reshape(vec![1, n])?)?;
    out.reshape(decoder.config.image.to_vec())
}

/// `weight * sum|recon - image|` per sample, averaged over a leading batch
/// axis when the tensors are `[B,C,H,W]`.
pub fn reconstruction_loss<T: Real>(recon: &Tensor<T>, image: &Tensor<T>, weight: f64) -> Result<T> {
    if recon.shape() != image.shape() {
        return Err(Error::shape(
            "reconstruction loss",
            format!("{:?} vs {:?}", recon.shape(), image.shape()),
        ));
    }
    let batch = if recon.ndim() >= 4 { recon.dim(0) } else { 1 };
    let total: f64 = recon
        .data()
        .iter()
        .zip(image.data())
        .map(|(&a, &b)| (a - b).abs().as_f64())
        .sum();
    Ok(T::from_f64_lossy(weight * total / batch as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chains_compose() {
        let mnist = DecoderConfig::class_independent([1, 28, 28], 10, 16);
        let sides: Vec<usize> = mnist.shape_chain().unwrap().iter().map(|s| s[1]).collect();
        assert_eq!(sides, [6, 8, 12, 16, 20, 24, 26, 28]);
        let cifar = DecoderConfig::class_independent([3, 32, 32], 10, 16);
        let chain = cifar.shape_chain().unwrap();
        assert_eq!(chain[0], [8, 10, 10]);
        assert_eq!(*chain.last().unwrap(), [3, 32, 32]);
        let expanded = DecoderConfig::class_independent([1, 40, 40], 10, 16);
        assert_eq!(expanded.projection_side().unwrap(), 18);
    }

    #[test]
    fn param_counts() {
        assert_eq!(DecoderConfig::fc([1, 28, 28], 10, 16).param_count().unwrap(), 1_411_344);
        assert_eq!(DecoderConfig::fc([3, 32, 32], 10, 16).param_count().unwrap(), 3_756_544);
        assert_eq!(
            DecoderConfig::class_independent([3, 32, 32], 10, 16).param_count().unwrap(),
            301_027
        );
        assert_eq!(
            DecoderConfig::class_independent([1, 28, 28], 10, 16).param_count().unwrap(),
            292_033
        );
    }

    #[test]
    fn built_decoders_match_counts_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            DecoderConfig::fc([1, 28, 28], 10, 16),
            DecoderConfig::class_independent([1, 28, 28], 10, 16),
        ] {
            let mut store = ParamStore::<f32>::new();
            let dec = Decoder::build(cfg.clone(), &mut store, &mut rng).unwrap();
            assert_eq!(store.numel(), cfg.param_count().unwrap());
            let x = Tensor::full(vec![2, cfg.input_len()], 0.3f32);
            let out = dec.reconstruct(&store, &x).unwrap();
            assert_eq!(out.shape(), [2, 1, 28, 28]);
            assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_input_zero_weights_gives_sigmoid_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DecoderConfig::class_independent([1, 28, 28], 10, 16);
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::build(cfg, &mut store, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        let last_bias = store.find("decoder.deconv7.bias").unwrap();
        store.get_mut(last_bias).value = Tensor::scalar(0.5);
        let out = deconv_decoder(&dec, &store, &Tensor::zeros(vec![16])).unwrap();
        let expect = 1.0 / (1.0 + (-0.5f64).exp());
        assert!(out.data().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn masking() {
        let caps = CapsuleSet::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(
            mask_select(&caps, Some(0), MaskMode::MaskAll).unwrap().data(),
            &[1.0, 2.0, 0.0, 0.0]
        );
        assert_eq!(mask_select(&caps, Some(1), MaskMode::SelectOne).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(mask_select(&caps, None, MaskMode::SelectOne).unwrap().data(), &[3.0, 4.0]);
        assert!(mask_select(&caps, Some(2), MaskMode::SelectOne).is_err());
        assert_eq!(argmax(&[0.2, 0.9, 0.1]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn l1_loss_values() {
        let a = Tensor::<f64>::zeros(vec![1, 28, 28]);
        let b = Tensor::full(vec![1, 28, 28], 1.0);
        assert_eq!(reconstruction_loss(&a, &a, 1.0).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&a, &b, 1.0).unwrap(), 784.0);
        assert!((reconstruction_loss(&a, &b, 0.0005).unwrap() - 0.392).abs() < 1e-12);
        assert!(reconstruction_loss(&a, &Tensor::zeros(vec![784]), 1.0).is_err());
    }
}

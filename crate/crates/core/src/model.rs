//! Baseline CapsNet and CFC-CapsNet assembly, parameter accounting,
//! forward pass, loss and prediction.
//!
//! Pipeline: conv1 -> ReLU -> conv2 -> ReLU -> primary capsules (channel
//! groups or CFC) -> squash -> capsule dropout -> prediction vectors ->
//! routing -> output capsules, with a decoder on the side.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::capsule::{graph_capsule_dropout, route, DropoutMode, MarginLossParams};
use crate::cfc::{cfc_param_count, CfcConfig};
use crate::decoder::{argmax, Decoder, DecoderConfig, DecoderKind, DeconvLayer};
use crate::error::{Error, Result};
use crate::init::{init_with_rng, InitScheme};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapsuleMode {
    /// conv2 channels regrouped into capsules at every position.
    Baseline,
    /// One capsule per CFC window.
    Cfc,
}

/// Training phase; selects the margin-loss thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Normal,
    Hard,
}

impl Phase {
    pub fn margin(self) -> MarginLossParams {
        match self {
            Phase::Normal => MarginLossParams::NORMAL,
            Phase::Hard => MarginLossParams::HARD,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Normal => "normal",
            Phase::Hard => "hard",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[C,H,W]` of the input images.
    pub image: [usize; 3],
    pub conv1: ConvSpec,
    /// Its channel count is `N_k`.
    pub conv2: ConvSpec,
    pub mode: CapsuleMode,
    /// Dimension of baseline primary capsules.
    pub primary_dim: usize,
    pub cfc_kernel: usize,
    pub cfc_dim: usize,
    pub routing_iters: usize,
    pub n_classes: usize,
    pub out_caps_dim: usize,
    pub decoder: DecoderConfig,
    pub dropout: f64,
    pub recon_weight: f64,
    pub routing_init_std: f64,
}

pub const MNIST_SHAPE: [usize; 3] = [1, 28, 28];
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const EXPANDED_SHAPE: [usize; 3] = [1, 40, 40];

impl ModelConfig {
    /// Full-width baseline CapsNet for the given image shape.
    pub fn baseline(image: [usize; 3]) -> Self {
        Self {
            image,
            conv1: ConvSpec {
                channels: 256,
                kernel: 9,
                stride: 1,
            },
            conv2: ConvSpec {
                channels: 256,
                kernel: 9,
                stride: 2,
            },
            mode: CapsuleMode::Baseline,
            primary_dim: 8,
            cfc_kernel: 1,
            cfc_dim: 8,
            routing_iters: 3,
            n_classes: 10,
            out_caps_dim: 16,
            decoder: DecoderConfig::fc(image, 10, 16),
            dropout: 0.0,
            recon_weight: 0.0005,
            routing_init_std: 0.01,
        }
    }

    /// Full-width CFC-CapsNet with the class-independent decoder.
    pub fn cfc(image: [usize; 3], k: usize, d: usize) -> Self {
        Self {
            mode: CapsuleMode::Cfc,
            cfc_kernel: k,
            cfc_dim: d,
            decoder: DecoderConfig::class_independent(image, 10, 16),
            ..Self::baseline(image)
        }
    }

    /// Narrow profile that trains in minutes on one CPU core.
    pub fn desk(image: [usize; 3], mode: CapsuleMode) -> Self {
        let base = match mode {
            CapsuleMode::Baseline => Self::baseline(image),
            CapsuleMode::Cfc => Self::cfc(image, 1, 8),
        };
        Self {
            conv1: ConvSpec {
                channels: 64,
                ..base.conv1
            },
            conv2: ConvSpec {
                channels: 64,
                ..base.conv2
            },
            decoder: DecoderConfig::class_independent(image, 10, 16),
            ..base
        }
    }

    /// 8x8 single-channel, two-class model for gradient checks.
    pub fn tiny(mode: CapsuleMode, decoder: DecoderKind) -> Self {
        let image = [1, 8, 8];
        Self {
            image,
            conv1: ConvSpec {
                channels: 4,
                kernel: 3,
                stride: 1,
            },
            conv2: ConvSpec {
                channels: 4,
                kernel: 2,
                stride: 2,
            },
            mode,
            primary_dim: 4,
            cfc_kernel: 2,
            cfc_dim: 4,
            routing_iters: 3,
            n_classes: 2,
            out_caps_dim: 4,
            decoder: DecoderConfig {
                kind: decoder,
                image,
                n_classes: 2,
                caps_dim: 4,
                fc_hidden: vec![6, 8],
                projection_channels: 2,
                deconv: vec![
                    DeconvLayer { kernel: 3, channels: 3 },
                    DeconvLayer { kernel: 3, channels: 1 },
                ],
            },
            dropout: 0.0,
            recon_weight: 0.0005,
            routing_init_std: 0.5,
        }
    }

    pub fn with_decoder(mut self, kind: DecoderKind) -> Self {
        self.decoder.kind = kind;
        self
    }

    /// Sets `N_k`, the conv2 channel count.
    pub fn with_nk(mut self, nk: usize) -> Self {
        self.conv2.channels = nk;
        self
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.n_classes = n;
        self.decoder.n_classes = n;
        self
    }

    pub fn conv1_side(&self) -> Result<usize> {
        conv_side(self.image[1], self.conv1, "conv1")
    }

    /// Side of the feature map entering the primary-capsule layer.
    pub fn feature_side(&self) -> Result<usize> {
        conv_side(self.conv1_side()?, self.conv2, "conv2")
    }

    pub fn cfc_config(&self) -> Result<CfcConfig> {
        CfcConfig::new(self.cfc_kernel, self.cfc_dim, self.conv2.channels, self.feature_side()?)
    }

    pub fn primary_count(&self) -> Result<usize> {
        let s = self.feature_side()?;
        Ok(match self.mode {
            CapsuleMode::Baseline => s * s * self.conv2.channels / self.primary_dim,
            CapsuleMode::Cfc => self.cfc_config()?.capsule_count(),
        })
    }

    pub fn primary_caps_dim(&self) -> usize {
        match self.mode {
            CapsuleMode::Baseline => self.primary_dim,
            CapsuleMode::Cfc => self.cfc_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image;
        if c == 0 || h == 0 || h != w {
            return Err(Error::Config(format!("images must be square and non-empty, got {:?}", self.image)));
        }
        for (name, spec) in [("conv1", self.conv1), ("conv2", self.conv2)] {
            if spec.channels == 0 || spec.kernel == 0 || spec.stride == 0 {
                return Err(Error::Config(format!("{name} needs positive channels, kernel and stride")));
            }
        }
        self.feature_side()?;
        match self.mode {
            CapsuleMode::Baseline => {
                if self.primary_dim == 0 || !self.conv2.channels.is_multiple_of(self.primary_dim) {
                    return Err(Error::Config(format!(
                        "N_k = {} is not divisible by the primary capsule dimension {}",
                        self.conv2.channels, self.primary_dim
                    )));
                }
            }
            CapsuleMode::Cfc => {
                self.cfc_config()?;
            }
        }
        if self.routing_iters == 0 {
            return Err(Error::Config("routing needs at least one iteration".into()));
        }
        if self.n_classes < 2 || self.out_caps_dim == 0 {
            return Err(Error::Config("need at least two classes and a positive capsule dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {}", self.dropout)));
        }
        if self.decoder.image != self.image
            || self.decoder.n_classes != self.n_classes
            || self.decoder.caps_dim != self.out_caps_dim
        {
            return Err(Error::Config("decoder does not match the model's image, classes or capsule size".into()));
        }
        self.decoder.validate()
    }

    /// Trainable scalars per layer, from the configuration alone.
    pub fn layer_params(&self) -> Result<Vec<(String, usize)>> {
        self.validate()?;
        let c = self.image[0];
        let conv = |cin: usize, s: ConvSpec| cin * s.channels * s.kernel * s.kernel + s.channels;
        let mut out = vec![
            ("conv1".to_string(), conv(c, self.conv1)),
            ("conv2".to_string(), conv(self.conv1.channels, self.conv2)),
        ];
        if self.mode == CapsuleMode::Cfc {
            out.push(("primary".into(), cfc_param_count(&self.cfc_config()?, true)));
        }
        out.push((
            "routing".into(),
            self.primary_count()? * self.n_classes * self.out_caps_dim * self.primary_caps_dim(),
        ));
        out.extend(self.decoder.layer_params()?);
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layer_params()?.iter().map(|(_, n)| n).sum())
    }
}

fn conv_side(input: usize, spec: ConvSpec, name: &str) -> Result<usize> {
    if input < spec.kernel || spec.stride == 0 {
        return Err(Error::Config(format!(
            "{name}: kernel {} does not fit a {input}-pixel map",
            spec.kernel
        )));
    }
    Ok((input - spec.kernel) / spec.stride + 1)
}

#[derive(Clone, Debug)]
struct Layers {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    cfc: Option<(ParamId, ParamId)>,
    routing: ParamId,
}

/// A built network: configuration, parameters and decoder.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub decoder: Decoder,
    layers: Layers,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Output capsules `[B,classes,dim]`.
    pub caps: Var,
    /// Capsule lengths `[B,classes]`.
    pub lengths: Var,
    /// Reconstructions `[B,C,H,W]`, when the decoder ran.
    pub recon: Option<Var>,
    /// Wall time of prediction vectors plus routing.
    pub routing_time: Duration,
}

/// Options for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub mode: DropoutMode,
    /// Ground-truth labels select the decoder input; without them the
    /// longest capsule wins.
    pub labels: Option<&'a [usize]>,
    pub decode: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            mode: DropoutMode::Eval,
            labels: None,
            decode: false,
        }
    }
}

pub fn build_model<T: Real>(config: ModelConfig, seed: u64) -> Result<Model<T>> {
    Model::new(config, seed)
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.image[0];
        let conv = |params: &mut ParamStore<T>, name: &str, cin: usize, s: ConvSpec, rng: &mut ChaCha8Rng| {
            let shape = [s.channels, cin, s.kernel, s.kernel];
            let scheme = InitScheme::fan_in_of(&shape);
            (
                params.add(format!("{name}.weight"), init_with_rng(&shape, scheme, rng)),
                params.add(format!("{name}.bias"), init_with_rng(&[s.channels], scheme, rng)),
            )
        };
        let conv1 = conv(&mut params, "conv1", c, config.conv1, &mut rng);
        let conv2 = conv(&mut params, "conv2", config.conv1.channels, config.conv2, &mut rng);
        let cfc = match config.mode {
            CapsuleMode::Baseline => None,
            CapsuleMode::Cfc => {
                let cc = config.cfc_config()?;
                let scheme = InitScheme::UniformFanIn {
                    fan_in: cc.window_len(),
                };
                Some((
                    params.add("primary.weight", init_with_rng(&cc.weight_shape(), scheme, &mut rng)),
                    params.add("primary.bias", init_with_rng(&cc.bias_shape(), scheme, &mut rng)),
                ))
            }
        };
        let rshape = [
            config.primary_count()?,
            config.n_classes,
            config.out_caps_dim,
            config.primary_caps_dim(),
        ];
        let routing = params.add(
            "routing.weight",
            init_with_rng(
                &rshape,
                InitScheme::Normal {
                    std: config.routing_init_std,
                },
                &mut rng,
            ),
        );
        let decoder = Decoder::build(config.decoder.clone(), &mut params, &mut rng)?;
        Ok(Self {
            config,
            params,
            decoder,
            layers: Layers {
                conv1,
                conv2,
                cfc,
                routing,
            },
        })
    }

    /// Trainable scalars per layer of the built network.
    pub fn layer_params(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in self.params.iter() {
            let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
            match out.last_mut() {
                Some((name, n)) if name == layer => *n += p.value.numel(),
                _ => out.push((layer.to_string(), p.value.numel())),
            }
        }
        out
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Record a forward pass on `images: [B,C,H,W]`.
    pub fn forward<'p, R: Rng + ?Sized>(
        &'p self,
        g: &mut Graph<'p, T>,
        images: Var,
        opts: ForwardOptions<'_>,
        rng: &mut R,
    ) -> Result<Forward> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != self.config.image {
            return Err(Error::shape(
                "model input",
                format!("expected [B,{:?}], got {shape:?}", self.config.image),
            ));
        }
        let batch = shape[0];
        let p = &self.params;
        let l = &self.layers;

        let (w, b) = (g.param(p, l.conv1.0), g.param(p, l.conv1.1));
        let x = g.conv2d(images, w, Some(b), self.config.conv1.stride)?;
        let x = g.relu(x);
        g.check_finite(x, "conv1")?;
        let (w, b) = (g.param(p, l.conv2.0), g.param(p, l.conv2.1));
        let x = g.conv2d(x, w, Some(b), self.config.conv2.stride)?;
        let x = g.relu(x);
        g.check_finite(x, "conv2")?;

        let primary = match l.cfc {
            None => g.group_capsules(x, self.config.primary_dim)?,
            Some((w, b)) => {
                let (w, b) = (g.param(p, w), g.param(p, b));
                g.cfc(x, w, Some(b), self.config.cfc_kernel)?
            }
        };
        let primary = g.squash(primary);
        g.check_finite(primary, "primary capsules")?;
        let primary = graph_capsule_dropout(g, primary, self.config.dropout, opts.mode, rng)?;

        let start = Instant::now();
        let w = g.param(p, l.routing);
        let u_hat = g.predict_vectors(primary, w)?;
        let trace = route(g, u_hat, self.config.routing_iters)?;
        let routing_time = start.elapsed();
        let caps = trace.output;
        g.check_finite(caps, "routing")?;
        let lengths = g.lengths(caps)?;

        let recon = if opts.decode {
            let labels = match opts.labels {
                Some(l) => l.to_vec(),
                None => argmax_rows(g.value(lengths)),
            };
            if labels.len() != batch {
                return Err(Error::shape("labels", format!("{} labels for a batch of {batch}", labels.len())));
            }
            let sel = self.decoder.select(g, caps, &labels)?;
            Some(self.decoder.forward(g, p, sel)?)
        } else {
            None
        };
        Ok(Forward {
            caps,
            lengths,
            recon,
            routing_time,
        })
    }

    /// Margin loss plus weighted reconstruction loss, as a graph scalar.
    pub fn total_loss(&self, g: &mut Graph<'_, T>, fwd: &Forward, images: Var, labels: &[usize], phase: Phase) -> Result<Var> {
        let margin = g.margin_loss(fwd.lengths, labels.to_vec(), phase.margin())?;
        match fwd.recon {
            Some(r) => {
                let l1 = g.l1_loss(r, images, T::from_f64_lossy(self.config.recon_weight))?;
                g.add(margin, l1)
            }
            None => Ok(margin),
        }
    }

    /// Capsule lengths `[B,classes]` in eval mode.
    pub fn lengths(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut g, x, ForwardOptions::default(), &mut rng)?;
        Ok(g.value(fwd.lengths).clone())
    }

    /// Class of the longest output capsule for every image.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.lengths(images)?))
    }

    /// Eval-mode reconstructions from the predicted class capsule.
    pub fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = ForwardOptions {
            decode: true,
            ..ForwardOptions::default()
        };
        let fwd = self.forward(&mut g, x, opts, &mut rng)?;
        let r = fwd.recon.ok_or_else(|| Error::Config("decoder did not run".into()))?;
        Ok(g.value(r).clone())
    }
}

/// Row-wise argmax of a `[B,K]` tensor, lowest index on ties.
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let k = *t.shape().last().expect("non-empty shape");
    t.data().chunks(k).map(argmax).collect()
}

//! Convolutional fully-connected (CFC) layer.
//!
//! The feature map `[N,W,W]` is cut into every `K x K` window at stride 1.
//! Window `m` (zero-based, row-major) has origin `h = m / (W-K+1)`,
//! `w = m % (W-K+1)`; its values are flattened channel-major, then by row
//! and column: `idx = c*K*K + dy*K + dx`. Each window owns an independent
//! affine map `[D, K*K*N]` plus bias `[D]`; nothing is shared between
//! windows. The outputs are squashed into primary capsules.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capsule::{squash_tensor, CapsuleSet};
use crate::error::{Error, Result};
use crate::kernels::LayerGrads;
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfcConfig {
    pub kernel: usize,
    pub out_dim: usize,
    pub in_channels: usize,
    pub in_spatial: usize,
}

impl CfcConfig {
    pub fn new(kernel: usize, out_dim: usize, in_channels: usize, in_spatial: usize) -> Result<Self> {
        let cfg = Self {
            kernel,
            out_dim,
            in_channels,
            in_spatial,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel > self.in_spatial {
            return Err(Error::Config(format!(
                "CFC kernel must satisfy 1 <= K <= W, got K={} W={}",
                self.kernel, self.in_spatial
            )));
        }
        if self.out_dim == 0 || self.in_channels == 0 {
            return Err(Error::Config("CFC needs D >= 1 and N >= 1".into()));
        }
        Ok(())
    }

    /// Windows per axis, `W-K+1`.
    pub fn side(&self) -> usize {
        self.in_spatial - self.kernel + 1
    }

    /// Number of output capsules, `(W-K+1)^2`.
    pub fn capsule_count(&self) -> usize {
        self.side() * self.side()
    }

    /// Length of a flattened window, `K*K*N`.
    pub fn window_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.capsule_count(), self.out_dim, self.window_len()]
    }

    pub fn bias_shape(&self) -> [usize; 2] {
        [self.capsule_count(), self.out_dim]
    }
}

/// One window of the feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk<T> {
    pub index: usize,
    pub h: usize,
    pub w: usize,
    pub values: Tensor<T>,
}

/// All window origins `(m, h, w)` in row-major order.
pub fn chunk_positions(cfg: &CfcConfig) -> Result<Vec<(usize, usize, usize)>> {
    cfg.validate()?;
    let side = cfg.side();
    Ok((0..cfg.capsule_count()).map(|m| (m, m / side, m % side)).collect())
}

/// Extract every flattened window of a single `[N,W,W]` map.
pub fn chunks<T: Real>(feature: &Tensor<T>, cfg: &CfcConfig) -> Result<Vec<Chunk<T>>> {
    check_input(feature.shape(), cfg)?;
    let x = feature.clone().reshape(vec![1, cfg.in_channels, cfg.in_spatial, cfg.in_spatial])?;
    let gathered = gather(&x, cfg);
    let len = cfg.window_len();
    chunk_positions(cfg)?
        .into_iter()
        .map(|(m, h, w)| {
            Ok(Chunk {
                index: m,
                h,
                w,
                values: Tensor::new(vec![len], gathered[m * len..(m + 1) * len].to_vec())?,
            })
        })
        .collect()
}

/// Trainable scalars of one CFC layer.
pub fn cfc_param_count(cfg: &CfcConfig, with_bias: bool) -> usize {
    cfg.capsule_count() * (cfg.window_len() * cfg.out_dim + if with_bias { cfg.out_dim } else { 0 })
}

fn check_input(shape: &[usize], cfg: &CfcConfig) -> Result<()> {
    let spatial = match shape {
        [c, h, w] | [_, c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::shape(
                "cfc",
                format!("expected [N,W,W] or [B,N,W,W], got {shape:?}"),
            ))
        }
    };
    if spatial != (cfg.in_channels, cfg.in_spatial, cfg.in_spatial) {
        return Err(Error::shape(
            "cfc",
            format!(
                "input {shape:?} does not match N={} W={}",
                cfg.in_channels, cfg.in_spatial
            ),
        ));
    }
    Ok(())
}

fn infer_config<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, kernel: usize) -> Result<(usize, CfcConfig)> {
    let (b, n, h) = match *input.shape() {
        [b, n, h, w] if h == w => (b, n, h),
        _ => {
            return Err(Error::shape(
                "cfc",
                format!("expected square [B,N,W,W] input, got {:?}", input.shape()),
            ))
        }
    };
    let &[p, d, len] = weights.shape() else {
        return Err(Error::shape(
            "cfc",
            format!("weights must be [positions,D,K*K*N], got {:?}", weights.shape()),
        ));
    };
    let cfg = CfcConfig::new(kernel, d, n, h)?;
    if p != cfg.capsule_count() || len != cfg.window_len() {
        return Err(Error::shape(
            "cfc",
            format!(
                "weights {:?} but input {:?} with K={kernel} needs [{}, {d}, {}]",
                weights.shape(),
                input.shape(),
                cfg.capsule_count(),
                cfg.window_len()
            ),
        ));
    }
    Ok((b, cfg))
}

/// Windows of a batch laid out `[positions, B, K*K*N]`.
fn gather<T: Real>(x: &Tensor<T>, cfg: &CfcConfig) -> Vec<T> {
    let (k, n, wd) = (cfg.kernel, cfg.in_channels, cfg.in_spatial);
    let b = x.dim(0);
    let side = cfg.side();
    let len = cfg.window_len();
    let mut out = vec![T::zero(); cfg.capsule_count() * b * len];
    for (m, block) in out.chunks_mut(b * len).enumerate() {
        let (h, w) = (m / side, m % side);
        for (bi, row) in block.chunks_mut(len).enumerate() {
            let img = x.outer(bi);
            for c in 0..n {
                for dy in 0..k {
                    let src = c * wd * wd + (h + dy) * wd + w;
                    row[(c * k + dy) * k..(c * k + dy + 1) * k].copy_from_slice(&img[src..src + k]);
                }
            }
        }
    }
    out
}

/// Batched CFC affine maps, `[B,N,W,W] -> [B,positions,D]`, before squash.
pub(crate) fn cfc_forward_tensor<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    kernel: usize,
) -> Result<Tensor<T>> {
    let (b, cfg) = infer_config(input, weights, kernel)?;
    if let Some(bias) = bias {
        if bias.shape() != cfg.bias_shape() {
            return Err(Error::shape(
                "cfc",
                format!("bias {:?}, expected {:?}", bias.shape(), cfg.bias_shape()),
            ));
        }
    }
    let (p, d, len) = (cfg.capsule_count(), cfg.out_dim, cfg.window_len());
    let cols = gather(input, &cfg);
    // [P, B, D], one independent block per window
    let mut pbd = vec![T::zero(); p * b * d];
    pbd.par_chunks_mut(b * d).enumerate().for_each(|(m, out)| {
        if let Some(bias) = bias {
            let bm = bias.outer(m);
            for row in out.chunks_mut(d) {
                row.copy_from_slice(bm);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(
            b,
            len,
            d,
            T::one(),
            MatRef::rows(&cols[m * b * len..(m + 1) * b * len], len),
            MatRef::rows_t(weights.outer(m), len),
            beta,
            MatMut::rows(out, d),
        );
    });
    let mut out = vec![T::zero(); b * p * d];
    for m in 0..p {
        for bi in 0..b {
            out[(bi * p + m) * d..(bi * p + m + 1) * d].copy_from_slice(&pbd[(m * b + bi) * d..(m * b + bi + 1) * d]);
        }
    }
    Tensor::new(vec![b, p, d], out)
}

/// Gradients of [`cfc_forward_tensor`] for input, weights and bias.
pub(crate) fn cfc_backward_tensor<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    kernel: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<LayerGrads<T>> {
    let (b, cfg) = infer_config(input, weights, kernel)?;
    let (p, d, len) = (cfg.capsule_count(), cfg.out_dim, cfg.window_len());
    if grad_out.shape() != [b, p, d] {
        return Err(Error::shape(
            "cfc backward",
            format!("gradient {:?}, expected {:?}", grad_out.shape(), [b, p, d]),
        ));
    }
    let cols = gather(input, &cfg);
    let g = grad_out.data();
    let mut dw = vec![T::zero(); p * d * len];
    let mut db = vec![T::zero(); p * d];
    let mut dcols = need_input.then(|| vec![T::zero(); p * b * len]);

    for m in 0..p {
        // g_m is [B, D] with row stride P*D
        let gm = MatRef::new(&g[m * d..], p * d, 1);
        gemm(
            d,
            b,
            len,
            T::one(),
            MatRef::new(&g[m * d..], 1, p * d),
            MatRef::rows(&cols[m * b * len..(m + 1) * b * len], len),
            T::zero(),
            MatMut::rows(&mut dw[m * d * len..(m + 1) * d * len], len),
        );
        for bi in 0..b {
            for (acc, &gv) in db[m * d..(m + 1) * d].iter_mut().zip(&g[(bi * p + m) * d..(bi * p + m + 1) * d]) {
                *acc = *acc + gv;
            }
        }
        if let Some(dc) = dcols.as_mut() {
            gemm(
                b,
                d,
                len,
                T::one(),
                gm,
                MatRef::rows(weights.outer(m), len),
                T::zero(),
                MatMut::rows(&mut dc[m * b * len..(m + 1) * b * len], len),
            );
        }
    }

    let dx = match dcols {
        Some(dc) => {
            let (k, n, wd) = (cfg.kernel, cfg.in_channels, cfg.in_spatial);
            let side = cfg.side();
            let mut dx = vec![T::zero(); input.numel()];
            let per = n * wd * wd;
            for m in 0..p {
                let (h, w) = (m / side, m % side);
                for bi in 0..b {
                    let row = &dc[(m * b + bi) * len..(m * b + bi + 1) * len];
                    let img = &mut dx[bi * per..(bi + 1) * per];
                    for c in 0..n {
                        for dy in 0..k {
                            let dst = c * wd * wd + (h + dy) * wd + w;
                            for (o, &v) in img[dst..dst + k].iter_mut().zip(&row[(c * k + dy) * k..]) {
                                *o = *o + v;
                            }
                        }
                    }
                }
            }
            Some(Tensor::new(input.shape().to_vec(), dx)?)
        }
        None => None,
    };
    Ok((
        dx,
        Tensor::new(weights.shape().to_vec(), dw)?,
        Tensor::new(cfg.bias_shape().to_vec(), db)?,
    ))
}

/// CFC layer on a single `[N,W,W]` map followed by squash.
pub fn cfc_forward<T: Real>(
    feature: &Tensor<T>,
    cfg: &CfcConfig,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<CapsuleSet<T>> {
    check_input(feature.shape(), cfg)?;
    if weights.shape() != cfg.weight_shape() {
        return Err(Error::shape(
            "cfc",
            format!(
                "{} weight matrices of shape {:?} given, {} windows need {:?}",
                weights.shape().first().copied().unwrap_or(0),
                weights.shape().get(1..).unwrap_or(&[]),
                cfg.capsule_count(),
                &cfg.weight_shape()[1..]
            ),
        ));
    }
    let x = feature.clone().reshape(vec![1, cfg.in_channels, cfg.in_spatial, cfg.in_spatial])?;
    let v = cfc_forward_tensor(&x, weights, bias, cfg.kernel)?;
    CapsuleSet::new(squash_tensor(&v).reshape(vec![cfg.capsule_count(), cfg.out_dim])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_basic() {
        let cfg = CfcConfig::new(1, 8, 256, 8).unwrap();
        let pos = chunk_positions(&cfg).unwrap();
        assert_eq!(pos.len(), 64);
        assert_eq!(pos[10], (10, 1, 2));
        assert_eq!(chunk_positions(&CfcConfig::new(3, 8, 1, 8).unwrap()).unwrap().len(), 36);
        assert_eq!(chunk_positions(&CfcConfig::new(8, 8, 1, 8).unwrap()).unwrap(), vec![(0, 0, 0)]);
        assert!(CfcConfig::new(9, 8, 1, 8).is_err());
    }

    #[test]
    fn param_counts() {
        let cfg = CfcConfig::new(1, 8, 256, 8).unwrap();
        assert_eq!(cfc_param_count(&cfg, true), 131_584);
        let full = CfcConfig::new(8, 8, 4, 8).unwrap();
        assert_eq!(cfc_param_count(&full, true), 64 * 4 * 8 + 8);
        let k2 = CfcConfig::new(2, 8, 256, 8).unwrap();
        assert!(cfc_param_count(&k2, true) > cfc_param_count(&cfg, true));
    }

    #[test]
    fn chunk_flatten_order() {
        // 2 channels, 3x3, values encode (c, y, x)
        let vals: Vec<f64> = (0..18).map(|i| i as f64).collect();
        let f = Tensor::<f64>::from_f64(vec![2, 3, 3], &vals).unwrap();
        let cfg = CfcConfig::new(2, 1, 2, 3).unwrap();
        let ch = chunks(&f, &cfg).unwrap();
        assert_eq!(ch[3].h, 1);
        assert_eq!(ch[3].w, 1);
        assert_eq!(ch[3].values.data(), &[4.0, 5.0, 7.0, 8.0, 13.0, 14.0, 16.0, 17.0]);
    }

    #[test]
    fn zero_weights_give_zero_capsules() {
        let cfg = CfcConfig::new(2, 4, 3, 5).unwrap();
        let f = Tensor::<f64>::full(vec![3, 5, 5], 0.7);
        let w = Tensor::zeros(cfg.weight_shape().to_vec());
        let caps = cfc_forward(&f, &cfg, &w, None).unwrap();
        assert_eq!(caps.count(), 16);
        assert!(caps.vectors().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_weight_count_is_rejected() {
        let cfg = CfcConfig::new(2, 4, 3, 5).unwrap();
        let f = Tensor::<f64>::zeros(vec![3, 5, 5]);
        let w = Tensor::zeros(vec![15, 4, 12]);
        assert!(cfc_forward(&f, &cfg, &w, None).is_err());
    }
}

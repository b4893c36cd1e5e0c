//! Forward and backward kernels for valid convolution, stride-1 full
//! transposed convolution and affine maps.
//!
//! Convolutions lower to GEMM through `im2col`. Samples are processed in
//! chunks whose size depends only on the layer geometry, so results do not
//! depend on the number of worker threads. Kernel gradients are accumulated
//! chunk by chunk in sample order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

/// `(d_input, d_weight, d_bias)`; the input gradient only when requested.
pub type LayerGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Target number of GEMM columns per chunk.
const CHUNK_COLS: usize = 256;
/// Upper bound on `im2col` buffer elements per chunk.
const CHUNK_ELEMS: usize = 1 << 22;

/// Geometry of a valid convolution from `[c_in, h, w]` to `[c_out, oh, ow]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::shape("conv2d", "kernel size and stride must be positive"));
        }
        if h < k || w < k {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} smaller than kernel {k}x{k}"),
            ));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            oh: (h - k) / stride + 1,
            ow: (w - k) / stride + 1,
        })
    }

    /// Rows of the lowered patch matrix: `c_in * k * k`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_positions(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self) -> usize {
        let p = self.out_positions();
        let by_cols = CHUNK_COLS.div_ceil(p);
        let by_mem = (CHUNK_ELEMS / (self.patch_len() * p).max(1)).max(1);
        by_cols.min(by_mem).max(1)
    }
}

/// Copy the patches of one sample into columns `off..off + oh*ow` of `cols`
/// (leading dimension `ld`). Patch rows are ordered `(channel, ky, kx)`.
fn im2col<T: Copy>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, off: usize) {
    let (k, s, p) = (g.k, g.stride, g.out_positions());
    for c in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                for oy in 0..g.oh {
                    let src = &x[(c * g.h + oy * s + ky) * g.w + kx..];
                    let dst = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if s == 1 {
                        dst.copy_from_slice(&src[..g.ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a `[c_in, h, w]` map.
fn col2im_add<T: Real>(cols: &[T], ld: usize, off: usize, g: &ConvGeom, x: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.out_positions());
    for c in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ld + off..row * ld + off + p];
                for oy in 0..g.oh {
                    let base = (c * g.h + oy * s + ky) * g.w + kx;
                    let src = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let d = &mut x[base + ox * s];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Splits `[C,H,W]` or `[B,C,H,W]` into `(batch, c, h, w, batched)`.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => Err(Error::shape(op, format!("expected [C,H,W] or [B,C,H,W], got {shape:?}"))),
    }
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?}, expected [{channels}]", b.shape()),
            ));
        }
    }
    Ok(())
}

/// Geometry and batch size of a conv2d call, validated.
pub fn conv2d_geom<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<(usize, ConvGeom, bool)> {
    let (b, c, h, w, batched) = image_dims("conv2d", input.shape())?;
    let &[c_out, c_in, kh, kw] = kernel.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [C_out,C_in,k,k], got {:?}", kernel.shape()),
        ));
    };
    if kh != kw {
        return Err(Error::shape("conv2d", "only square kernels are supported"));
    }
    if c_in != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {c_in}"),
        ));
    }
    Ok((b, ConvGeom::new(c_in, h, w, c_out, kh, stride)?, batched))
}

/// Valid (unpadded) 2-D convolution.
///
/// `input` is `[C_in,H,W]` or `[B,C_in,H,W]`, `kernel` is `[C_out,C_in,k,k]`.
/// Output spatial size is `(H - k) / stride + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (batch, g, batched) = conv2d_geom(input, kernel, stride)?;
    check_bias("conv2d", bias, g.c_out)?;
    let (p, kl) = (g.out_positions(), g.patch_len());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let chunk = g.chunk();
    let mut out = vec![T::zero(); batch * out_len];
    let x = input.data();
    let kd = kernel.data();

    out.par_chunks_mut(chunk * out_len)
        .enumerate()
        .for_each(|(ci, out_chunk)| {
            let start = ci * chunk;
            let n = out_chunk.len() / out_len;
            let ld = n * p;
            let mut cols = vec![T::zero(); kl * ld];
            for i in 0..n {
                let xs = &x[(start + i) * in_len..(start + i + 1) * in_len];
                im2col(xs, &g, &mut cols, ld, i * p);
            }
            let mut tmp = vec![T::zero(); g.c_out * ld];
            gemm(
                g.c_out,
                kl,
                ld,
                T::one(),
                MatRef::rows(kd, kl),
                MatRef::rows(&cols, ld),
                T::zero(),
                MatMut::rows(&mut tmp, ld),
            );
            for i in 0..n {
                for co in 0..g.c_out {
                    let b = bias.map_or(T::zero(), |b| b[co]);
                    let dst = &mut out_chunk[i * out_len + co * p..i * out_len + (co + 1) * p];
                    let src = &tmp[co * ld + i * p..co * ld + (i + 1) * p];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + b;
                    }
                }
            }
        });

    let shape = if batched {
        vec![batch, g.c_out, g.oh, g.ow]
    } else {
        vec![g.c_out, g.oh, g.ow]
    };
    Tensor::new(shape, out)
}

/// Gradients of [`conv2d`]. Returns `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<LayerGrads<T>> {
    let (batch, g, _) = conv2d_geom(input, kernel, stride)?;
    let (p, kl) = (g.out_positions(), g.patch_len());
    if grad_out.numel() != batch * g.c_out * p {
        return Err(Error::shape("conv2d backward", "gradient does not match output"));
    }
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let chunk = g.chunk();
    let (x, kd, dy) = (input.data(), kernel.data(), grad_out.data());

    let mut dk = vec![T::zero(); g.c_out * kl];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = need_input.then(|| vec![T::zero(); batch * in_len]);

    let mut start = 0;
    while start < batch {
        let n = chunk.min(batch - start);
        let ld = n * p;
        let mut cols = vec![T::zero(); kl * ld];
        let mut dtmp = vec![T::zero(); g.c_out * ld];
        for i in 0..n {
            let s = start + i;
            im2col(&x[s * in_len..(s + 1) * in_len], &g, &mut cols, ld, i * p);
            for co in 0..g.c_out {
                let src = &dy[s * out_len + co * p..s * out_len + (co + 1) * p];
                dtmp[co * ld + i * p..co * ld + (i + 1) * p].copy_from_slice(src);
                db[co] = db[co] + src.iter().copied().sum();
            }
        }
        gemm(
            g.c_out,
            ld,
            kl,
            T::one(),
            MatRef::rows(&dtmp, ld),
            MatRef::rows_t(&cols, ld),
            T::one(),
            MatMut::rows(&mut dk, kl),
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                kl,
                g.c_out,
                ld,
                T::one(),
                MatRef::rows_t(kd, kl),
                MatRef::rows(&dtmp, ld),
                T::zero(),
                MatMut::rows(&mut cols, ld),
            );
            for i in 0..n {
                let s = start + i;
                col2im_add(&cols, ld, i * p, &g, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
        start += n;
    }

    let dx = dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?;
    Ok((
        dx,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![g.c_out], db)?,
    ))
}

/// Geometry of the stride-1 full transposed convolution, expressed as the
/// valid convolution it is the adjoint of (output map -> input map).
pub fn deconv2d_geom<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, ConvGeom, bool)> {
    let (b, c, h, w, batched) = image_dims("deconv2d", input.shape())?;
    let &[c_in, c_out, kh, kw] = kernel.shape() else {
        return Err(Error::shape(
            "deconv2d",
            format!("kernel must be [C_in,C_out,k,k], got {:?}", kernel.shape()),
        ));
    };
    if kh != kw {
        return Err(Error::shape("deconv2d", "only square kernels are supported"));
    }
    if c_in != c {
        return Err(Error::shape(
            "deconv2d",
            format!("input has {c} channels, kernel expects {c_in}"),
        ));
    }
    let g = ConvGeom::new(c_out, h + kh - 1, w + kh - 1, c_in, kh, 1)?;
    Ok((b, g, batched))
}

/// Stride-1 full transposed convolution: `[C_in,H,W] -> [C_out,H+k-1,W+k-1]`
/// with kernel `[C_in,C_out,k,k]`. Without bias this is exactly the adjoint
/// of [`conv2d`] with the same kernel tensor.
pub fn deconv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (batch, g, batched) = deconv2d_geom(input, kernel)?;
    check_bias("deconv2d", bias, g.c_in)?;
    // In `g`, `c_in`/`h`/`w` describe the (large) output map and
    // `c_out`/`oh`/`ow` the (small) input map.
    let (p, kl) = (g.out_positions(), g.patch_len());
    let in_len = g.c_out * p;
    let out_len = g.c_in * g.h * g.w;
    let chunk = g.chunk();
    let (x, kd) = (input.data(), kernel.data());
    let mut out = vec![T::zero(); batch * out_len];

    out.par_chunks_mut(chunk * out_len)
        .enumerate()
        .for_each(|(ci, out_chunk)| {
            let start = ci * chunk;
            let n = out_chunk.len() / out_len;
            let ld = n * p;
            let mut xs = vec![T::zero(); g.c_out * ld];
            for i in 0..n {
                let s = start + i;
                for c in 0..g.c_out {
                    xs[c * ld + i * p..c * ld + (i + 1) * p]
                        .copy_from_slice(&x[s * in_len + c * p..s * in_len + (c + 1) * p]);
                }
            }
            let mut cols = vec![T::zero(); kl * ld];
            gemm(
                kl,
                g.c_out,
                ld,
                T::one(),
                MatRef::rows_t(kd, kl),
                MatRef::rows(&xs, ld),
                T::zero(),
                MatMut::rows(&mut cols, ld),
            );
            for i in 0..n {
                let o = &mut out_chunk[i * out_len..(i + 1) * out_len];
                col2im_add(&cols, ld, i * p, &g, o);
                if let Some(b) = bias {
                    let hw = g.h * g.w;
                    for c in 0..g.c_in {
                        for v in &mut o[c * hw..(c + 1) * hw] {
                            *v = *v + b[c];
                        }
                    }
                }
            }
        });

    let shape = if batched {
        vec![batch, g.c_in, g.h, g.w]
    } else {
        vec![g.c_in, g.h, g.w]
    };
    Tensor::new(shape, out)
}

/// Gradients of [`deconv2d`]. Returns `(d_input, d_kernel, d_bias)`.
pub fn deconv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<LayerGrads<T>> {
    let (batch, g, _) = deconv2d_geom(input, kernel)?;
    let (p, kl) = (g.out_positions(), g.patch_len());
    let in_len = g.c_out * p;
    let out_len = g.c_in * g.h * g.w;
    if grad_out.numel() != batch * out_len {
        return Err(Error::shape("deconv2d backward", "gradient does not match output"));
    }
    let chunk = g.chunk();
    let (x, kd, dy) = (input.data(), kernel.data(), grad_out.data());
    let hw = g.h * g.w;

    let mut dk = vec![T::zero(); g.c_out * kl];
    let mut db = vec![T::zero(); g.c_in];
    let mut dx = need_input.then(|| vec![T::zero(); batch * in_len]);

    let mut start = 0;
    while start < batch {
        let n = chunk.min(batch - start);
        let ld = n * p;
        let mut dcols = vec![T::zero(); kl * ld];
        let mut xs = vec![T::zero(); g.c_out * ld];
        for i in 0..n {
            let s = start + i;
            let dys = &dy[s * out_len..(s + 1) * out_len];
            im2col(dys, &g, &mut dcols, ld, i * p);
            for c in 0..g.c_in {
                db[c] = db[c] + dys[c * hw..(c + 1) * hw].iter().copied().sum();
            }
            for c in 0..g.c_out {
                xs[c * ld + i * p..c * ld + (i + 1) * p]
                    .copy_from_slice(&x[s * in_len + c * p..s * in_len + (c + 1) * p]);
            }
        }
        gemm(
            g.c_out,
            ld,
            kl,
            T::one(),
            MatRef::rows(&xs, ld),
            MatRef::rows_t(&dcols, ld),
            T::one(),
            MatMut::rows(&mut dk, kl),
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                g.c_out,
                kl,
                ld,
                T::one(),
                MatRef::rows(kd, kl),
                MatRef::rows(&dcols, ld),
                T::zero(),
                MatMut::rows(&mut xs, ld),
            );
            for i in 0..n {
                let s = start + i;
                for c in 0..g.c_out {
                    dx[s * in_len + c * p..s * in_len + (c + 1) * p]
                        .copy_from_slice(&xs[c * ld + i * p..c * ld + (i + 1) * p]);
                }
            }
        }
        start += n;
    }

    let dx = dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?;
    Ok((
        dx,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![g.c_in], db)?,
    ))
}

fn linear_dims<T: Real>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize, bool)> {
    let (batch, n, batched) = match *input.shape() {
        [n] => (1, n, false),
        [b, n] => (b, n, true),
        _ => {
            return Err(Error::shape(
                "linear",
                format!("input must be [n] or [B,n], got {:?}", input.shape()),
            ))
        }
    };
    let &[m, wn] = weight.shape() else {
        return Err(Error::shape("linear", format!("weight must be [m,n], got {:?}", weight.shape())));
    };
    if wn != n {
        return Err(Error::shape(
            "linear",
            format!("input length {n} does not match weight {m}x{wn}"),
        ));
    }
    Ok((batch, n, m, batched))
}

/// Affine map `y = W x + b` on `[n]` or `[B,n]` inputs with `W: [m,n]`.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (batch, n, m, batched) = linear_dims(input, weight)?;
    check_bias("linear", bias, m)?;
    let mut out = vec![T::zero(); batch * m];
    if let Some(b) = bias {
        for row in out.chunks_mut(m) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        batch,
        n,
        m,
        T::one(),
        MatRef::rows(input.data(), n),
        MatRef::rows_t(weight.data(), n),
        T::one(),
        MatMut::rows(&mut out, m),
    );
    let shape = if batched { vec![batch, m] } else { vec![m] };
    Tensor::new(shape, out)
}

/// Gradients of [`linear`]. Returns `(d_input, d_weight, d_bias)`.
pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<LayerGrads<T>> {
    let (batch, n, m, _) = linear_dims(input, weight)?;
    if grad_out.numel() != batch * m {
        return Err(Error::shape("linear backward", "gradient does not match output"));
    }
    let dy = grad_out.data();
    let mut dw = vec![T::zero(); m * n];
    gemm(
        m,
        batch,
        n,
        T::one(),
        MatRef::rows_t(dy, m),
        MatRef::rows(input.data(), n),
        T::zero(),
        MatMut::rows(&mut dw, n),
    );
    let mut db = vec![T::zero(); m];
    for row in dy.chunks(m) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    let dx = if need_input {
        let mut dx = vec![T::zero(); batch * n];
        gemm(
            batch,
            m,
            n,
            T::one(),
            MatRef::rows(dy, m),
            MatRef::rows(weight.data(), n),
            T::zero(),
            MatMut::rows(&mut dx, n),
        );
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(vec![m, n], dw)?, Tensor::new(vec![m], db)?))
}

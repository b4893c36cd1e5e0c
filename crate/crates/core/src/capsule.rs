//! Capsule primitives: squash, prediction vectors, routing by agreement,
//! margin loss, capsule dropout and capsule lengths.
//!
//! Batched tensors use the layouts
//! `u: [B,N_in,D_in]`, `W: [N_in,N_out,D_out,D_in]`,
//! `u_hat: [B,N_in,N_out,D_out]`, `b, c: [B,N_in,N_out]`, `s, v: [B,N_out,D_out]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

/// An ordered set of `count` capsules of dimension `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleSet<T> {
    vectors: Tensor<T>,
}

impl<T: Real> CapsuleSet<T> {
    pub fn new(vectors: Tensor<T>) -> Result<Self> {
        if vectors.ndim() != 2 {
            return Err(Error::shape(
                "capsule set",
                format!("expected [N,D], got {:?}", vectors.shape()),
            ));
        }
        Ok(Self { vectors })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("capsule set", "ragged capsule rows"));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(Tensor::from_f64(vec![rows.len(), dim], &flat)?)
    }

    pub fn count(&self) -> usize {
        self.vectors.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim(1)
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.vectors
    }

    pub fn capsule(&self, i: usize) -> &[T] {
        self.vectors.outer(i)
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.vectors
    }
}

/// Thresholds of the margin loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginLossParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl MarginLossParams {
    pub const NORMAL: Self = Self {
        m_plus: 0.9,
        m_minus: 0.1,
        lambda: 0.5,
    };
    /// Tightened thresholds of the second (hard) training phase.
    pub const HARD: Self = Self {
        m_plus: 0.95,
        m_minus: 0.05,
        lambda: 0.5,
    };

    pub fn new(m_plus: f64, m_minus: f64, lambda: f64) -> Result<Self> {
        if !(0.0 < m_minus && m_minus < m_plus && m_plus < 1.0) || lambda <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "margin loss needs 0 < m- < m+ < 1 and lambda > 0, got m+={m_plus} m-={m_minus} lambda={lambda}"
            )));
        }
        Ok(Self {
            m_plus,
            m_minus,
            lambda,
        })
    }
}

impl Default for MarginLossParams {
    fn default() -> Self {
        Self::NORMAL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    Train,
    Eval,
}

fn last_axis<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    let d = *t.shape().last().expect("tensor has at least one axis");
    (t.numel() / d, d)
}

// ---------------------------------------------------------------- squash

// |s|^2 / (1 + |s|^2) / |s|, written without the division so s = 0 maps to 0.
fn squash_factor(q: f64) -> f64 {
    q.sqrt() / (1.0 + q)
}

/// `v = |s|^2 / (1 + |s|^2) * s / |s|` along the last axis; zero stays zero.
pub fn squash_tensor<T: Real>(s: &Tensor<T>) -> Tensor<T> {
    let (_, d) = last_axis(s);
    let mut out = s.clone();
    for row in out.data_mut().chunks_mut(d) {
        let q: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        let f = T::from_f64_lossy(squash_factor(q));
        for v in row {
            *v = *v * f;
        }
    }
    out
}

pub(crate) fn squash_backward<T: Real>(s: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = last_axis(s);
    let mut out = Vec::with_capacity(s.numel());
    for (row, grow) in s.data().chunks(d).zip(g.data().chunks(d)) {
        let q: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        let f = squash_factor(q);
        // 2 df/dq; the Jacobian vanishes at s = 0
        let df2 = if q > 0.0 { (1.0 - q) / (q.sqrt() * (1.0 + q).powi(2)) } else { 0.0 };
        let gs: f64 = row.iter().zip(grow).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let coef = df2 * gs;
        out.extend(
            row.iter()
                .zip(grow)
                .map(|(&sv, &gv)| T::from_f64_lossy(f * gv.as_f64() + coef * sv.as_f64())),
        );
    }
    Tensor::new(s.shape().to_vec(), out)
}

/// Squash every capsule of a set.
pub fn squash<T: Real>(caps: &CapsuleSet<T>) -> CapsuleSet<T> {
    CapsuleSet {
        vectors: squash_tensor(&caps.vectors),
    }
}

// --------------------------------------------------------------- lengths

pub(crate) fn lengths_tensor<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = last_axis(x);
    let data = x
        .data()
        .chunks(d)
        .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    let shape = if x.ndim() > 1 {
        x.shape()[..x.ndim() - 1].to_vec()
    } else {
        vec![1]
    };
    Tensor::new(shape, data)
}

pub(crate) fn lengths_backward<T: Real>(x: &Tensor<T>, len: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = last_axis(x);
    let mut out = Vec::with_capacity(x.numel());
    for ((row, &l), &gv) in x.data().chunks(d).zip(len.data()).zip(g.data()) {
        if l > T::zero() {
            out.extend(row.iter().map(|&v| gv * v / l));
        } else {
            out.extend(std::iter::repeat_n(T::zero(), d));
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Euclidean length of every capsule.
pub fn capsule_lengths<T: Real>(caps: &CapsuleSet<T>) -> Tensor<T> {
    lengths_tensor(&caps.vectors).expect("capsule set is two-dimensional")
}

// --------------------------------------------------------------- softmax

pub(crate) fn softmax_last<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (_, d) = last_axis(x);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = last_axis(y);
    let mut out = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(y.shape().to_vec(), out)
}

// ------------------------------------------------------- grouping

fn group_dims<T: Real>(x: &Tensor<T>, dim: usize) -> Result<(usize, usize, usize, usize)> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape("primary capsules", format!("expected [B,C,H,W], got {:?}", x.shape())));
    };
    if dim == 0 || c % dim != 0 {
        return Err(Error::shape(
            "primary capsules",
            format!("{c} channels cannot be grouped into {dim}-dimensional capsules"),
        ));
    }
    Ok((b, c / dim, h * w, dim))
}

pub(crate) fn group_forward<T: Real>(x: &Tensor<T>, dim: usize) -> Result<Tensor<T>> {
    let (b, groups, hw, d) = group_dims(x, dim)?;
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for gi in 0..groups {
            for e in 0..d {
                let s = ((bi * groups + gi) * d + e) * hw;
                for p in 0..hw {
                    out[((bi * groups + gi) * hw + p) * d + e] = src[s + p];
                }
            }
        }
    }
    Tensor::new(vec![b, groups * hw, d], out)
}

pub(crate) fn group_backward<T: Real>(x: &Tensor<T>, dim: usize, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, groups, hw, d) = group_dims(x, dim)?;
    let gd = g.data();
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for gi in 0..groups {
            for e in 0..d {
                let s = ((bi * groups + gi) * d + e) * hw;
                for p in 0..hw {
                    out[s + p] = gd[((bi * groups + gi) * hw + p) * d + e];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

// ---------------------------------------------------- prediction vectors

fn predict_dims<T: Real>(u: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let &[b, n_in, d_in] = u.shape() else {
        return Err(Error::shape(
            "predict_vectors",
            format!("u must be [B,N_in,D_in], got {:?}", u.shape()),
        ));
    };
    let &[wn, n_out, d_out, wd] = w.shape() else {
        return Err(Error::shape(
            "predict_vectors",
            format!("W must be [N_in,N_out,D_out,D_in], got {:?}", w.shape()),
        ));
    };
    if wn != n_in || wd != d_in {
        return Err(Error::shape(
            "predict_vectors",
            format!("u {:?} incompatible with W {:?}", u.shape(), w.shape()),
        ));
    }
    Ok((b, n_in, d_in, n_out, d_out))
}

pub(crate) fn predict_forward<T: Real>(u: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n_in, d_in, n_out, d_out) = predict_dims(u, w)?;
    let jd = n_out * d_out;
    let mut out = vec![T::zero(); b * n_in * jd];
    for i in 0..n_in {
        let wi = &w.data()[i * jd * d_in..(i + 1) * jd * d_in];
        // out[:, i, :] (B x jd) = u[:, i, :] (B x D_in) * W_i^T (D_in x jd)
        gemm(
            b,
            d_in,
            jd,
            T::one(),
            MatRef::new(&u.data()[i * d_in..], n_in * d_in, 1),
            MatRef::rows_t(wi, d_in),
            T::zero(),
            MatMut::new(&mut out[i * jd..], n_in * jd, 1),
        );
    }
    Tensor::new(vec![b, n_in, n_out, d_out], out)
}

pub(crate) fn predict_backward<T: Real>(
    u: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_u: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let (b, n_in, d_in, n_out, d_out) = predict_dims(u, w)?;
    let jd = n_out * d_out;
    let mut dw = vec![T::zero(); w.numel()];
    let mut du = need_u.then(|| vec![T::zero(); u.numel()]);
    for i in 0..n_in {
        let gi = MatRef::new(&g.data()[i * jd..], n_in * jd, 1);
        // dW_i (jd x D_in) = g_i^T (jd x B) * u_i (B x D_in)
        gemm(
            jd,
            b,
            d_in,
            T::one(),
            MatRef::new(&g.data()[i * jd..], 1, n_in * jd),
            MatRef::new(&u.data()[i * d_in..], n_in * d_in, 1),
            T::zero(),
            MatMut::rows(&mut dw[i * jd * d_in..(i + 1) * jd * d_in], d_in),
        );
        if let Some(du) = du.as_mut() {
            let wi = &w.data()[i * jd * d_in..(i + 1) * jd * d_in];
            gemm(
                b,
                jd,
                d_in,
                T::one(),
                gi,
                MatRef::rows(wi, d_in),
                T::zero(),
                MatMut::new(&mut du[i * d_in..], n_in * d_in, 1),
            );
        }
    }
    let du = du.map(|d| Tensor::new(u.shape().to_vec(), d)).transpose()?;
    Ok((du, Tensor::new(w.shape().to_vec(), dw)?))
}

/// `u_hat[i,j] = W[i,j] * u[i]` for a single sample.
pub fn predict_vectors<T: Real>(u: &CapsuleSet<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let ub = u.vectors.clone().reshape(vec![1, u.count(), u.dim()])?;
    let out = predict_forward(&ub, w)?;
    let s = out.shape()[1..].to_vec();
    out.reshape(s)
}

// ------------------------------------------------------- routing pieces

fn routing_dims<T: Real>(op: &'static str, c: &Tensor<T>, u_hat: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let &[b, n_in, n_out, d] = u_hat.shape() else {
        return Err(Error::shape(op, format!("u_hat must be [B,N_in,N_out,D], got {:?}", u_hat.shape())));
    };
    if c.shape() != [b, n_in, n_out] {
        return Err(Error::shape(
            op,
            format!("coefficients {:?} do not match u_hat {:?}", c.shape(), u_hat.shape()),
        ));
    }
    Ok((b, n_in, n_out, d))
}

pub(crate) fn weighted_sum_forward<T: Real>(c: &Tensor<T>, u_hat: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n_in, n_out, d) = routing_dims("weighted_sum", c, u_hat)?;
    let (cd, ud) = (c.data(), u_hat.data());
    let mut s = vec![T::zero(); b * n_out * d];
    for bi in 0..b {
        let sb = &mut s[bi * n_out * d..(bi + 1) * n_out * d];
        for i in 0..n_in {
            let base = (bi * n_in + i) * n_out;
            for j in 0..n_out {
                let cij = cd[base + j];
                let u = &ud[(base + j) * d..(base + j + 1) * d];
                for (acc, &uv) in sb[j * d..(j + 1) * d].iter_mut().zip(u) {
                    *acc = *acc + cij * uv;
                }
            }
        }
    }
    Tensor::new(vec![b, n_out, d], s)
}

pub(crate) fn weighted_sum_backward<T: Real>(
    c: &Tensor<T>,
    u_hat: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, n_in, n_out, d) = routing_dims("weighted_sum", c, u_hat)?;
    let (cd, ud, gd) = (c.data(), u_hat.data(), g.data());
    let mut dc = vec![T::zero(); c.numel()];
    let mut du = vec![T::zero(); u_hat.numel()];
    for bi in 0..b {
        for i in 0..n_in {
            let base = (bi * n_in + i) * n_out;
            for j in 0..n_out {
                let gs = &gd[(bi * n_out + j) * d..(bi * n_out + j + 1) * d];
                let off = (base + j) * d;
                let u = &ud[off..off + d];
                dc[base + j] = u.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                let cij = cd[base + j];
                for (o, &gv) in du[off..off + d].iter_mut().zip(gs) {
                    *o = cij * gv;
                }
            }
        }
    }
    Ok((
        Tensor::new(c.shape().to_vec(), dc)?,
        Tensor::new(u_hat.shape().to_vec(), du)?,
    ))
}

fn agreement_dims<T: Real>(u_hat: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let &[b, n_in, n_out, d] = u_hat.shape() else {
        return Err(Error::shape("agreement", format!("u_hat must be [B,N_in,N_out,D], got {:?}", u_hat.shape())));
    };
    if v.shape() != [b, n_out, d] {
        return Err(Error::shape(
            "agreement",
            format!("v {:?} does not match u_hat {:?}", v.shape(), u_hat.shape()),
        ));
    }
    Ok((b, n_in, n_out, d))
}

pub(crate) fn agreement_forward<T: Real>(u_hat: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n_in, n_out, d) = agreement_dims(u_hat, v)?;
    let (ud, vd) = (u_hat.data(), v.data());
    let mut a = vec![T::zero(); b * n_in * n_out];
    for bi in 0..b {
        let vb = &vd[bi * n_out * d..(bi + 1) * n_out * d];
        for i in 0..n_in {
            let base = (bi * n_in + i) * n_out;
            for j in 0..n_out {
                let u = &ud[(base + j) * d..(base + j + 1) * d];
                a[base + j] = u.iter().zip(&vb[j * d..(j + 1) * d]).map(|(&x, &y)| x * y).sum();
            }
        }
    }
    Tensor::new(vec![b, n_in, n_out], a)
}

pub(crate) fn agreement_backward<T: Real>(
    u_hat: &Tensor<T>,
    v: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, n_in, n_out, d) = agreement_dims(u_hat, v)?;
    let (ud, vd, gd) = (u_hat.data(), v.data(), g.data());
    let mut du = vec![T::zero(); u_hat.numel()];
    let mut dv = vec![T::zero(); v.numel()];
    for bi in 0..b {
        let vb = &vd[bi * n_out * d..(bi + 1) * n_out * d];
        let dvb = &mut dv[bi * n_out * d..(bi + 1) * n_out * d];
        for i in 0..n_in {
            let base = (bi * n_in + i) * n_out;
            for j in 0..n_out {
                let gij = gd[base + j];
                let off = (base + j) * d;
                for k in 0..d {
                    du[off + k] = gij * vb[j * d + k];
                    dvb[j * d + k] = dvb[j * d + k] + gij * ud[off + k];
                }
            }
        }
    }
    Ok((
        Tensor::new(u_hat.shape().to_vec(), du)?,
        Tensor::new(v.shape().to_vec(), dv)?,
    ))
}

// --------------------------------------------------------------- routing

/// Graph handles for one routing pass: logits and coefficients used in
/// each iteration, the final weighted sums and the output capsules.
#[derive(Clone, Debug)]
pub struct RoutingTrace {
    pub logits: Vec<Var>,
    pub coefficients: Vec<Var>,
    pub sums: Var,
    pub output: Var,
}

/// Routing by agreement on `u_hat: [B,N_in,N_out,D]`, unrolled on the graph:
///
/// ```text
/// b <- 0
/// repeat r times:
///     c_i = softmax_j(b_i)
///     s_j = sum_i c_ij u_hat_{j|i}
///     v_j = squash(s_j)
///     b_ij <- b_ij + u_hat_{j|i} . v_j
/// ```
pub fn route<T: Real>(g: &mut Graph<'_, T>, u_hat: Var, iterations: usize) -> Result<RoutingTrace> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    let &[b, n_in, n_out, _] = g.shape(u_hat) else {
        return Err(Error::shape(
            "dynamic_routing",
            format!("u_hat must be [B,N_in,N_out,D], got {:?}", g.shape(u_hat)),
        ));
    };
    let mut logits = g.constant(Tensor::zeros(vec![b, n_in, n_out]));
    let mut trace_b = Vec::with_capacity(iterations);
    let mut trace_c = Vec::with_capacity(iterations);
    let mut sums = logits;
    let mut output = logits;
    for it in 0..iterations {
        let c = g.softmax(logits);
        trace_b.push(logits);
        trace_c.push(c);
        sums = g.weighted_sum(c, u_hat)?;
        output = g.squash(sums);
        if it + 1 < iterations {
            let agree = g.agreement(u_hat, output)?;
            logits = g.add(logits, agree)?;
        }
    }
    Ok(RoutingTrace {
        logits: trace_b,
        coefficients: trace_c,
        sums,
        output,
    })
}

/// Values of one routing pass over a single sample.
#[derive(Clone, Debug)]
pub struct RoutingState<T> {
    /// Logits `b` at the start of each iteration, `[N_in,N_out]`.
    pub logits: Vec<Tensor<T>>,
    /// Coefficients `c` of each iteration, `[N_in,N_out]`.
    pub coefficients: Vec<Tensor<T>>,
    /// Final weighted sums `s`, `[N_out,D]`.
    pub sums: Tensor<T>,
    pub iterations: usize,
    pub output: CapsuleSet<T>,
}

/// Routing by agreement for one sample, `u_hat: [N_in,N_out,D]`.
pub fn dynamic_routing<T: Real>(u_hat: &Tensor<T>, iterations: usize) -> Result<RoutingState<T>> {
    let &[n_in, n_out, d] = u_hat.shape() else {
        return Err(Error::shape(
            "dynamic_routing",
            format!("u_hat must be [N_in,N_out,D], got {:?}", u_hat.shape()),
        ));
    };
    let mut g = Graph::new();
    let uh = g.constant(u_hat.clone().reshape(vec![1, n_in, n_out, d])?);
    let trace = route(&mut g, uh, iterations)?;
    let squeeze = |t: &Tensor<T>| t.clone().reshape(t.shape()[1..].to_vec());
    Ok(RoutingState {
        logits: trace.logits.iter().map(|&v| squeeze(g.value(v))).collect::<Result<_>>()?,
        coefficients: trace
            .coefficients
            .iter()
            .map(|&v| squeeze(g.value(v)))
            .collect::<Result<_>>()?,
        sums: squeeze(g.value(trace.sums))?,
        iterations,
        output: CapsuleSet::new(squeeze(g.value(trace.output))?)?,
    })
}

// ----------------------------------------------------------- margin loss

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(
            "labels",
            format!("{} labels for a batch of {batch}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::ClassIndex { index: bad, classes });
    }
    Ok(())
}

fn lengths_matrix<T: Real>(lengths: &Tensor<T>) -> (usize, usize) {
    match *lengths.shape() {
        [b, k] => (b, k),
        _ => (1, lengths.numel()),
    }
}

/// Margin loss of a single sample.
pub fn margin_loss<T: Real>(lengths: &Tensor<T>, target: usize, params: &MarginLossParams) -> Result<T> {
    let k = lengths.numel();
    check_labels(&[target], 1, k)?;
    let (mp, mm, lam) = (params.m_plus, params.m_minus, params.lambda);
    let loss: f64 = lengths
        .data()
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let l = l.as_f64();
            if j == target {
                (mp - l).max(0.0).powi(2)
            } else {
                lam * (l - mm).max(0.0).powi(2)
            }
        })
        .sum();
    Ok(T::from_f64_lossy(loss))
}

pub(crate) fn margin_loss_batch<T: Real>(lengths: &Tensor<T>, labels: &[usize], params: &MarginLossParams) -> Result<T> {
    let (b, k) = lengths_matrix(lengths);
    check_labels(labels, b, k)?;
    let mut total = 0.0;
    for (bi, &y) in labels.iter().enumerate() {
        let row = Tensor::new(vec![k], lengths.data()[bi * k..(bi + 1) * k].to_vec())?;
        total += margin_loss(&row, y, params)?.as_f64();
    }
    Ok(T::from_f64_lossy(total / b as f64))
}

pub(crate) fn margin_loss_grad<T: Real>(
    lengths: &Tensor<T>,
    labels: &[usize],
    params: &MarginLossParams,
    upstream: T,
) -> Result<Tensor<T>> {
    let (b, k) = lengths_matrix(lengths);
    check_labels(labels, b, k)?;
    let scale = upstream.as_f64() / b as f64;
    let mut out = Vec::with_capacity(lengths.numel());
    for (bi, &y) in labels.iter().enumerate() {
        for j in 0..k {
            let l = lengths.data()[bi * k + j].as_f64();
            let d = if j == y {
                -2.0 * (params.m_plus - l).max(0.0)
            } else {
                2.0 * params.lambda * (l - params.m_minus).max(0.0)
            };
            out.push(T::from_f64_lossy(d * scale));
        }
    }
    Tensor::new(lengths.shape().to_vec(), out)
}

// ------------------------------------------------------------ dropout

/// Per-capsule keep mask `[B,N]`: `0` with probability `p`, otherwise
/// `1 / (1 - p)`. One Bernoulli draw per capsule per sample.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(batch: usize, count: usize, p: f64, rng: &mut R) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {p}")));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let data = (0..batch * count)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    Tensor::new(vec![batch, count], data)
}

pub(crate) fn apply_capsule_mask<T: Real>(caps: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, n, d] = caps.shape() else {
        return Err(Error::shape("capsule dropout", format!("expected [B,N,D], got {:?}", caps.shape())));
    };
    if mask.shape() != [b, n] {
        return Err(Error::shape(
            "capsule dropout",
            format!("mask {:?} does not match capsules {:?}", mask.shape(), caps.shape()),
        ));
    }
    let mut out = caps.clone();
    for (row, &m) in out.data_mut().chunks_mut(d).zip(mask.data()) {
        for v in row {
            *v = *v * m;
        }
    }
    Ok(out)
}

/// Inverted capsule dropout on `caps: [B,N,D]`. Eval mode and `p = 0`
/// return `caps` itself, untouched.
pub fn graph_capsule_dropout<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<'_, T>,
    caps: Var,
    p: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {p}")));
    }
    if mode == DropoutMode::Eval || p == 0.0 {
        return Ok(caps);
    }
    let &[b, n, _] = g.shape(caps) else {
        return Err(Error::shape("capsule dropout", format!("expected [B,N,D], got {:?}", g.shape(caps))));
    };
    let mask = dropout_mask(b, n, p, rng)?;
    g.capsule_mask(caps, mask)
}

/// Inverted capsule dropout on a single capsule set.
pub fn capsule_dropout<T: Real, R: Rng + ?Sized>(
    caps: &CapsuleSet<T>,
    p: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<CapsuleSet<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {p}")));
    }
    if mode == DropoutMode::Eval || p == 0.0 {
        return Ok(caps.clone());
    }
    let mask = dropout_mask(1, caps.count(), p, rng)?;
    let batched = caps.vectors.clone().reshape(vec![1, caps.count(), caps.dim()])?;
    let out = apply_capsule_mask(&batched, &mask)?;
    CapsuleSet::new(out.reshape(vec![caps.count(), caps.dim()])?)
}

// ---------------------------------------------------------- masking

pub(crate) fn select_forward<T: Real>(caps: &Tensor<T>, labels: &[usize], keep_all: bool) -> Result<Tensor<T>> {
    let &[b, n, d] = caps.shape() else {
        return Err(Error::shape("mask_select", format!("expected [B,N,D], got {:?}", caps.shape())));
    };
    check_labels(labels, b, n)?;
    let width = if keep_all { n * d } else { d };
    let mut out = vec![T::zero(); b * width];
    for (bi, &y) in labels.iter().enumerate() {
        let src = &caps.data()[(bi * n + y) * d..(bi * n + y + 1) * d];
        let off = bi * width + if keep_all { y * d } else { 0 };
        out[off..off + d].copy_from_slice(src);
    }
    Tensor::new(vec![b, width], out)
}

pub(crate) fn select_backward<T: Real>(
    caps: &Tensor<T>,
    labels: &[usize],
    keep_all: bool,
    g: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, n, d) = (caps.dim(0), caps.dim(1), caps.dim(2));
    let width = if keep_all { n * d } else { d };
    let mut out = vec![T::zero(); caps.numel()];
    for (bi, &y) in labels.iter().enumerate().take(b) {
        let off = bi * width + if keep_all { y * d } else { 0 };
        out[(bi * n + y) * d..(bi * n + y + 1) * d].copy_from_slice(&g.data()[off..off + d]);
    }
    Tensor::new(caps.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn caps(rows: &[&[f64]]) -> CapsuleSet<f64> {
        CapsuleSet::from_rows(rows).unwrap()
    }

    #[test]
    fn squash_zero_is_zero() {
        let v = squash(&caps(&[&[0.0, 0.0, 0.0]]));
        assert_eq!(v.capsule(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn squash_three_four() {
        // 25/26 * (0.6, 0.8)
        let v = squash(&caps(&[&[3.0, 4.0]]));
        let expect = [25.0 / 26.0 * 0.6, 25.0 / 26.0 * 0.8];
        for (a, b) in v.capsule(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((capsule_lengths(&v)[0] - 25.0 / 26.0).abs() < 1e-12);
        assert!((v.capsule(0)[0] - 0.5769).abs() < 1e-4);
        assert!((v.capsule(0)[1] - 0.7692).abs() < 1e-4);
    }

    #[test]
    fn squash_long_vector() {
        let v = squash(&caps(&[&[60.0, 80.0]]));
        assert!((capsule_lengths(&v)[0] - 10000.0 / 10001.0).abs() < 1e-12);
    }

    #[test]
    fn lengths_basic() {
        let l = capsule_lengths(&caps(&[&[0.0, 0.0], &[3.0, 4.0]]));
        assert_eq!(l.data(), &[0.0, 5.0]);
    }

    #[test]
    fn predict_identity_and_hand_matmul() {
        let u = caps(&[&[1.0, 1.0]]);
        let w = Tensor::<f64>::from_f64(vec![1, 1, 2, 2], &[2.0, 0.0, 0.0, 3.0]).unwrap();
        let uh = predict_vectors(&u, &w).unwrap();
        assert_eq!(uh.shape(), [1, 1, 2]);
        assert_eq!(uh.data(), &[2.0, 3.0]);

        let u = caps(&[&[1.0, -2.0], &[0.5, 4.0]]);
        let eye: Vec<f64> = (0..2 * 3).flat_map(|_| [1.0, 0.0, 0.0, 1.0]).collect();
        let w = Tensor::<f64>::from_f64(vec![2, 3, 2, 2], &eye).unwrap();
        let uh = predict_vectors(&u, &w).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(&uh.data()[(i * 3 + j) * 2..(i * 3 + j + 1) * 2], u.capsule(i));
            }
        }
        let bad = Tensor::<f64>::zeros(vec![3, 3, 2, 2]);
        assert!(predict_vectors(&u, &bad).is_err());
    }

    #[test]
    fn baseline_routing_weight_count() {
        let shape = [2048usize, 10, 16, 8];
        assert_eq!(shape.iter().product::<usize>(), 2_621_440);
    }

    #[test]
    fn routing_single_output_gets_everything() {
        let uh = Tensor::<f64>::from_f64(vec![3, 1, 2], &[0.1, 0.2, -0.3, 0.5, 0.7, 0.1]).unwrap();
        let expect = squash(&caps(&[&[0.5, 0.8]]));
        for r in 1..=3 {
            let st = dynamic_routing(&uh, r).unwrap();
            assert!(st.output.vectors().max_abs_diff(expect.vectors()) < 1e-12);
            assert!(st.coefficients.iter().all(|c| c.data().iter().all(|&x| x == 1.0)));
        }
    }

    #[test]
    fn routing_first_iteration_is_uniform() {
        let uh = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 2.0, -3.0, 0.5]).unwrap();
        let st = dynamic_routing(&uh, 1).unwrap();
        assert_eq!(st.coefficients[0].data(), &[0.5, 0.5]);
        let expect = squash(&caps(&[&[0.5, 1.0], &[-1.5, 0.25]]));
        assert!(st.output.vectors().max_abs_diff(expect.vectors()) < 1e-15);
    }

    #[test]
    fn routing_rejects_zero_iterations() {
        let uh = Tensor::<f64>::zeros(vec![1, 2, 2]);
        assert!(dynamic_routing(&uh, 0).is_err());
    }

    #[test]
    fn margin_loss_values() {
        let p = MarginLossParams::NORMAL;
        let l = Tensor::<f64>::from_f64(vec![3], &[0.9, 0.1, 0.1]).unwrap();
        assert!(margin_loss(&l, 0, &p).unwrap().abs() < 1e-15);
        let l = Tensor::<f64>::from_f64(vec![2], &[0.3, 0.0]).unwrap();
        assert!((margin_loss(&l, 0, &p).unwrap() - 0.36).abs() < 1e-12);
        let l = Tensor::<f64>::from_f64(vec![2], &[0.9, 0.8]).unwrap();
        assert!((margin_loss(&l, 0, &p).unwrap() - 0.245).abs() < 1e-12);
        assert!(margin_loss(&l, 2, &p).is_err());
    }

    #[test]
    fn hard_phase_thresholds() {
        assert_eq!(MarginLossParams::HARD.m_plus, 0.95);
        assert_eq!(MarginLossParams::HARD.m_minus, 0.05);
        let l = Tensor::<f64>::from_f64(vec![2], &[0.92, 0.0]).unwrap();
        assert_eq!(margin_loss(&l, 0, &MarginLossParams::NORMAL).unwrap(), 0.0);
        assert!(margin_loss(&l, 0, &MarginLossParams::HARD).unwrap() > 0.0);
        assert!(MarginLossParams::new(0.1, 0.9, 0.5).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = caps(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(capsule_dropout(&c, 0.0, DropoutMode::Train, &mut rng).unwrap(), c);
        assert_eq!(capsule_dropout(&c, 0.9, DropoutMode::Eval, &mut rng).unwrap(), c);
        assert!(capsule_dropout(&c, 1.0, DropoutMode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_zeroes_whole_capsules() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![1.0 + i as f64, 2.0, 3.0]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let c = caps(&refs);
        let out = capsule_dropout(&c, 0.5, DropoutMode::Train, &mut rng).unwrap();
        for i in 0..200 {
            let o = out.capsule(i);
            let dropped = o.iter().all(|&v| v == 0.0);
            let kept = o.iter().zip(c.capsule(i)).all(|(a, b)| (a - 2.0 * b).abs() < 1e-12);
            assert!(dropped ^ kept, "capsule {i} partially dropped: {o:?}");
        }
    }

    #[test]
    fn grouping_takes_consecutive_channels() {
        // 4 channels, 1x2 map, dim 2: capsule (g, p) = channels 2g, 2g+1 at p
        let vals: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let x = Tensor::<f64>::from_f64(vec![1, 4, 1, 2], &vals).unwrap();
        let c = group_forward(&x, 2).unwrap();
        assert_eq!(c.shape(), [1, 4, 2]);
        assert_eq!(c.data(), &[0.0, 2.0, 1.0, 3.0, 4.0, 6.0, 5.0, 7.0]);
        assert_eq!(group_backward(&x, 2, &c).unwrap(), x);
        assert!(group_forward(&x, 3).is_err());
    }

    #[test]
    fn select_modes() {
        let t = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(select_forward(&t, &[0], true).unwrap().data(), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(select_forward(&t, &[1], false).unwrap().data(), &[3.0, 4.0]);
        assert!(matches!(
            select_forward(&t, &[2], false),
            Err(Error::ClassIndex { index: 2, classes: 2 })
        ));
    }
}

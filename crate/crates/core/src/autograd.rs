//! Dynamic reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value and enough bookkeeping to propagate a
//! gradient to its inputs. Parameters are borrowed, not copied, so a graph
//! lives at most as long as the [`ParamStore`] it reads from.
//!
//! Routing iterations are ordinary operations on the graph, so unrolling
//! them needs no special support.

use std::borrow::Cow;

use crate::capsule::{self, MarginLossParams};
use crate::cfc;
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Deconv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Squash(Var),
    Softmax(Var),
    Lengths(Var),
    GroupCapsules {
        input: Var,
        dim: usize,
    },
    PredictVectors {
        u: Var,
        weights: Var,
    },
    WeightedSum {
        coeffs: Var,
        u_hat: Var,
    },
    Agreement {
        u_hat: Var,
        v: Var,
    },
    CapsuleMask {
        caps: Var,
        mask: Tensor<T>,
    },
    SelectCapsule {
        caps: Var,
        labels: Vec<usize>,
        keep_all: bool,
    },
    Cfc {
        input: Var,
        weights: Var,
        bias: Option<Var>,
        kernel: usize,
    },
    MarginLoss {
        lengths: Var,
        labels: Vec<usize>,
        params: MarginLossParams,
    },
    L1Loss {
        recon: Var,
        target: Var,
        weight: T,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _) | Sum(a) | Reshape(a) | Relu(a) | Sigmoid(a) | Squash(a) | Softmax(a)
            | Lengths(a) => vec![*a],
            Conv2d {
                input, kernel, bias, ..
            }
            | Deconv2d {
                input, kernel, bias, ..
            } => [Some(*input), Some(*kernel), *bias].into_iter().flatten().collect(),
            Linear {
                input,
                weight,
                bias,
            } => [Some(*input), Some(*weight), *bias].into_iter().flatten().collect(),
            Cfc {
                input,
                weights,
                bias,
                ..
            } => [Some(*input), Some(*weights), *bias].into_iter().flatten().collect(),
            GroupCapsules { input, .. } => vec![*input],
            PredictVectors { u, weights } => vec![*u, *weights],
            WeightedSum { coeffs, u_hat } => vec![*coeffs, *u_hat],
            Agreement { u_hat, v } => vec![*u_hat, *v],
            CapsuleMask { caps, .. } | SelectCapsule { caps, .. } => vec![*caps],
            MarginLoss { lengths, .. } => vec![*lengths],
            L1Loss { recon, target, .. } => vec![*recon, *target],
        }
    }
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Computation record for one forward pass.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf reached by the backward pass.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(node, id)| self.grads[node].take().map(|g| (id, g)))
            .collect()
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), false, None)
    }

    /// A leaf whose gradient is tracked (test inputs, probes).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), true, None)
    }

    /// A leaf borrowing a stored parameter.
    pub fn param(&mut self, store: &'p ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_leaf(Cow::Borrowed(&p.value), p.requires_grad, Some(id))
    }

    fn push_leaf(&mut self, value: Cow<'p, Tensor<T>>, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Error if the node holds NaN or infinite values, naming `layer`.
    pub fn check_finite(&self, var: Var, layer: &str) -> Result<()> {
        let v = self.value(var);
        if v.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                layer: layer.to_string(),
                stats: v.stats(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
        ))
    }

    pub fn deconv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::deconv2d(self.value(input), self.value(kernel), bias.map(|b| self.value(b)))?;
        Ok(self.push(
            out,
            Op::Deconv2d {
                input,
                kernel,
                bias,
            },
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Squash along the last axis.
    pub fn squash(&mut self, a: Var) -> Var {
        let out = capsule::squash_tensor(self.value(a));
        self.push(out, Op::Squash(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = capsule::softmax_last(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    /// Euclidean norms along the last axis.
    pub fn lengths(&mut self, a: Var) -> Result<Var> {
        let out = capsule::lengths_tensor(self.value(a))?;
        Ok(self.push(out, Op::Lengths(a)))
    }

    /// `u: [B,N_in,D_in]`, `weights: [N_in,N_out,D_out,D_in]` -> `[B,N_in,N_out,D_out]`.
    /// `[B,C,H,W] -> [B,(C/dim)*H*W,dim]`: each run of `dim` channels at a
    /// spatial position becomes one capsule.
    pub fn group_capsules(&mut self, input: Var, dim: usize) -> Result<Var> {
        let out = capsule::group_forward(self.value(input), dim)?;
        Ok(self.push(out, Op::GroupCapsules { input, dim }))
    }

    pub fn predict_vectors(&mut self, u: Var, weights: Var) -> Result<Var> {
        let out = capsule::predict_forward(self.value(u), self.value(weights))?;
        Ok(self.push(out, Op::PredictVectors { u, weights }))
    }

    /// `s[b,j,:] = sum_i coeffs[b,i,j] * u_hat[b,i,j,:]`.
    pub fn weighted_sum(&mut self, coeffs: Var, u_hat: Var) -> Result<Var> {
        let out = capsule::weighted_sum_forward(self.value(coeffs), self.value(u_hat))?;
        Ok(self.push(out, Op::WeightedSum { coeffs, u_hat }))
    }

    /// `a[b,i,j] = u_hat[b,i,j,:] . v[b,j,:]`.
    pub fn agreement(&mut self, u_hat: Var, v: Var) -> Result<Var> {
        let out = capsule::agreement_forward(self.value(u_hat), self.value(v))?;
        Ok(self.push(out, Op::Agreement { u_hat, v }))
    }

    /// Multiply each capsule of `caps: [B,N,D]` by the matching entry of
    /// `mask: [B,N]`.
    pub fn capsule_mask(&mut self, caps: Var, mask: Tensor<T>) -> Result<Var> {
        let out = capsule::apply_capsule_mask(self.value(caps), &mask)?;
        Ok(self.push(out, Op::CapsuleMask { caps, mask }))
    }

    /// From `caps: [B,N,D]` keep capsule `labels[b]` of each sample, either
    /// in place with the others zeroed (`[B, N*D]`) or alone (`[B, D]`).
    pub fn select_capsule(&mut self, caps: Var, labels: Vec<usize>, keep_all: bool) -> Result<Var> {
        let out = capsule::select_forward(self.value(caps), &labels, keep_all)?;
        Ok(self.push(
            out,
            Op::SelectCapsule {
                caps,
                labels,
                keep_all,
            },
        ))
    }

    /// CFC layer: per-window affine maps without weight sharing.
    pub fn cfc(&mut self, input: Var, weights: Var, bias: Option<Var>, kernel: usize) -> Result<Var> {
        let out = cfc::cfc_forward_tensor(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
            kernel,
        )?;
        Ok(self.push(
            out,
            Op::Cfc {
                input,
                weights,
                bias,
                kernel,
            },
        ))
    }

    /// Margin loss averaged over the batch; `lengths: [B,classes]`.
    pub fn margin_loss(&mut self, lengths: Var, labels: Vec<usize>, params: MarginLossParams) -> Result<Var> {
        let loss = capsule::margin_loss_batch(self.value(lengths), &labels, &params)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MarginLoss {
                lengths,
                labels,
                params,
            },
        ))
    }

    /// `weight * sum|recon - target|` per sample, averaged over the batch.
    pub fn l1_loss(&mut self, recon: Var, target: Var, weight: T) -> Result<Var> {
        let (r, t) = (self.value(recon), self.value(target));
        if r.shape() != t.shape() {
            return Err(Error::shape(
                "reconstruction loss",
                format!("{:?} vs {:?}", r.shape(), t.shape()),
            ));
        }
        let batch = if r.ndim() >= 4 { r.dim(0) } else { 1 };
        let total: T = r.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let loss = weight * total / T::from_usize(batch).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1Loss {
                recon,
                target,
                weight,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(id) = node.param {
                    params.push((idx, id));
                }
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (parent, pg) in self.local_grads(&node.op, &node.value, &g)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let mut res = Vec::with_capacity(3);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = y.data().iter().zip(g.data()).map(|(&p, &q)| p * q).collect();
                let gb = x.data().iter().zip(g.data()).map(|(&p, &q)| p * q).collect();
                res.push((*a, Tensor::new(x.shape().to_vec(), ga)?));
                res.push((*b, Tensor::new(y.shape().to_vec(), gb)?));
            }
            Op::Scale(a, f) => res.push((*a, g.map(|v| v * *f))),
            Op::Sum(a) => {
                let s = g.data()[0];
                res.push((*a, Tensor::full(val(*a).shape().to_vec(), s)));
            }
            Op::Reshape(a) => res.push((*a, g.clone().reshape(val(*a).shape().to_vec())?)),
            Op::Relu(a) => {
                let x = val(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::Sigmoid(a) => {
                let d = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                res.push((*a, Tensor::new(out.shape().to_vec(), d)?));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let (dx, dk, db) =
                    kernels::conv2d_backward(val(*input), val(*kernel), *stride, g, self.wants(*input))?;
                if let Some(dx) = dx {
                    res.push((*input, dx));
                }
                res.push((*kernel, dk));
                if let Some(b) = bias {
                    res.push((*b, db));
                }
            }
            Op::Deconv2d {
                input,
                kernel,
                bias,
            } => {
                let (dx, dk, db) = kernels::deconv2d_backward(val(*input), val(*kernel), g, self.wants(*input))?;
                if let Some(dx) = dx {
                    res.push((*input, dx));
                }
                res.push((*kernel, dk));
                if let Some(b) = bias {
                    res.push((*b, db));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (dx, dw, db) = kernels::linear_backward(val(*input), val(*weight), g, self.wants(*input))?;
                if let Some(dx) = dx {
                    res.push((*input, dx));
                }
                res.push((*weight, dw));
                if let Some(b) = bias {
                    res.push((*b, db));
                }
            }
            Op::Squash(a) => res.push((*a, capsule::squash_backward(val(*a), g)?)),
            Op::Softmax(a) => res.push((*a, capsule::softmax_backward(out, g)?)),
            Op::GroupCapsules { input, dim } => {
                res.push((*input, capsule::group_backward(val(*input), *dim, g)?))
            }
            Op::Lengths(a) => res.push((*a, capsule::lengths_backward(val(*a), out, g)?)),
            Op::PredictVectors { u, weights } => {
                let (du, dw) = capsule::predict_backward(val(*u), val(*weights), g, self.wants(*u))?;
                if let Some(du) = du {
                    res.push((*u, du));
                }
                res.push((*weights, dw));
            }
            Op::WeightedSum { coeffs, u_hat } => {
                let (dc, du) = capsule::weighted_sum_backward(val(*coeffs), val(*u_hat), g)?;
                res.push((*coeffs, dc));
                res.push((*u_hat, du));
            }
            Op::Agreement { u_hat, v } => {
                let (du, dv) = capsule::agreement_backward(val(*u_hat), val(*v), g)?;
                res.push((*u_hat, du));
                res.push((*v, dv));
            }
            Op::CapsuleMask { caps, mask } => {
                res.push((*caps, capsule::apply_capsule_mask(g, mask)?));
            }
            Op::SelectCapsule {
                caps,
                labels,
                keep_all,
            } => res.push((*caps, capsule::select_backward(val(*caps), labels, *keep_all, g)?)),
            Op::Cfc {
                input,
                weights,
                bias,
                kernel,
            } => {
                let (dx, dw, db) =
                    cfc::cfc_backward_tensor(val(*input), val(*weights), *kernel, g, self.wants(*input))?;
                if let Some(dx) = dx {
                    res.push((*input, dx));
                }
                res.push((*weights, dw));
                if let Some(b) = bias {
                    res.push((*b, db));
                }
            }
            Op::MarginLoss {
                lengths,
                labels,
                params,
            } => {
                let d = capsule::margin_loss_grad(val(*lengths), labels, params, g.data()[0])?;
                res.push((*lengths, d));
            }
            Op::L1Loss {
                recon,
                target,
                weight,
            } => {
                let (r, t) = (val(*recon), val(*target));
                let batch = if r.ndim() >= 4 { r.dim(0) } else { 1 };
                let scale = g.data()[0] * *weight / T::from_usize(batch).unwrap();
                let sign = |d: T| {
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                let dr: Vec<T> = r.data().iter().zip(t.data()).map(|(&a, &b)| sign(a - b)).collect();
                let dt: Vec<T> = dr.iter().map(|&v| -v).collect();
                res.push((*recon, Tensor::new(r.shape().to_vec(), dr)?));
                res.push((*target, Tensor::new(t.shape().to_vec(), dt)?));
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x + x) -> grad = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64(vec![3], &[1., -2., 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(vec![2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(vec![2], 3.0));
        let x = g.variable(Tensor::full(vec![2], 2.0));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn check_finite_names_layer() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![2], &[1.0, f64::INFINITY]).unwrap());
        let err = g.check_finite(x, "conv1").unwrap_err();
        assert!(err.to_string().contains("conv1"));
    }
}

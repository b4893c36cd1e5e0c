//! Central finite-difference gradient verification in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::capsule::DropoutMode;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, Phase};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub coords: usize,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coords: 100,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(n: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    if n <= opts.coords {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx = sample(&mut rng, n, opts.coords).into_vec();
    idx.sort_unstable();
    idx
}

fn compare(
    name: String,
    analytic: &Tensor<f64>,
    picks: &[usize],
    opts: &GradCheckOptions,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradReport> {
    let mut rep = GradReport {
        name,
        checked: picks.len(),
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in picks {
        let plus = eval(i, opts.step)?;
        let minus = eval(i, -opts.step)?;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[i];
        let err = relative_error(a, numeric, opts.floor);
        if err >= rep.max_rel_error {
            rep.max_rel_error = err;
            rep.worst_index = i;
            rep.analytic = a;
            rep.numeric = numeric;
        }
    }
    Ok(rep)
}

fn scalar(g: &Graph<'_, f64>, v: Var) -> Result<f64> {
    g.value(v)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(g.shape(v).to_vec()))
}

/// Check gradients of a scalar function of several input tensors.
pub fn check_fn<F>(inputs: &[Tensor<f64>], f: F, opts: GradCheckOptions) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let run = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut reports = Vec::new();
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let picks = coords(inputs[k].numel(), &opts, k as u64);
        let rep = compare(format!("input{k}"), &analytic, &picks, &opts, |i, h| {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let l = run(&work);
            work[k].data_mut()[i] = orig;
            l
        })?;
        reports.push(rep);
    }
    Ok(reports)
}

fn model_loss(model: &Model<f64>, images: &Tensor<f64>, labels: &[usize], phase: Phase) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let fwd = model.forward(&mut g, x, train_opts(labels), &mut ChaCha8Rng::seed_from_u64(0))?;
    let loss = model.total_loss(&mut g, &fwd, x, labels, phase)?;
    scalar(&g, loss)
}

fn train_opts(labels: &[usize]) -> ForwardOptions<'_> {
    ForwardOptions {
        mode: DropoutMode::Train,
        labels: Some(labels),
        decode: true,
    }
}

/// Check every parameter tensor of `model` on total loss (margin plus
/// reconstruction). Dropout must be disabled so the loss is deterministic.
pub fn check_model(
    model: &mut Model<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    phase: Phase,
    opts: GradCheckOptions,
) -> Result<Vec<GradReport>> {
    if model.config.dropout != 0.0 {
        return Err(Error::InvalidArgument("gradient check needs dropout disabled".into()));
    }
    let analytic = {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let fwd = model.forward(&mut g, x, train_opts(labels), &mut ChaCha8Rng::seed_from_u64(0))?;
        let loss = model.total_loss(&mut g, &fwd, x, labels, phase)?;
        g.backward(loss)?.into_param_grads()
    };
    let mut reports = Vec::new();
    for (id, grad) in analytic {
        let name = model.params.get(id).name.clone();
        let picks = coords(grad.numel(), &opts, id.index() as u64);
        let rep = compare(name, &grad, &picks, &opts, |i, h| {
            let orig = model.params.get(id).value.data()[i];
            model.params.get_mut(id).value.data_mut()[i] = orig + h;
            let l = model_loss(model, images, labels, phase);
            model.params.get_mut(id).value.data_mut()[i] = orig;
            l
        })?;
        reports.push(rep);
    }
    reports.sort_by_key(|r| model.params.find(&r.name).map(|id| id.index()));
    Ok(reports)
}

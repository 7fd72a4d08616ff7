//! Loss families over flat parameter vectors.
//!
//! Two families are provided: a ReLU MLP with softmax output (the experiment
//! model) and multinomial logistic regression (the strongly convex benchmark,
//! an MLP with no hidden layers). Both share one flat parameter layout: per
//! layer, a row-major `out x in` weight block followed by `out` biases.
//! Per-sample gradients are accumulated in ascending sample order so results
//! are bitwise independent of batch ordering.

use rand::Rng;

use crate::datasets::{FederatedDataset, LocalDataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng;

/// Loss family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Multinomial logistic regression; with `l2 > 0` it is `l2`-strongly
    /// convex.
    Logistic,
    /// ReLU MLP with softmax output.
    Mlp,
}

/// Loss configuration.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub family: Family,
    /// L2 regularization coefficient, applied to all weights and biases.
    pub l2: f64,
    /// Hidden layer widths (MLP only).
    pub hidden: Vec<usize>,
}

impl LossSpec {
    pub fn logistic(l2: f64) -> Self {
        LossSpec {
            family: Family::Logistic,
            l2,
            hidden: Vec::new(),
        }
    }

    pub fn mlp(l2: f64, hidden: Vec<usize>) -> Self {
        LossSpec {
            family: Family::Mlp,
            l2,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l2 < 0.0 {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        if self.family == Family::Mlp && self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Concrete architecture for a given input dimension.
    pub fn arch(&self, input: usize) -> Arch {
        let hidden = match self.family {
            Family::Logistic => Vec::new(),
            Family::Mlp => self.hidden.clone(),
        };
        Arch {
            input,
            hidden,
            classes: NUM_CLASSES,
        }
    }
}

/// Architecture descriptor fixing the flat parameter layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Arch {
    /// `(fan_in, fan_out)` per layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.classes));
        dims
    }

    /// Total flat parameter count.
    pub fn dim(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fi, fo)| fi * fo + fo)
            .sum()
    }
}

/// Initial parameters: zeros for logistic, Glorot-style scaled uniform
/// weights with zero biases for the MLP.
pub fn init_params(spec: &LossSpec, arch: &Arch, seed: u64) -> Vec<f64> {
    let mut w = vec![0.0; arch.dim()];
    if spec.family == Family::Logistic {
        return w;
    }
    let mut rng = rng::split(seed, 0x1417, 0);
    let mut offset = 0;
    for (fan_in, fan_out) in arch.layer_dims() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for slot in &mut w[offset..offset + fan_in * fan_out] {
            *slot = rng.gen_range(-bound..bound);
        }
        offset += fan_in * fan_out + fan_out; // biases stay zero
    }
    w
}

fn check_inputs(arch: &Arch, w: &[f64], data: &LocalDataset, idx: &[usize]) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Data("batch must be non-empty".into()));
    }
    if data.dim != arch.input {
        return Err(Error::Data(format!(
            "feature dim {} does not match architecture input {}",
            data.dim, arch.input
        )));
    }
    if w.len() != arch.dim() {
        return Err(Error::Data(format!(
            "parameter vector has {} entries, architecture needs {}",
            w.len(),
            arch.dim()
        )));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite parameter entry".into()));
    }
    if idx.iter().any(|&i| i >= data.len()) {
        return Err(Error::Data("sample index out of range".into()));
    }
    Ok(())
}

/// Forward pass for one sample; returns all post-activation layer outputs,
/// the last being the raw logits.
fn forward(arch: &Arch, w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let dims = arch.layer_dims();
    let n_layers = dims.len();
    let mut outs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let input: &[f64] = if layer == 0 { x } else { &outs[layer - 1] };
        let weights = &w[offset..offset + fan_in * fan_out];
        let biases = &w[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        let mut out = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            let mut z: f64 = biases[o];
            for (wi, xi) in row.iter().zip(input) {
                z += wi * xi;
            }
            if layer + 1 < n_layers {
                z = z.max(0.0); // ReLU on hidden layers
            }
            out.push(z);
        }
        outs.push(out);
        offset += fan_in * fan_out + fan_out;
    }
    outs
}

/// Numerically stable `log(sum(exp(z)))`.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn sorted_indices(idx: &[usize]) -> Vec<usize> {
    let mut sorted = idx.to_vec();
    sorted.sort_unstable();
    sorted
}

/// Mean cross-entropy over the batch plus `l2/2 * ||w||^2`.
pub fn loss(
    spec: &LossSpec,
    arch: &Arch,
    w: &[f64],
    data: &LocalDataset,
    idx: &[usize],
) -> Result<f64> {
    check_inputs(arch, w, data, idx)?;
    let idx = sorted_indices(idx);
    let mut acc = 0.0;
    for &i in &idx {
        let outs = forward(arch, w, data.row(i));
        let logits = outs.last().unwrap();
        acc += log_sum_exp(logits) - logits[data.labels[i] as usize];
    }
    let reg: f64 = 0.5 * spec.l2 * w.iter().map(|x| x * x).sum::<f64>();
    Ok(acc / idx.len() as f64 + reg)
}

/// Exact gradient of [`loss`], mean of per-sample gradients plus `l2 * w`.
pub fn grad(
    spec: &LossSpec,
    arch: &Arch,
    w: &[f64],
    data: &LocalDataset,
    idx: &[usize],
) -> Result<Vec<f64>> {
    check_inputs(arch, w, data, idx)?;
    let idx = sorted_indices(idx);
    let dims = arch.layer_dims();
    let n_layers = dims.len();
    let mut layer_offsets = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for &(fi, fo) in &dims {
        layer_offsets.push(offset);
        offset += fi * fo + fo;
    }

    let mut g = vec![0.0; w.len()];
    for &i in &idx {
        let x = data.row(i);
        let outs = forward(arch, w, x);
        let logits = outs.last().unwrap();
        let lse = log_sum_exp(logits);
        // delta at the output layer: softmax - one-hot
        let mut delta: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
        delta[data.labels[i] as usize] -= 1.0;

        for layer in (0..n_layers).rev() {
            let (fan_in, fan_out) = dims[layer];
            let off = layer_offsets[layer];
            let input: &[f64] = if layer == 0 { x } else { &outs[layer - 1] };
            for o in 0..fan_out {
                let d = delta[o];
                let grow = &mut g[off + o * fan_in..off + (o + 1) * fan_in];
                for (gv, xv) in grow.iter_mut().zip(input) {
                    *gv += d * xv;
                }
                g[off + fan_in * fan_out + o] += d;
            }
            if layer > 0 {
                let weights = &w[off..off + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    for (pv, wv) in prev.iter_mut().zip(row) {
                        *pv += d * wv;
                    }
                }
                // ReLU mask of the producing layer
                for (pv, av) in prev.iter_mut().zip(&outs[layer - 1]) {
                    if *av <= 0.0 {
                        *pv = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    let inv = 1.0 / idx.len() as f64;
    for (gv, wv) in g.iter_mut().zip(w) {
        *gv = *gv * inv + spec.l2 * wv;
    }
    Ok(g)
}

/// Fraction of samples whose argmax logit matches the label.
pub fn accuracy(arch: &Arch, w: &[f64], data: &LocalDataset) -> f64 {
    let mut hits = 0usize;
    for i in 0..data.len() {
        let outs = forward(arch, w, data.row(i));
        let logits = outs.last().unwrap();
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap();
        if pred == data.labels[i] as usize {
            hits += 1;
        }
    }
    hits as f64 / data.len() as f64
}

/// Strong-convexity and smoothness constants for the logistic family.
///
/// `mu = l2` exactly; the smoothness estimate uses the softmax Hessian bound
/// `L <= l2 + (1/4) max_k mean ||x||^2` over the devices' data.
pub fn strong_convexity_constants(
    spec: &LossSpec,
    fed: &FederatedDataset,
) -> Result<(f64, f64)> {
    if spec.family != Family::Logistic {
        return Err(Error::Unsupported(
            "strong convexity constants require the logistic family".into(),
        ));
    }
    let mut max_mean_sq = 0.0f64;
    for d in &fed.locals {
        let mut acc = 0.0;
        for i in 0..d.len() {
            acc += d.row(i).iter().map(|x| x * x).sum::<f64>();
        }
        max_mean_sq = max_mean_sq.max(acc / d.len() as f64);
    }
    Ok((spec.l2, spec.l2 + 0.25 * max_mean_sq))
}

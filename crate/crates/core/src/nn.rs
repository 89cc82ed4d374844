//! Dense feed-forward classifier with exact backpropagation.
//!
//! A network is a chain of affine layers. Hidden layers use ReLU, the output
//! layer is linear and feeds a softmax. The activations entering the output
//! layer are exposed as the sample's embedding.
//!
//! Weights are row-major with shape `(out_dim, in_dim)`. All arithmetic is
//! `f64`.

use std::cell::Cell;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward passes executed on the current thread so far.
///
/// Callers take the difference of two readings to count the inference done
/// by a block of code.
pub fn forward_passes() -> u64 {
    FORWARD_PASSES.with(Cell::get)
}

fn count_forward_pass() {
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut [f64]) {
        if self == Activation::Relu {
            for v in z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// One affine layer followed by its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::input("layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::input(format!(
                "layer {out_dim}x{in_dim} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        Self::new(
            in_dim,
            out_dim,
            vec![0.0; in_dim * out_dim],
            vec![0.0; out_dim],
            activation,
        )
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_dim, out_dim, activation)?;
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::Internal(format!("glorot range: {e}")))?;
        for w in &mut layer.weights {
            *w = dist.sample(rng);
        }
        Ok(layer)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Weights and biases of the whole classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    /// Builds a network from explicit layers. Dimensions must chain and the
    /// last layer must be linear.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::input("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::input(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        if layers.last().map(Layer::activation) != Some(Activation::Identity) {
            return Err(Error::input("output layer must be linear"));
        }
        Ok(Self { layers })
    }

    /// `input_dim -> hidden[0] -> ... -> classes` with ReLU hidden layers and
    /// Glorot-uniform initialization.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::glorot(d[0], d[1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].in_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// All parameters in a fixed order: per layer, weights then biases.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    /// Mutable view in the same order as [`ModelParams::values`].
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardResult> {
        Ok(self.trace(x)?.into_result())
    }

    /// Forward pass that keeps every intermediate activation for backprop.
    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::input(format!(
                "input has dimension {} but network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        count_forward_pass();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.layers {
            let mut z = layer.affine(&activations[activations.len() - 1]);
            layer.activation.apply(&mut z);
            activations.push(z);
        }
        let probs = softmax(&activations[activations.len() - 1]);
        Ok(Trace { activations, probs })
    }

    /// Predicted class probabilities only.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.probs)
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Activations entering the output layer.
    pub embedding: Vec<f64>,
}

/// Cached activations of one forward pass: input, each layer's output, then
/// the softmax probabilities.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        &self.activations[self.activations.len() - 1]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn embedding(&self) -> &[f64] {
        &self.activations[self.activations.len() - 2]
    }

    fn into_result(mut self) -> ForwardResult {
        let logits = self.activations.pop().unwrap_or_default();
        let embedding = self.activations.pop().unwrap_or_default();
        ForwardResult {
            logits,
            probs: self.probs,
            embedding,
        }
    }
}

/// Gradient of one layer, same layout as [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient of a scalar loss with respect to every parameter, plus the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<LayerGrad>,
    loss: f64,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            loss: 0.0,
        }
    }

    pub fn layers(&self) -> &[LayerGrad] {
        &self.layers
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Same ordering as [`ModelParams::values`].
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|g| *g *= factor);
        }
        self.loss *= factor;
    }

    fn check_shape(&self, params: &ModelParams) -> Result<()> {
        let ok = self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(g, l)| {
                g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Internal("gradient shape does not match parameters".into()))
        }
    }

    /// Adds the cross-entropy gradient of one traced example, scaled by
    /// `weight`, to this accumulator. Returns the example's unweighted loss.
    pub fn accumulate(
        &mut self,
        params: &ModelParams,
        trace: &Trace,
        target: &[f64],
        weight: f64,
    ) -> f64 {
        let logits = trace.logits();
        let lse = log_sum_exp(logits);
        let loss: f64 = target
            .iter()
            .zip(logits)
            .filter(|(t, _)| **t != 0.0)
            .map(|(t, z)| -t * (z - lse))
            .sum();
        self.loss += weight * loss;

        let mut delta: Vec<f64> = trace
            .probs
            .iter()
            .zip(target)
            .map(|(p, t)| weight * (p - t))
            .collect();
        for l in (0..params.layers.len()).rev() {
            let layer = &params.layers[l];
            let input = &trace.activations[l];
            let grad = &mut self.layers[l];
            for (o, d) in delta.iter().enumerate() {
                grad.bias[o] += d;
                if *d != 0.0 {
                    axpy(*d, input, &mut grad.weights[o * layer.in_dim..(o + 1) * layer.in_dim]);
                }
            }
            if l == 0 {
                break;
            }
            let mut next = vec![0.0; layer.in_dim];
            for (row, d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                if *d != 0.0 {
                    axpy(*d, row, &mut next);
                }
            }
            if params.layers[l - 1].activation == Activation::Relu {
                for (n, a) in next.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *n = 0.0;
                    }
                }
            }
            delta = next;
        }
        loss
    }
}

/// One weighted training example for [`backward`].
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [f64],
    /// Target class distribution.
    pub target: &'a [f64],
    pub weight: f64,
}

/// Checks that `p` is a probability vector of length `k` (sum 1 ± 1e-9).
pub fn validate_distribution(p: &[f64], k: usize) -> Result<()> {
    if p.len() != k {
        return Err(Error::input(format!(
            "distribution has {} entries, expected {k}",
            p.len()
        )));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::input("distribution has negative or non-finite entries"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!("distribution sums to {sum}")));
    }
    Ok(())
}

/// Exact gradients of `(1/n) * sum_i w_i * CE(target_i, softmax(f(x_i)))`.
pub fn backward(params: &ModelParams, batch: &[Example<'_>]) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::input("backward needs a nonempty batch"));
    }
    let k = params.num_classes();
    let mut grads = Gradients::zeros_like(params);
    for ex in batch {
        validate_distribution(ex.target, k)?;
        if !ex.weight.is_finite() {
            return Err(Error::input("example weight must be finite"));
        }
        let trace = params.trace(ex.x)?;
        grads.accumulate(params, &trace, ex.target, ex.weight);
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok(grads)
}

/// Weighted mean cross-entropy of a batch, from forward passes only.
pub fn batch_loss(params: &ModelParams, batch: &[Example<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("loss needs a nonempty batch"));
    }
    let mut total = 0.0;
    for ex in batch {
        let logits = params.trace(ex.x)?.logits().to_vec();
        let lse = log_sum_exp(&logits);
        let ce: f64 = ex
            .target
            .iter()
            .zip(&logits)
            .map(|(t, z)| -t * (z - lse))
            .sum();
        total += ex.weight * ce;
    }
    Ok(total / batch.len() as f64)
}

/// `params - lr * grads`, elementwise.
pub fn sgd_step(params: &ModelParams, grads: &Gradients, lr: f64) -> Result<ModelParams> {
    let mut next = params.clone();
    Sgd::new(lr, 0.0)?.step(&mut next, grads)?;
    Ok(next)
}

/// Plain SGD with optional heavy-ball momentum (`v = m*v + g; w -= lr*v`).
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: None,
        })
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        grads.check_shape(params)?;
        let effective = if self.momentum > 0.0 {
            let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(params));
            for (vl, gl) in v.layers.iter_mut().zip(&grads.layers) {
                for (vi, gi) in vl
                    .weights
                    .iter_mut()
                    .chain(vl.bias.iter_mut())
                    .zip(gl.weights.iter().chain(&gl.bias))
                {
                    *vi = self.momentum * *vi + gi;
                }
            }
            &*v
        } else {
            grads
        };
        for (w, g) in params.values_mut().zip(effective.values()) {
            *w -= self.lr * g;
        }
        if !params.is_finite() {
            return Err(Error::Internal("non-finite parameter after SGD update".into()));
        }
        Ok(())
    }
}

//! Finite-difference oracle for [`nn::backward`](crate::nn::backward).
//!
//! The oracle only evaluates the loss through forward passes; it shares no
//! code with the backpropagation path.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{backward, batch_loss, Activation, Example, Layer, ModelParams};
use crate::Result;

/// Finite-difference step. The five-point stencil has O(h^4) truncation
/// error, so a step this large keeps roundoff near 1e-12.
pub const STEP: f64 = 1e-4;

/// Denominator floor for the elementwise relative error. Entries whose true
/// gradient is below this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

/// Five-point central difference
/// `(8 (L(w + h) - L(w - h)) - (L(w + 2h) - L(w - 2h))) / 12h`
/// along every parameter axis.
pub fn finite_difference(params: &ModelParams, batch: &[Example<'_>], h: f64) -> Result<Vec<f64>> {
    let n = params.num_params();
    let mut out = Vec::with_capacity(n);
    let mut probe = params.clone();
    for i in 0..n {
        let orig = params.values().nth(i).unwrap_or_default();
        let mut at = |offset: f64| -> Result<f64> {
            set(&mut probe, i, orig + offset);
            batch_loss(&probe, batch)
        };
        let near = at(h)? - at(-h)?;
        let far = at(2.0 * h)? - at(-2.0 * h)?;
        set(&mut probe, i, orig);
        out.push((8.0 * near - far) / (12.0 * h));
    }
    Ok(out)
}

fn set(params: &mut ModelParams, i: usize, v: f64) {
    if let Some(w) = params.values_mut().nth(i) {
        *w = v;
    }
}

/// Instances with a hidden pre-activation closer than this to the ReLU kink
/// are redrawn: the loss is not differentiable there and central differences
/// straddling it disagree with either one-sided derivative.
pub const KINK_MARGIN: f64 = 1e-2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct InstanceReport {
    pub architecture: Vec<usize>,
    pub batch_size: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Owned random instance: a small ReLU net with random biases and a weighted
/// batch with soft targets.
pub struct Instance {
    pub params: ModelParams,
    pub xs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Instance {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        loop {
            let inst = Self::draw(rng)?;
            if inst.min_hidden_preactivation() >= KINK_MARGIN {
                return Ok(inst);
            }
        }
    }

    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        let input = rng.random_range(1..=4);
        let depth = rng.random_range(0..=2);
        let mut dims = vec![input];
        dims.extend((0..depth).map(|_| rng.random_range(2..=6)));
        dims.push(rng.random_range(2..=4));
        let classes = dims[dims.len() - 1];
        let mut layers = Vec::new();
        for (i, d) in dims.windows(2).enumerate() {
            let act = if i + 2 == dims.len() { Activation::Identity } else { Activation::Relu };
            let w = (0..d[0] * d[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = (0..d[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
            layers.push(Layer::new(d[0], d[1], w, b, act)?);
        }
        let params = ModelParams::new(layers)?;
        let n = rng.random_range(1..=5);
        let xs = (0..n)
            .map(|_| (0..input).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let targets = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let weights = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        Ok(Self {
            params,
            xs,
            targets,
            weights,
        })
    }

    /// Smallest |z| over all ReLU pre-activations in the batch.
    fn min_hidden_preactivation(&self) -> f64 {
        let mut min = f64::INFINITY;
        for x in &self.xs {
            let mut a = x.clone();
            for layer in self.params.layers() {
                let z: Vec<f64> = (0..layer.out_dim())
                    .map(|o| {
                        let row = &layer.weights()[o * layer.in_dim()..(o + 1) * layer.in_dim()];
                        layer.bias()[o] + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()
                    })
                    .collect();
                if layer.activation() == Activation::Relu {
                    min = z.iter().fold(min, |m, v| m.min(v.abs()));
                    a = z.into_iter().map(|v| v.max(0.0)).collect();
                } else {
                    a = z;
                }
            }
        }
        min
    }

    pub fn batch(&self) -> Vec<Example<'_>> {
        self.xs
            .iter()
            .zip(&self.targets)
            .zip(&self.weights)
            .map(|((x, t), w)| Example {
                x,
                target: t,
                weight: *w,
            })
            .collect()
    }

    pub fn check(&self) -> Result<InstanceReport> {
        let batch = self.batch();
        let analytic: Vec<f64> = backward(&self.params, &batch)?.values().collect();
        let numeric = finite_difference(&self.params, &batch, STEP)?;
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for (a, n) in analytic.iter().zip(&numeric) {
            rel = rel.max(relative_error(*a, *n));
            abs = abs.max((a - n).abs());
        }
        let mut architecture = vec![self.params.input_dim()];
        architecture.extend(self.params.layers().iter().map(|l| l.out_dim()));
        Ok(InstanceReport {
            architecture,
            batch_size: batch.len(),
            max_rel_error: rel,
            max_abs_error: abs,
        })
    }
}

/// Checks `count` random instances derived from `seed`.
pub fn run(count: usize, seed: u64) -> Result<Vec<InstanceReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Instance::random(&mut rng)?.check()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_matches_finite_differences() {
        let reports = run(25, 2024).unwrap();
        for r in &reports {
            assert!(r.max_rel_error < 1e-6, "{r:?}");
        }
    }
}

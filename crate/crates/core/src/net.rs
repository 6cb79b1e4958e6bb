//! Fully-connected softmax classifier with hand-written backprop.
//!
//! Parameters live in a single [`ParamVector`] with segments `W0, b0, W1, b1, ...`.
//! `Wk` is stored row-major as `fan_out x fan_in`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    /// Input width, hidden widths..., number of classes.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    /// `(name, len)` pairs in storage order.
    pub fn layout(&self) -> Vec<(String, usize)> {
        self.layer_sizes
            .windows(2)
            .enumerate()
            .flat_map(|(k, w)| [(format!("W{k}"), w[0] * w[1]), (format!("b{k}"), w[1])])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: NetSpec,
    params: ParamVector,
}

/// Per-sample forward pass: pre-activations and activations of every layer.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Model {
    /// Glorot-uniform weights, zero biases, drawn from ChaCha8 seeded with
    /// `spec.init_seed` in storage order.
    pub fn init(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamVector::zeros(spec.layout())?;
        let mut rng = seed::rng(spec.init_seed);
        for (k, w) in spec.layer_sizes.windows(2).enumerate() {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            for v in params.layer_mut(2 * k) {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: NetSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        let expected = ParamVector::zeros(spec.layout())?;
        expected.check_compatible(&params)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    fn num_linear(&self) -> usize {
        self.spec.layer_sizes.len() - 1
    }

    fn check_batch(&self, inputs: &[&[f64]], labels: Option<&[usize]>) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let width = self.spec.input_dim();
        if let Some(bad) = inputs.iter().find(|x| x.len() != width) {
            return Err(Error::Dimension(format!(
                "input width {} but network expects {width}",
                bad.len()
            )));
        }
        if let Some(labels) = labels {
            if labels.len() != inputs.len() {
                return Err(Error::Dimension(format!(
                    "{} inputs but {} labels",
                    inputs.len(),
                    labels.len()
                )));
            }
            let classes = self.spec.num_classes();
            if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                return Err(Error::Dimension(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Trace {
        let mut pre = Vec::with_capacity(self.num_linear());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.num_linear() + 1);
        post.push(x.to_vec());
        for k in 0..self.num_linear() {
            let (fan_in, fan_out) = (self.spec.layer_sizes[k], self.spec.layer_sizes[k + 1]);
            let w = self.params.layer(2 * k).values;
            let b = self.params.layer(2 * k + 1).values;
            let input = &post[k];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    b[o] + row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>()
                })
                .collect();
            let a = if k + 1 == self.num_linear() {
                z.clone()
            } else {
                z.iter().map(|&v| self.spec.activation.apply(v)).collect()
            };
            pre.push(z);
            post.push(a);
        }
        Trace { pre, post }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).post.pop().expect("at least one layer")
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Mean softmax cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, inputs: &[&[f64]], labels: &[usize]) -> Result<(f64, ParamVector)> {
        self.check_batch(inputs, Some(labels))?;
        let n = inputs.len() as f64;
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;

        for (x, &y) in inputs.iter().zip(labels) {
            let trace = self.forward(x);
            let logits = trace.post.last().expect("at least one layer");
            let probs = softmax(logits);
            loss -= log_softmax_at(logits, y);

            // dL/dz for the output layer
            let mut delta: Vec<f64> = probs;
            delta[y] -= 1.0;

            for k in (0..self.num_linear()).rev() {
                let (fan_in, fan_out) = (self.spec.layer_sizes[k], self.spec.layer_sizes[k + 1]);
                let input = &trace.post[k];
                {
                    let gw = grads.layer_mut(2 * k);
                    for o in 0..fan_out {
                        let d = delta[o] / n;
                        for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                            *g += d * xi;
                        }
                    }
                }
                for (g, d) in grads.layer_mut(2 * k + 1).iter_mut().zip(&delta) {
                    *g += d / n;
                }
                if k > 0 {
                    let w = self.params.layer(2 * k).values;
                    let (z, a) = (&trace.pre[k - 1], &trace.post[k]);
                    delta = (0..fan_in)
                        .map(|i| {
                            let back: f64 =
                                (0..fan_out).map(|o| w[o * fan_in + i] * delta[o]).sum();
                            back * self.spec.activation.derivative(z[i], a[i])
                        })
                        .collect();
                }
            }
        }
        Ok((loss / n, grads))
    }

    /// `params -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &ParamVector, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate {lr}")));
        }
        self.params.axpy_in_place(-lr, grads)
    }

    /// Fraction of samples whose argmax prediction equals the label.
    pub fn accuracy(&self, inputs: &[&[f64]], labels: &[usize]) -> Result<f64> {
        self.check_batch(inputs, Some(labels))?;
        let correct = inputs
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        Ok(correct as f64 / inputs.len() as f64)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[index] - max - lse
}

//! Small dense feedforward networks with hand-written backpropagation and an
//! Adam optimizer.
//!
//! Networks here are tiny (tens of units), so everything is plain `Vec<f64>`
//! in row-major order: a layer with `inputs` inputs and `outputs` outputs
//! stores its weights as `outputs` rows of `inputs` columns.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RatsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    /// Reserved for standard-deviation heads; keeps outputs strictly positive.
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Softplus => sigmoid(pre),
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(RatsError::ShapeMismatch(
                "layer dimensions must be positive".into(),
            ));
        }
        if weights.len() != inputs * outputs {
            return Err(RatsError::ShapeMismatch(format!(
                "weights have {} entries, expected {}x{}",
                weights.len(),
                outputs,
                inputs
            )));
        }
        if biases.len() != outputs {
            return Err(RatsError::DimensionMismatch {
                expected: outputs,
                got: biases.len(),
            });
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(RatsError::NonFinite("layer parameters".into()));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
            activation,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            biases: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.inputs + inp]
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }
}

/// Per-layer record of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Partial derivatives for every parameter of a [`DenseNet`], same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub layers: Vec<LayerGrad>,
}

impl Gradient {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Gradient, factor: f64) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += factor * b;
        }
        Ok(())
    }

    fn check_shape(&self, other: &Gradient) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.len() == b.weights.len() && a.biases.len() == b.biases.len()
            });
        if same {
            Ok(())
        } else {
            Err(RatsError::ShapeMismatch("gradient layouts differ".into()))
        }
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.biases.len() == l.biases.len())
    }
}

/// Result of [`DenseNet::backward`]: parameter gradient plus input gradient.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub params: Gradient,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(RatsError::ShapeMismatch("network has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(RatsError::ShapeMismatch(format!(
                    "layer output {} does not chain into input {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-initialized net with `hidden` activation on every layer but the last.
    ///
    /// `sizes` lists the width of every level, input first.
    pub fn glorot<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output } else { hidden };
                Layer::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::zeros(w[0], w[1], if i == last { output } else { hidden }))
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            let act = layer.activation;
            x = layer
                .pre_activation(&x)
                .into_iter()
                .map(|p| act.apply(p))
                .collect();
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(input.to_vec());
        for layer in &self.layers {
            let z = layer.pre_activation(activations.last().unwrap());
            let a = z.iter().map(|&p| layer.activation.apply(p)).collect();
            pre.push(z);
            activations.push(a);
        }
        Ok(Trace { activations, pre })
    }

    /// Gradient of `upstream · forward(input)` with respect to parameters and input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Backprop> {
        let trace = self.forward_trace(input)?;
        let mut params = Gradient::zeros_like(self);
        let input = self.accumulate_backward(&trace, upstream, &mut params)?;
        Ok(Backprop { params, input })
    }

    /// Backpropagates `upstream` through a recorded pass, adding parameter
    /// partials into `grad`. Returns the gradient with respect to the input.
    pub fn accumulate_backward(
        &self,
        trace: &Trace,
        upstream: &[f64],
        grad: &mut Gradient,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(RatsError::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if !grad.matches(self) {
            return Err(RatsError::ShapeMismatch(
                "gradient does not match network".into(),
            ));
        }
        let mut delta = upstream.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            for (d, &p) in delta.iter_mut().zip(&trace.pre[i]) {
                *d *= layer.activation.derivative(p);
            }
            let x = &trace.activations[i];
            let g = &mut grad.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, &xi) in row.iter_mut().zip(x) {
                    *gw += d * xi;
                }
            }
            let mut below = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (b, &w) in below.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            delta = below;
        }
        Ok(delta)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
            .copied()
            .collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(RatsError::DimensionMismatch {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for p in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *p = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            shapes: self
                .layers
                .iter()
                .map(|l| LayerShape {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    activation: l.activation,
                })
                .collect(),
            values: self.params_flat(),
        }
    }

    pub fn from_snapshot(snap: &ParamSnapshot) -> Result<Self> {
        let layers = snap
            .shapes
            .iter()
            .map(|s| Layer::zeros(s.inputs, s.outputs, s.activation))
            .collect();
        let mut net = DenseNet::new(layers)?;
        net.set_params_flat(&snap.values)?;
        Ok(net)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(RatsError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

/// Flat, ordered parameter list with a shape header. Layer by layer, weights
/// (row-major) then biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub shapes: Vec<LayerShape>,
    pub values: Vec<f64>,
}

/// Bias-corrected adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Gradient,
    v: Gradient,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        Self::with_betas(net, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(net: &DenseNet, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: Gradient::zeros_like(net),
            v: Gradient::zeros_like(net),
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Gradient {
        &self.m
    }

    pub fn second_moment(&self) -> &Gradient {
        &self.v
    }

    /// One descent step: parameters move against `grad`.
    pub fn step(&mut self, net: &mut DenseNet, grad: &Gradient) -> Result<()> {
        if !grad.matches(net) || !self.m.matches(net) {
            return Err(RatsError::ShapeMismatch(
                "adam state, gradient and network disagree".into(),
            ));
        }
        if !grad.is_finite() {
            return Err(RatsError::NonFinite("gradient passed to adam".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let params = net
            .layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()));
        for (((p, g), m), v) in params
            .zip(grad.values())
            .zip(self.m.values_mut())
            .zip(self.v.values_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

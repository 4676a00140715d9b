//! Dense feedforward networks with exact reverse-mode gradients.
//!
//! A [`DenseNet`] is an ordered chain of affine layers, each followed by an
//! elementwise activation. Batched evaluation keeps the per-layer outputs in a
//! [`ForwardTrace`] so that [`DenseNet::backward_batch`] can return the exact
//! gradient of `sum_i <upstream_i, f(x_i)>` with respect to every weight, bias
//! and input coordinate.
//!
//! Weights are stored `out x in`, row-major, so `forward(x) = act(W x + b)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the normal initialization used for every weight.
pub const INIT_STD: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    seed: u64,
}

/// Per-parameter partial derivatives, shape-congruent with a [`DenseNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Activations recorded during a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    input: Array2<f64>,
    outputs: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("trace of an empty network")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.input
    }
}

/// Result of a backward pass: parameter gradients and gradients with respect
/// to the network input (one row per batch element).
#[derive(Clone, Debug)]
pub struct Backprop {
    pub params: Gradients,
    pub input: Array2<f64>,
}

impl DenseNet {
    /// Normal(0, [`INIT_STD`]^2) weights, zero biases.
    pub fn init(sizes: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        Self::init_with_std(sizes, activations, seed, INIT_STD)
    }

    pub fn init_with_std(
        sizes: &[usize],
        activations: &[Activation],
        seed: u64,
        std: f64,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs at least two layer sizes, got {}",
                sizes.len()
            )));
        }
        if let Some(pos) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("layer size at position {pos} is zero")));
        }
        if activations.len() != sizes.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers need {} activations, got {}",
                sizes.len() - 1,
                sizes.len() - 1,
                activations.len()
            )));
        }
        if !(std.is_finite() && std >= 0.0) {
            return Err(Error::Config(format!("invalid init std {std}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(pair, &activation)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(&mut rng));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Ok(Self { layers, seed })
    }

    /// Hidden layers use `hidden`, the last layer uses `output`.
    pub fn mlp(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        let n = sizes.len().saturating_sub(1);
        let mut acts = vec![hidden; n];
        if let Some(last) = acts.last_mut() {
            *last = output;
        }
        Self::init(sizes, &acts, seed)
    }

    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Shape(format!("layer {i} bias length mismatch")));
            }
        }
        Ok(Self { layers, seed })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Layer::output_dim));
        s
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    /// Rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = Self::layer_forward(layer, h.view());
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Result<ForwardTrace> {
        self.check_input(x.ncols())?;
        let input = x.to_owned();
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = if i == 0 { input.view() } else { outputs[i - 1].view() };
            let out = Self::layer_forward(layer, prev);
            outputs.push(out);
        }
        Ok(ForwardTrace { input, outputs })
    }

    fn layer_forward(layer: &Layer, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.weights.t());
        z += &layer.bias;
        let act = layer.activation;
        if act != Activation::Linear {
            z.mapv_inplace(|v| act.apply(v));
        }
        z
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects input of length {}, got {cols}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Gradients of `<upstream, forward(x)>` for a single sample.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Backprop> {
        let xb = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        let ub = ArrayView2::from_shape((1, upstream.len()), upstream)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let trace = self.forward_trace(xb)?;
        self.backward_batch(&trace, ub)
    }

    /// Gradients of `sum_i <upstream_i, forward(x_i)>` using a recorded trace.
    pub fn backward_batch(&self, trace: &ForwardTrace, upstream: ArrayView2<f64>) -> Result<Backprop> {
        let out = trace.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has shape {:?}, network output has {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        let mut layer_grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let y = &trace.outputs[i];
            let act = layer.activation;
            if act != Activation::Linear {
                ndarray::Zip::from(&mut delta)
                    .and(y)
                    .for_each(|d, &yv| *d *= act.derivative_at_output(yv));
            }
            let prev = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            let mut gw = delta.t().dot(prev);
            if !gw.is_standard_layout() {
                gw = gw.as_standard_layout().into_owned();
            }
            let gb = delta.sum_axis(Axis(0));
            let next_delta = delta.dot(&layer.weights);
            layer_grads.push(LayerGrad {
                weights: gw,
                bias: gb,
            });
            delta = next_delta;
        }
        layer_grads.reverse();
        Ok(Backprop {
            params: Gradients {
                layers: layer_grads,
            },
            input: delta,
        })
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    /// Parameter tensors in a fixed order: W0, b0, W1, b1, ...
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.weights.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weights.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &DenseNet) -> bool {
        self.sizes() == other.sizes()
    }

    fn check_congruent(&self, other: &DenseNet) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "network shapes differ: {:?} vs {:?}",
                self.sizes(),
                other.sizes()
            )));
        }
        Ok(())
    }

    /// `self <- tau * source + (1 - tau) * self`, elementwise.
    pub fn soft_update_from(&mut self, source: &DenseNet, tau: f64) -> Result<()> {
        self.check_congruent(source)?;
        for (t, s) in self.tensors_mut().zip(source.tensors()) {
            for (a, &b) in t.iter_mut().zip(s) {
                *a = tau * b + (1.0 - tau) * *a;
            }
        }
        Ok(())
    }

    /// Squared Euclidean distance between the parameter vectors.
    pub fn distance_sq(&self, other: &DenseNet) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .tensors()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
            .sum())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl Gradients {
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.weights.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weights.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.tensors().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    /// Index of the first layer holding a non-finite partial derivative.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| {
            !(l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
        })
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Vector-Jacobian product of softmax: given `p = softmax(x)` and `g = dL/dp`,
/// returns `dL/dx = p * (g - <p, g>)`.
pub fn softmax_vjp(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// SGD or bias-corrected Adam over a single network's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn apply(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.weights.dim() != l.weights.dim() || g.bias.dim() != l.bias.dim())
        {
            return Err(Error::Shape("gradient bundle does not match network".into()));
        }
        if let Some(layer) = grads.first_non_finite_layer() {
            return Err(Error::NonFinite {
                layer,
                what: "gradient".into(),
            });
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in net.tensors_mut().zip(grads.tensors()) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let n = net.num_params();
                if self.first_moment.len() != n {
                    self.first_moment = vec![0.0; n];
                    self.second_moment = vec![0.0; n];
                }
                let t = self.step as f64;
                let c1 = 1.0 - beta1.powf(t);
                let c2 = 1.0 - beta2.powf(t);
                let mut offset = 0;
                for (p, g) in net.tensors_mut().zip(grads.tensors()) {
                    let m = &mut self.first_moment[offset..offset + p.len()];
                    let v = &mut self.second_moment[offset..offset + p.len()];
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    offset += p.len();
                }
            }
        }
        Ok(())
    }
}

/// On-disk layout of a network: a layer-size header followed by the flat
/// parameter vector in `W0 (row-major, out x in), b0, W1, b1, ...` order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetFile {
    pub format: String,
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
    pub params: Vec<f64>,
}

pub const NET_FORMAT: &str = "derl-dense/1";

impl From<&DenseNet> for NetFile {
    fn from(net: &DenseNet) -> Self {
        NetFile {
            format: NET_FORMAT.to_string(),
            sizes: net.sizes(),
            activations: net.activations(),
            seed: net.seed,
            params: net.flat_params(),
        }
    }
}

impl TryFrom<NetFile> for DenseNet {
    type Error = Error;

    fn try_from(file: NetFile) -> Result<Self> {
        if file.format != NET_FORMAT {
            return Err(Error::Config(format!("unknown network format {:?}", file.format)));
        }
        let mut net = DenseNet::init_with_std(&file.sizes, &file.activations, file.seed, 0.0)?;
        net.set_flat_params(&file.params)?;
        if !net.all_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
        }
        Ok(net)
    }
}

impl Serialize for DenseNet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for DenseNet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = NetFile::deserialize(d)?;
        DenseNet::try_from(file).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn linear_net(w: Array2<f64>, b: Array1<f64>, act: Activation) -> DenseNet {
        DenseNet::from_layers(
            vec![Layer {
                weights: w,
                bias: b,
                activation: act,
            }],
            0,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = DenseNet::init(&[3, 2], &[Activation::Linear], 7).unwrap();
        let b = DenseNet::init(&[3, 2], &[Activation::Linear], 7).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert!(a.layers()[0].bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(DenseNet::init(&[3], &[], 1), Err(Error::Config(_))));
        assert!(matches!(
            DenseNet::init(&[3, 0, 1], &[Activation::Relu, Activation::Linear], 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn init_std_matches_target() {
        let net = DenseNet::init(&[1000, 1000], &[Activation::Linear], 11).unwrap();
        let w = &net.layers()[0].weights;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((std - 0.001).abs() / 0.001 < 0.01, "std {std}");
    }

    #[test]
    fn forward_examples() {
        let zero = linear_net(Array2::zeros((2, 3)), Array1::zeros(2), Activation::Linear);
        assert_eq!(zero.forward(&[1.0, -2.0, 5.0]).unwrap(), vec![0.0, 0.0]);

        let net = linear_net(array![[1.0, 2.0], [3.0, 4.0]], Array1::zeros(2), Activation::Linear);
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);

        let relu = linear_net(Array2::eye(2), Array1::zeros(2), Activation::Relu);
        assert_eq!(relu.forward(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let net = DenseNet::init(&[3, 2], &[Activation::Linear], 1).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_zero_upstream_and_bias_derivative() {
        let net = DenseNet::mlp(&[3, 4, 2], Activation::Tanh, Activation::Linear, 5).unwrap();
        let bp = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(bp.params.flat().iter().all(|&g| g == 0.0));
        assert!(bp.input.iter().all(|&g| g == 0.0));

        let lin = DenseNet::init(&[3, 2], &[Activation::Linear], 5).unwrap();
        let bp = lin.backward(&[0.4, -0.1, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(bp.params.layers[0].bias.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let net = DenseNet::init(&[3, 2], &[Activation::Linear], 1).unwrap();
        assert!(matches!(net.backward(&[1.0, 2.0, 3.0], &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn sgd_and_zero_gradient() {
        let mut net = linear_net(array![[1.0]], array![0.0], Activation::Linear);
        let mut g = net.zero_gradients();
        g.layers[0].weights[[0, 0]] = 2.0;
        Optimizer::sgd(0.1).apply(&mut net, &g).unwrap();
        assert!((net.layers()[0].weights[[0, 0]] - 0.8).abs() < 1e-15);

        let before = net.flat_params();
        let zero = net.zero_gradients();
        Optimizer::adam(0.01).apply(&mut net, &zero).unwrap();
        assert_eq!(before, net.flat_params());
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut net = linear_net(array![[1.0, -1.0]], array![0.5], Activation::Linear);
        let mut g = net.zero_gradients();
        g.layers[0].weights.fill(3.0);
        g.layers[0].bias.fill(-0.25);
        let before = net.flat_params();
        Optimizer::adam(0.01).apply(&mut net, &g).unwrap();
        for (b, a) in before.iter().zip(net.flat_params()) {
            // closed form at step 1: lr * g / (|g| + eps)
            assert!(((b - a).abs() - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut net = DenseNet::mlp(&[2, 3, 1], Activation::Relu, Activation::Linear, 1).unwrap();
        let mut g = net.zero_gradients();
        g.layers[1].bias[0] = f64::NAN;
        match Optimizer::sgd(0.1).apply(&mut net, &g) {
            Err(Error::NonFinite { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] >= 0.0 && s[1] < 1e-300);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn soft_update_endpoints() {
        let src = DenseNet::init(&[2, 2], &[Activation::Linear], 1).unwrap();
        let mut tgt = DenseNet::init(&[2, 2], &[Activation::Linear], 2).unwrap();
        let orig = tgt.clone();
        tgt.soft_update_from(&src, 0.0).unwrap();
        assert_eq!(tgt, orig);
        tgt.soft_update_from(&src, 1.0).unwrap();
        assert_eq!(tgt.flat_params(), src.flat_params());
    }

    #[test]
    fn netfile_round_trip() {
        let net = DenseNet::mlp(&[4, 3, 2], Activation::Relu, Activation::Linear, 9).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: DenseNet = serde_json::from_str(&json).unwrap();
        assert_eq!(net, back);
    }
}

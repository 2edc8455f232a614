//! A small convolutional network with exact forward and backward passes.
//!
//! The network is a plain sequence of layers (valid convolution, ReLU,
//! flatten, fully connected). Every forward pass keeps all intermediate
//! outputs in an [`ActivationTrace`], which is what the gradient at the probe
//! layer and the local linear surrogates are computed from.

mod io;
mod kernels;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamRng;
use crate::tensor::{Tensor, TensorError};

pub use train::{LossKind, LossSpec, TrainConfig, TrainLog};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),

    #[error("input shape {actual:?} does not match expected {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("attribute index {index} out of range for {count} attributes")]
    AttributeOutOfRange { index: usize, count: usize },

    #[error("activation trace does not belong to this network")]
    TraceMismatch,

    #[error("training data: {0}")]
    InvalidData(String),

    #[error("training loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. })
    }

    /// Output shape for `input`, or a description of why they don't compose.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                stride,
            } => {
                let [c, h, w] = <[usize; 3]>::try_from(input)
                    .map_err(|_| format!("conv expects a (C,H,W) input, got {input:?}"))?;
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err("conv kernel, stride and out_channels must be positive".into());
                }
                if c != in_channels {
                    return Err(format!("conv expects {in_channels} channels, got {c}"));
                }
                if h < kernel || w < kernel {
                    return Err(format!("conv kernel {kernel} larger than input {h}x{w}"));
                }
                Ok(vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::FullyConnected { inputs, outputs } => {
                if outputs == 0 {
                    return Err("fully connected layer needs at least one output".into());
                }
                if input != [inputs] {
                    return Err(format!(
                        "fully connected layer expects a flat input of {inputs}, got {input:?}"
                    ));
                }
                Ok(vec![outputs])
            }
        }
    }

    fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            LayerSpec::FullyConnected { inputs, outputs } => Some(vec![outputs, inputs]),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                kernel, in_channels, ..
            } => kernel * kernel * in_channels,
            LayerSpec::FullyConnected { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `(channels, height, width)` of the input image.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub attribute_count: usize,
    /// Index into `layers` of the conv layer whose output is probed.
    pub probe_layer: usize,
}

impl NetworkConfig {
    /// Conv3x3(8)-ReLU-Conv3x3(16)-ReLU-Flatten-FC(32)-ReLU-FC(n), probed at
    /// the first conv layer.
    pub fn standard(channels: usize, height: usize, width: usize, attribute_count: usize) -> Self {
        let flat = 16 * height.saturating_sub(4) * width.saturating_sub(4);
        Self {
            input_shape: vec![channels, height, width],
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    in_channels: channels,
                    out_channels: 8,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    kernel: 3,
                    in_channels: 8,
                    out_channels: 16,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::FullyConnected {
                    inputs: flat,
                    outputs: 32,
                },
                LayerSpec::Relu,
                LayerSpec::FullyConnected {
                    inputs: 32,
                    outputs: attribute_count,
                },
            ],
            attribute_count,
            probe_layer: 0,
        }
    }

    /// Checks that the layers compose and returns every layer's output shape.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>, NetError> {
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(NetError::InvalidConfig(format!(
                "input shape must be a positive (C,H,W), got {:?}",
                self.input_shape
            )));
        }
        if self.attribute_count == 0 {
            return Err(NetError::InvalidConfig("attribute_count must be positive".into()));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            current = layer
                .output_shape(&current)
                .map_err(|msg| NetError::InvalidConfig(format!("layer {k}: {msg}")))?;
            shapes.push(current.clone());
        }
        if current != [self.attribute_count] {
            return Err(NetError::InvalidConfig(format!(
                "final output {current:?} must be a vector of {} scores",
                self.attribute_count
            )));
        }
        match self.layers.get(self.probe_layer) {
            Some(l) if l.is_conv() => {}
            _ => {
                return Err(NetError::InvalidConfig(format!(
                    "probe layer {} is not a conv layer",
                    self.probe_layer
                )))
            }
        }
        Ok(shapes)
    }
}

/// Weights and biases of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<LayerParams>>,
}

/// All layer outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub input: Tensor,
    /// `outputs[k]` is the output of layer `k`; the last one holds the scores.
    pub outputs: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn scores(&self) -> &Tensor {
        self.outputs.last().expect("a validated network has at least one layer")
    }

    pub fn score(&self, attr: usize) -> f64 {
        self.scores().data()[attr]
    }

    fn layer_input(&self, k: usize) -> &Tensor {
        if k == 0 {
            &self.input
        } else {
            &self.outputs[k - 1]
        }
    }
}

/// Sign with the tie `0 -> +1`.
pub fn sign_of(score: f64) -> i8 {
    if score >= 0.0 {
        1
    } else {
        -1
    }
}

impl Network {
    /// A network with every weight and bias set to zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self, NetError> {
        let shapes = config.layer_shapes()?;
        let params = config
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, out)| {
                layer
                    .weight_shape()
                    .map(|ws| {
                        Ok::<_, TensorError>(LayerParams {
                            weight: Tensor::zeros(ws)?,
                            bias: Tensor::zeros(vec![out[0]])?,
                        })
                    })
                    .transpose()
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config,
            shapes,
            params,
        })
    }

    /// Weights drawn from `uniform(-s, s)` with `s = scale / sqrt(fan_in)`;
    /// biases start at zero.
    pub fn random(config: NetworkConfig, rng: &mut StreamRng, scale: f64) -> Result<Self, NetError> {
        let mut net = Self::zeros(config)?;
        for (layer, params) in net.config.layers.iter().zip(net.params.iter_mut()) {
            if let Some(p) = params {
                let bound = scale / (layer.fan_in() as f64).sqrt();
                let data = (0..p.weight.len())
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                p.weight = Tensor::new(p.weight.shape().to_vec(), data)?;
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn attribute_count(&self) -> usize {
        self.config.attribute_count
    }

    pub fn probe_layer(&self) -> usize {
        self.config.probe_layer
    }

    /// Output shape of layer `k`.
    pub fn layer_shape(&self, k: usize) -> &[usize] {
        &self.shapes[k]
    }

    pub fn probe_shape(&self) -> &[usize] {
        &self.shapes[self.config.probe_layer]
    }

    pub fn params(&self, k: usize) -> Option<&LayerParams> {
        self.params.get(k).and_then(Option::as_ref)
    }

    /// Replaces layer `k`'s parameters; shapes must match the existing ones.
    pub fn set_params(&mut self, k: usize, params: LayerParams) -> Result<(), NetError> {
        let slot = self
            .params
            .get_mut(k)
            .and_then(Option::as_mut)
            .ok_or_else(|| NetError::InvalidConfig(format!("layer {k} has no parameters")))?;
        if slot.weight.shape() != params.weight.shape() || slot.bias.shape() != params.bias.shape() {
            return Err(NetError::InvalidConfig(format!(
                "layer {k}: parameter shapes do not match"
            )));
        }
        *slot = params;
        Ok(())
    }

    /// Changes which conv layer is probed.
    pub fn with_probe_layer(mut self, probe_layer: usize) -> Result<Self, NetError> {
        let mut config = self.config.clone();
        config.probe_layer = probe_layer;
        config.layer_shapes()?;
        self.config = config;
        Ok(self)
    }

    fn apply_layer(&self, k: usize, input: &Tensor) -> Result<Tensor, NetError> {
        let out_shape = self.shapes[k].clone();
        let data = match (&self.config.layers[k], &self.params[k]) {
            (
                LayerSpec::Conv {
                    kernel,
                    stride,
                    out_channels,
                    ..
                },
                Some(p),
            ) => kernels::conv_forward(
                input.data(),
                input.shape(),
                p.weight.data(),
                p.bias.data(),
                *kernel,
                *stride,
                *out_channels,
            ),
            (LayerSpec::Relu, _) => input.data().iter().map(|&v| v.max(0.0)).collect(),
            (LayerSpec::Flatten, _) => input.data().to_vec(),
            (LayerSpec::FullyConnected { .. }, Some(p)) => {
                kernels::fc_forward(input.data(), p.weight.data(), p.bias.data())
            }
            _ => unreachable!("parameterized layers always carry parameters"),
        };
        Ok(Tensor::new(out_shape, data)?)
    }

    pub fn forward(&self, image: &Tensor) -> Result<ActivationTrace, NetError> {
        if image.shape() != self.config.input_shape.as_slice() {
            return Err(NetError::InputShape {
                expected: self.config.input_shape.clone(),
                actual: image.shape().to_vec(),
            });
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.config.layers.len());
        for k in 0..self.config.layers.len() {
            let next = self.apply_layer(k, outputs.last().unwrap_or(image))?;
            outputs.push(next);
        }
        Ok(ActivationTrace {
            input: image.clone(),
            outputs,
        })
    }

    /// Scores obtained by feeding `activation` in as the output of layer `k`.
    pub fn scores_from(&self, k: usize, activation: &Tensor) -> Result<Tensor, NetError> {
        if k >= self.shapes.len() || activation.shape() != self.shapes[k].as_slice() {
            return Err(NetError::InputShape {
                expected: self.shapes.get(k).cloned().unwrap_or_default(),
                actual: activation.shape().to_vec(),
            });
        }
        let mut current = activation.clone();
        for layer in k + 1..self.config.layers.len() {
            current = self.apply_layer(layer, &current)?;
        }
        Ok(current)
    }

    fn check_trace(&self, trace: &ActivationTrace) -> Result<(), NetError> {
        let ok = trace.input.shape() == self.config.input_shape.as_slice()
            && trace.outputs.len() == self.shapes.len()
            && trace
                .outputs
                .iter()
                .zip(&self.shapes)
                .all(|(t, s)| t.shape() == s.as_slice());
        if ok {
            Ok(())
        } else {
            Err(NetError::TraceMismatch)
        }
    }

    fn check_attr(&self, attr: usize) -> Result<(), NetError> {
        if attr >= self.config.attribute_count {
            return Err(NetError::AttributeOutOfRange {
                index: attr,
                count: self.config.attribute_count,
            });
        }
        Ok(())
    }

    /// Gradient of the input to layer `k` given the gradient of its output.
    fn layer_backward_input(&self, k: usize, trace: &ActivationTrace, grad_out: &[f64]) -> Vec<f64> {
        let input = trace.layer_input(k);
        match (&self.config.layers[k], &self.params[k]) {
            (
                LayerSpec::Conv {
                    kernel,
                    stride,
                    out_channels,
                    ..
                },
                Some(p),
            ) => kernels::conv_backward_input(
                grad_out,
                input.shape(),
                p.weight.data(),
                *kernel,
                *stride,
                *out_channels,
            ),
            // Gate on the sign the stored forward pass saw.
            (LayerSpec::Relu, _) => input
                .data()
                .iter()
                .zip(grad_out)
                .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
                .collect(),
            (LayerSpec::Flatten, _) => grad_out.to_vec(),
            (LayerSpec::FullyConnected { .. }, Some(p)) => {
                kernels::fc_backward_input(grad_out, p.weight.data(), input.len())
            }
            _ => unreachable!("parameterized layers always carry parameters"),
        }
    }

    /// Gradient of `dot(seed, scores)` with respect to the output of layer `k`.
    pub fn grad_at_layer(
        &self,
        trace: &ActivationTrace,
        k: usize,
        seed: &[f64],
    ) -> Result<Tensor, NetError> {
        self.check_trace(trace)?;
        if k >= self.shapes.len() || seed.len() != self.config.attribute_count {
            return Err(NetError::TraceMismatch);
        }
        let mut grad = seed.to_vec();
        for layer in (k + 1..self.config.layers.len()).rev() {
            grad = self.layer_backward_input(layer, trace, &grad);
        }
        Ok(Tensor::new(self.shapes[k].clone(), grad)?)
    }

    /// `d Y_attr / d x` at the probe layer, evaluated at the traced image.
    pub fn grad_at_probe(&self, trace: &ActivationTrace, attr: usize) -> Result<Tensor, NetError> {
        self.check_attr(attr)?;
        let mut seed = vec![0.0; self.config.attribute_count];
        seed[attr] = 1.0;
        self.grad_at_layer(trace, self.config.probe_layer, &seed)
    }

    /// Parameter gradients of `dot(seed, scores)`, one entry per layer.
    pub(crate) fn param_grads(
        &self,
        trace: &ActivationTrace,
        seed: &[f64],
    ) -> Vec<Option<(Vec<f64>, Vec<f64>)>> {
        let mut grads: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; self.config.layers.len()];
        let mut grad = seed.to_vec();
        for k in (0..self.config.layers.len()).rev() {
            let input = trace.layer_input(k);
            match (&self.config.layers[k], &self.params[k]) {
                (
                    LayerSpec::Conv {
                        kernel,
                        stride,
                        out_channels,
                        ..
                    },
                    Some(_),
                ) => {
                    grads[k] = Some(kernels::conv_backward_params(
                        &grad,
                        input.data(),
                        input.shape(),
                        *kernel,
                        *stride,
                        *out_channels,
                    ));
                }
                (LayerSpec::FullyConnected { .. }, Some(_)) => {
                    grads[k] = Some(kernels::fc_backward_params(&grad, input.data()));
                }
                _ => {}
            }
            if k > 0 {
                grad = self.layer_backward_input(k, trace, &grad);
            }
        }
        grads
    }

    pub fn predict_sign(&self, image: &Tensor, attr: usize) -> Result<i8, NetError> {
        self.check_attr(attr)?;
        Ok(sign_of(self.forward(image)?.score(attr)))
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.params.iter_mut().flatten()
    }

    pub(crate) fn layer_has_params(&self, k: usize) -> bool {
        self.config.layers[k].has_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            input_shape: vec![1, 5, 5],
            layers: vec![
                LayerSpec::Conv {
                    kernel: 2,
                    in_channels: 1,
                    out_channels: 2,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    kernel: 2,
                    in_channels: 2,
                    out_channels: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::FullyConnected {
                    inputs: 12,
                    outputs: 4,
                },
                LayerSpec::Relu,
                LayerSpec::FullyConnected {
                    inputs: 4,
                    outputs: 2,
                },
            ],
            attribute_count: 2,
            probe_layer: 0,
        }
    }

    fn image(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "image");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn standard_config_composes() {
        let cfg = NetworkConfig::standard(1, 16, 16, 3);
        let shapes = cfg.layer_shapes().unwrap();
        assert_eq!(shapes[0], vec![8, 14, 14]);
        assert_eq!(shapes[2], vec![16, 12, 12]);
        assert_eq!(shapes.last().unwrap(), &vec![3]);
    }

    #[test]
    fn config_validation_errors() {
        let mut cfg = tiny_config();
        cfg.probe_layer = 1;
        assert!(matches!(cfg.layer_shapes(), Err(NetError::InvalidConfig(_))));

        let mut cfg = tiny_config();
        cfg.attribute_count = 3;
        assert!(cfg.layer_shapes().is_err());

        let mut cfg = tiny_config();
        cfg.layers.remove(4);
        assert!(cfg.layer_shapes().is_err());

        let mut cfg = tiny_config();
        cfg.input_shape = vec![2, 5, 5];
        assert!(cfg.layer_shapes().is_err());
    }

    #[test]
    fn zero_weights_give_bias_scores() {
        let mut net = Network::zeros(tiny_config()).unwrap();
        let bias = Tensor::vector(vec![0.25, -1.5]).unwrap();
        net.set_params(
            7,
            LayerParams {
                weight: Tensor::zeros(vec![2, 4]).unwrap(),
                bias: bias.clone(),
            },
        )
        .unwrap();
        let trace = net.forward(&image(&[1, 5, 5], 3)).unwrap();
        assert_eq!(trace.scores(), &bias);
    }

    #[test]
    fn identity_conv_and_relu_pass_nonnegative_input_through() {
        let cfg = NetworkConfig {
            input_shape: vec![1, 3, 3],
            layers: vec![
                LayerSpec::Conv {
                    kernel: 1,
                    in_channels: 1,
                    out_channels: 1,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::FullyConnected {
                    inputs: 9,
                    outputs: 1,
                },
            ],
            attribute_count: 1,
            probe_layer: 0,
        };
        let mut net = Network::zeros(cfg).unwrap();
        net.set_params(
            0,
            LayerParams {
                weight: Tensor::filled(vec![1, 1, 1, 1], 1.0).unwrap(),
                bias: Tensor::zeros(vec![1]).unwrap(),
            },
        )
        .unwrap();
        let img = image(&[1, 3, 3], 5).map(f64::abs).unwrap();
        let trace = net.forward(&img).unwrap();
        assert_eq!(trace.outputs[1].data(), img.data());
    }

    #[test]
    fn forward_is_deterministic_and_shape_checked() {
        let net = Network::random(tiny_config(), &mut rng::stream(1, rng::INIT), 1.0).unwrap();
        let img = image(&[1, 5, 5], 2);
        assert_eq!(net.forward(&img).unwrap(), net.forward(&img).unwrap());
        let bad = image(&[1, 4, 5], 2);
        assert!(matches!(net.forward(&bad), Err(NetError::InputShape { .. })));
    }

    #[test]
    fn predict_sign_ties_go_positive() {
        assert_eq!(sign_of(3.2), 1);
        assert_eq!(sign_of(-0.1), -1);
        assert_eq!(sign_of(0.0), 1);
        let net = Network::zeros(tiny_config()).unwrap();
        assert_eq!(net.predict_sign(&image(&[1, 5, 5], 1), 1).unwrap(), 1);
        assert!(net.predict_sign(&image(&[1, 5, 5], 1), 2).is_err());
    }

    #[test]
    fn linear_tail_gives_image_independent_gradient() {
        // conv probe -> flatten -> fc: nu is the fc weight row regardless of image.
        let cfg = NetworkConfig {
            input_shape: vec![1, 3, 3],
            layers: vec![
                LayerSpec::Conv {
                    kernel: 2,
                    in_channels: 1,
                    out_channels: 1,
                    stride: 1,
                },
                LayerSpec::Flatten,
                LayerSpec::FullyConnected {
                    inputs: 4,
                    outputs: 2,
                },
            ],
            attribute_count: 2,
            probe_layer: 0,
        };
        let net = Network::random(cfg, &mut rng::stream(9, rng::INIT), 1.0).unwrap();
        let row: Vec<f64> = net.params(2).unwrap().weight.data()[4..8].to_vec();
        for seed in 0..3 {
            let trace = net.forward(&image(&[1, 3, 3], seed)).unwrap();
            assert_eq!(net.grad_at_probe(&trace, 1).unwrap().data(), row.as_slice());
        }
    }

    #[test]
    fn dead_relus_block_the_gradient() {
        let cfg = NetworkConfig {
            input_shape: vec![1, 2, 2],
            layers: vec![
                LayerSpec::Conv {
                    kernel: 1,
                    in_channels: 1,
                    out_channels: 1,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::FullyConnected {
                    inputs: 4,
                    outputs: 1,
                },
            ],
            attribute_count: 1,
            probe_layer: 0,
        };
        let mut net = Network::zeros(cfg).unwrap();
        net.set_params(
            0,
            LayerParams {
                weight: Tensor::filled(vec![1, 1, 1, 1], 1.0).unwrap(),
                bias: Tensor::zeros(vec![1]).unwrap(),
            },
        )
        .unwrap();
        net.set_params(
            3,
            LayerParams {
                weight: Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                bias: Tensor::zeros(vec![1]).unwrap(),
            },
        )
        .unwrap();
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 2.0, -0.5]).unwrap();
        let trace = net.forward(&img).unwrap();
        let nu = net.grad_at_probe(&trace, 0).unwrap();
        assert_eq!(nu.data(), &[1.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn grad_rejects_foreign_trace() {
        let net = Network::random(tiny_config(), &mut rng::stream(1, rng::INIT), 1.0).unwrap();
        let other = Network::zeros(NetworkConfig::standard(1, 8, 8, 2)).unwrap();
        let trace = other.forward(&image(&[1, 8, 8], 1)).unwrap();
        assert!(matches!(net.grad_at_probe(&trace, 0), Err(NetError::TraceMismatch)));
    }

    /// Central differences against every parameter and probe coordinate of
    /// the tiny net; covers each layer kind's backward pass.
    #[test]
    fn backward_matches_finite_differences_for_every_layer_kind() {
        let eps = 1e-5;
        let close = |a: f64, n: f64| (a - n).abs() <= (1e-4 * a.abs().max(n.abs())).max(1e-7);
        for seed in 0..5 {
            let net = Network::random(tiny_config(), &mut rng::stream(seed, rng::INIT), 2.0).unwrap();
            let img = image(&[1, 5, 5], seed + 100);
            let trace = net.forward(&img).unwrap();
            let weights = [0.7, -1.3];
            let objective = |n: &Network| {
                let s = n.forward(&img).unwrap();
                weights[0] * s.score(0) + weights[1] * s.score(1)
            };
            let grads = net.param_grads(&trace, &weights);
            for (k, layer_grads) in grads.iter().enumerate() {
                let Some((gw, gb)) = layer_grads else { continue };
                let p = net.params(k).unwrap().clone();
                for (which, analytic) in [(0, gw), (1, gb)] {
                    for idx in 0..analytic.len() {
                        let perturbed = |delta: f64| {
                            let mut n = net.clone();
                            let mut q = p.clone();
                            let t = if which == 0 { &mut q.weight } else { &mut q.bias };
                            let mut d = t.data().to_vec();
                            d[idx] += delta;
                            *t = Tensor::new(t.shape().to_vec(), d).unwrap();
                            n.set_params(k, q).unwrap();
                            objective(&n)
                        };
                        let numeric = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
                        assert!(
                            close(analytic[idx], numeric),
                            "layer {k} param {which}/{idx}: {} vs {numeric}",
                            analytic[idx]
                        );
                    }
                }
            }
        }
    }
}

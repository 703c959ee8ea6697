//! Config-driven networks and their optimizer.
//!
//! A [`ModelBundle`] holds the four nets of the lab: the client model `f`,
//! the attacker's encoder and decoder, and the discriminator. Parameters are
//! plain f64 buffers; each forward pass watches them onto the caller's tape
//! (define-by-run), so the same network can train on any actor's tape.

use crate::tensor::{Activation, Gradients, Tape, Tensor, TensorError};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {index} ({kind}): input shape {got:?} does not compose, expected {expected}")]
    ShapeCompose {
        index: usize,
        kind: String,
        got: Vec<usize>,
        expected: String,
    },
    #[error("feature-space mismatch: {0}")]
    FeatureSpaceMismatch(String),
    #[error("adam: {what} length {got} does not match parameter length {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One layer of a sequential network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Transposed convolution; kernel layout [in_channels, out_channels, k, k].
    Tconv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Activation {
        name: Activation,
    },
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Tconv { .. } => "tconv",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    /// Per-example output shape for a per-example input shape, or a
    /// composition error.
    fn out_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>, ModelError> {
        let fail = |expected: String| {
            Err(ModelError::ShapeCompose {
                index,
                kind: self.kind().to_string(),
                got: input.to_vec(),
                expected,
            })
        };
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return fail(format!("[{inputs}]"));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return fail(format!("[{in_channels}, H, W]"));
                }
                let (h, w) = (input[1], input[2]);
                if *kernel > h + 2 * padding || *kernel > w + 2 * padding {
                    return fail(format!("spatial size ≥ {kernel} after padding {padding}"));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![*out_channels, oh, ow])
            }
            LayerSpec::Tconv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return fail(format!("[{in_channels}, H, W]"));
                }
                let (h, w) = (input[1], input[2]);
                let oh = (h - 1) * stride + kernel;
                let ow = (w - 1) * stride + kernel;
                if oh < 2 * padding + 1 || ow < 2 * padding + 1 {
                    return fail("output larger than twice the padding".into());
                }
                Ok(vec![*out_channels, oh - 2 * padding, ow - 2 * padding])
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                let need: usize = shape.iter().product();
                let have: usize = input.iter().product();
                if need != have {
                    return fail(format!("{have} elements, reshape wants {need}"));
                }
                Ok(shape.clone())
            }
        }
    }
}

/// A parameter buffer with its shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Sequential network: layer specs plus their parameter buffers, with the
/// validated per-example input/output shapes.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

/// Result of a traced forward pass: the output plus the watched parameter
/// leaves, aligned with [`Network::params`].
pub struct TracedForward {
    pub output: Tensor,
    pub param_leaves: Vec<Tensor>,
}

impl Network {
    /// Validate layer composition and initialize parameters (He-style
    /// fan-in uniform, deterministic in `rng`).
    pub fn build(
        layers: Vec<LayerSpec>,
        input_shape: &[usize],
        rng: &mut ChaCha20Rng,
    ) -> Result<Network, ModelError> {
        let mut shape = input_shape.to_vec();
        let mut params = Vec::new();
        for (index, layer) in layers.iter().enumerate() {
            let out = layer.out_shape(index, &shape)?;
            match layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let bound = (6.0 / *inputs as f64).sqrt();
                    params.push(Param {
                        data: (0..inputs * outputs)
                            .map(|_| rng.gen_range(-bound..bound))
                            .collect(),
                        shape: vec![*inputs, *outputs],
                    });
                    params.push(Param {
                        data: vec![0.0; *outputs],
                        shape: vec![*outputs],
                    });
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    params.push(Param {
                        data: (0..out_channels * in_channels * kernel * kernel)
                            .map(|_| rng.gen_range(-bound..bound))
                            .collect(),
                        shape: vec![*out_channels, *in_channels, *kernel, *kernel],
                    });
                    params.push(Param {
                        data: vec![0.0; *out_channels],
                        shape: vec![*out_channels],
                    });
                }
                LayerSpec::Tconv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    params.push(Param {
                        data: (0..in_channels * out_channels * kernel * kernel)
                            .map(|_| rng.gen_range(-bound..bound))
                            .collect(),
                        shape: vec![*in_channels, *out_channels, *kernel, *kernel],
                    });
                    params.push(Param {
                        data: vec![0.0; *out_channels],
                        shape: vec![*out_channels],
                    });
                }
                _ => {}
            }
            shape = out;
        }
        Ok(Network {
            layers,
            params,
            input_shape: input_shape.to_vec(),
            output_shape: shape,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize, ModelError> {
        let shape = batch.shape();
        if shape.len() < 2 || shape[1..] != *self.input_shape.as_slice() {
            return Err(ModelError::ShapeCompose {
                index: 0,
                kind: "input".into(),
                got: shape.to_vec(),
                expected: format!("[B, {:?}]", self.input_shape),
            });
        }
        Ok(shape[0])
    }

    /// Forward pass with parameters watched on `tape` (pass `None` for pure
    /// inference).
    pub fn forward(
        &self,
        batch: &Tensor,
        tape: Option<&Tape>,
    ) -> Result<TracedForward, ModelError> {
        let b = self.check_batch(batch)?;
        let mut leaves = Vec::with_capacity(self.params.len());
        let mut watch = |p: &Param| -> Tensor {
            let t = Tensor::new(p.data.clone(), &p.shape).expect("param tensor");
            let t = match tape {
                Some(tape) => tape.watch(&t),
                None => t,
            };
            leaves.push(t.clone());
            t
        };

        let mut x = batch.clone();
        let mut pi = 0;
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense { inputs, .. } => {
                    let w = watch(&self.params[pi]);
                    let bias = watch(&self.params[pi + 1]);
                    pi += 2;
                    let x2 = x.reshape(&[b, *inputs])?;
                    x = x2.matmul(&w)?.add_bias(&bias)?;
                }
                LayerSpec::Conv { stride, padding, .. } => {
                    let k = watch(&self.params[pi]);
                    let bias = watch(&self.params[pi + 1]);
                    pi += 2;
                    x = x.conv2d(&k, *stride, *padding)?.add_channel_bias(&bias)?;
                }
                LayerSpec::Tconv { stride, padding, .. } => {
                    let k = watch(&self.params[pi]);
                    let bias = watch(&self.params[pi + 1]);
                    pi += 2;
                    x = x.tconv2d(&k, *stride, *padding)?.add_channel_bias(&bias)?;
                }
                LayerSpec::Activation { name } => {
                    x = name.apply(&x)?;
                }
                LayerSpec::Flatten => {
                    let n: usize = x.shape()[1..].iter().product();
                    x = x.reshape(&[b, n])?;
                }
                LayerSpec::Reshape { shape } => {
                    let mut full = vec![b];
                    full.extend_from_slice(shape);
                    x = x.reshape(&full)?;
                }
            }
        }
        Ok(TracedForward {
            output: x,
            param_leaves: leaves,
        })
    }

    /// Collect flattened gradients for every parameter after a backward pass.
    pub fn grads_from(&self, traced: &TracedForward, grads: &Gradients) -> Vec<Vec<f64>> {
        traced
            .param_leaves
            .iter()
            .map(|leaf| grads.wrt(leaf).data().to_vec())
            .collect()
    }

    /// Concatenated copy of all parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(&p.data);
        }
        out
    }
}

/// Adam state for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(net: &Network) -> AdamState {
        AdamState {
            m: net.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: net.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            step: 0,
        }
    }
}

/// Adam hyperparameters; lab default is lr 1e-4.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> AdamParams {
        AdamParams {
            lr,
            ..AdamParams::default()
        }
    }
}

/// One Adam update over a network's parameters. `grads` is aligned with
/// `net.params()`; the state timestep advances even for all-zero gradients.
pub fn adam_step(
    net: &mut Network,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<(), ModelError> {
    if grads.len() != net.params.len() {
        return Err(ModelError::LengthMismatch {
            what: "gradient list",
            got: grads.len(),
            expected: net.params.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in net.params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.data.len() {
            return Err(ModelError::LengthMismatch {
                what: "gradient",
                got: g.len(),
                expected: p.data.len(),
            });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p.data[j] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Which architecture family to instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Mlp,
    Conv,
}

/// Model configuration: a preset sized for the dataset, or explicit layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset {
        preset: ModelPreset,
        /// Dimension of the shared feature space (MLP) or channel count of
        /// the final client conv (conv preset).
        #[serde(default = "default_feature_dim")]
        feature_dim: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
    Custom {
        f: Vec<LayerSpec>,
        f_tilde: Vec<LayerSpec>,
        f_inv: Vec<LayerSpec>,
        discriminator: Vec<LayerSpec>,
    },
}

fn default_feature_dim() -> usize {
    32
}

fn default_hidden() -> usize {
    128
}

impl ModelSpec {
    pub fn mlp(feature_dim: usize, hidden: usize) -> ModelSpec {
        ModelSpec::Preset {
            preset: ModelPreset::Mlp,
            feature_dim,
            hidden,
        }
    }

    fn layer_lists(
        &self,
        image: &[usize],
    ) -> (
        Vec<LayerSpec>,
        Vec<LayerSpec>,
        Vec<LayerSpec>,
        Vec<LayerSpec>,
    ) {
        match self {
            ModelSpec::Custom {
                f,
                f_tilde,
                f_inv,
                discriminator,
            } => (
                f.clone(),
                f_tilde.clone(),
                f_inv.clone(),
                discriminator.clone(),
            ),
            ModelSpec::Preset {
                preset: ModelPreset::Mlp,
                feature_dim,
                hidden,
            } => {
                let d: usize = image.iter().product();
                let (fd, hd) = (*feature_dim, *hidden);
                let relu = LayerSpec::Activation {
                    name: Activation::Relu,
                };
                let lrelu = LayerSpec::Activation {
                    name: Activation::LeakyRelu(0.2),
                };
                let encoder = vec![
                    LayerSpec::Flatten,
                    LayerSpec::Dense { inputs: d, outputs: hd },
                    relu.clone(),
                    LayerSpec::Dense { inputs: hd, outputs: fd },
                ];
                let decoder = vec![
                    LayerSpec::Dense { inputs: fd, outputs: hd },
                    relu,
                    LayerSpec::Dense { inputs: hd, outputs: d },
                    LayerSpec::Activation {
                        name: Activation::Sigmoid,
                    },
                    LayerSpec::Reshape {
                        shape: image.to_vec(),
                    },
                ];
                let disc = vec![
                    LayerSpec::Dense { inputs: fd, outputs: hd },
                    lrelu.clone(),
                    LayerSpec::Dense {
                        inputs: hd,
                        outputs: hd / 2,
                    },
                    lrelu,
                    LayerSpec::Dense {
                        inputs: hd / 2,
                        outputs: 1,
                    },
                ];
                (encoder.clone(), encoder, decoder, disc)
            }
            ModelSpec::Preset {
                preset: ModelPreset::Conv,
                feature_dim,
                hidden,
            } => {
                let (c, h, w) = (image[0], image[1], image[2]);
                let fc = *feature_dim;
                let mid = (fc / 2).max(1);
                let relu = LayerSpec::Activation {
                    name: Activation::Relu,
                };
                let lrelu = LayerSpec::Activation {
                    name: Activation::LeakyRelu(0.2),
                };
                let (fh, fw) = (h.div_ceil(4), w.div_ceil(4));
                let encoder = vec![
                    LayerSpec::Conv {
                        in_channels: c,
                        out_channels: mid,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    },
                    relu.clone(),
                    LayerSpec::Conv {
                        in_channels: mid,
                        out_channels: fc,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    },
                ];
                let decoder = vec![
                    LayerSpec::Tconv {
                        in_channels: fc,
                        out_channels: mid,
                        kernel: 4,
                        stride: 2,
                        padding: 1,
                    },
                    relu,
                    LayerSpec::Tconv {
                        in_channels: mid,
                        out_channels: c,
                        kernel: 4,
                        stride: 2,
                        padding: 1,
                    },
                    LayerSpec::Activation {
                        name: Activation::Sigmoid,
                    },
                ];
                let disc = vec![
                    LayerSpec::Conv {
                        in_channels: fc,
                        out_channels: fc,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    },
                    lrelu.clone(),
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        inputs: fc * fh.div_ceil(2) * fw.div_ceil(2),
                        outputs: *hidden,
                    },
                    lrelu,
                    LayerSpec::Dense {
                        inputs: *hidden,
                        outputs: 1,
                    },
                ];
                (encoder.clone(), encoder, decoder, disc)
            }
        }
    }
}

/// The four networks of the split-learning lab: client `f`, attacker encoder
/// `f_tilde`, attacker decoder `f_inv`, discriminator `d`.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub f: Network,
    pub f_tilde: Network,
    pub f_inv: Network,
    pub d: Network,
    pub feature_shape: Vec<usize>,
}

/// Build and cross-validate the four networks. Deterministic for a fixed
/// (spec, seed): each net draws from its own ChaCha stream.
pub fn build_bundle(
    spec: &ModelSpec,
    image: &[usize],
    seed: u64,
) -> Result<ModelBundle, ModelError> {
    let (f_l, ft_l, fi_l, d_l) = spec.layer_lists(image);
    let mut streams =
        (0..4u64).map(|i| ChaCha20Rng::seed_from_u64(seed.wrapping_add(0x9e3779b9u64 * (i + 1))));
    let f = Network::build(f_l, image, &mut streams.next().unwrap())?;
    let feature_shape = f.output_shape().to_vec();
    let f_tilde = Network::build(ft_l, image, &mut streams.next().unwrap())?;
    if f_tilde.output_shape() != feature_shape.as_slice() {
        return Err(ModelError::FeatureSpaceMismatch(format!(
            "f outputs {:?} but f_tilde outputs {:?}",
            feature_shape,
            f_tilde.output_shape()
        )));
    }
    let f_inv = Network::build(fi_l, &feature_shape, &mut streams.next().unwrap())?;
    let d = Network::build(d_l, &feature_shape, &mut streams.next().unwrap())?;
    if d.output_shape() != [1] {
        return Err(ModelError::FeatureSpaceMismatch(format!(
            "discriminator must emit one logit per example, got {:?}",
            d.output_shape()
        )));
    }
    Ok(ModelBundle {
        f,
        f_tilde,
        f_inv,
        d,
        feature_shape,
    })
}

/// Argmax classification accuracy of `client` + `head` on a labeled set.
pub fn classifier_accuracy(
    client: &Network,
    head: &Network,
    images: &Tensor,
    labels: &[u8],
    batch: usize,
) -> Result<f64, ModelError> {
    let n = images.shape()[0];
    let per: usize = images.shape()[1..].iter().product();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let mut shape = vec![end - start];
        shape.extend_from_slice(&images.shape()[1..]);
        let slice = Tensor::new(images.data()[start * per..end * per].to_vec(), &shape)?;
        let feats = client.forward(&slice, None)?.output;
        let logits = head.forward(&feats, None)?.output;
        let k = logits.shape()[1];
        for i in 0..(end - start) {
            let row = &logits.data()[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            if pred == labels[start + i] as usize {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_spec() -> ModelSpec {
        ModelSpec::mlp(16, 32)
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = build_bundle(&mlp_spec(), &[1, 8, 8], 42).unwrap();
        let b = build_bundle(&mlp_spec(), &[1, 8, 8], 42).unwrap();
        let (fa, fb) = (a.f.flat_params(), b.f.flat_params());
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = build_bundle(&mlp_spec(), &[1, 8, 8], 43).unwrap();
        assert_ne!(a.f.flat_params(), c.f.flat_params());
    }

    #[test]
    fn nets_differ_across_the_bundle() {
        let b = build_bundle(&mlp_spec(), &[1, 8, 8], 42).unwrap();
        assert_ne!(b.f.flat_params(), b.f_tilde.flat_params());
    }

    #[test]
    fn feature_space_mismatch_detected() {
        let spec = ModelSpec::Custom {
            f: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 64, outputs: 64 },
            ],
            f_tilde: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 64, outputs: 32 },
            ],
            f_inv: vec![LayerSpec::Dense { inputs: 64, outputs: 64 }],
            discriminator: vec![LayerSpec::Dense { inputs: 64, outputs: 1 }],
        };
        let err = build_bundle(&spec, &[1, 8, 8], 1).unwrap_err();
        assert!(matches!(err, ModelError::FeatureSpaceMismatch(_)), "{err}");
    }

    #[test]
    fn bad_layer_composition_pinpoints_layer() {
        let spec = ModelSpec::Custom {
            f: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 10, outputs: 4 }, // input is really 64
            ],
            f_tilde: vec![],
            f_inv: vec![],
            discriminator: vec![],
        };
        let err = build_bundle(&spec, &[1, 8, 8], 1).unwrap_err();
        match err {
            ModelError::ShapeCompose { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn mlp_parameter_count_matches_closed_form() {
        // 28×28 MLP client: Σ (in·out + out) over dense layers.
        let bundle = build_bundle(&ModelSpec::mlp(64, 256), &[1, 28, 28], 7).unwrap();
        let expected = 784 * 256 + 256 + 256 * 64 + 64;
        assert_eq!(bundle.f.param_count(), expected);
    }

    #[test]
    fn zero_weight_dense_net_maps_to_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut net = Network::build(
            vec![LayerSpec::Dense { inputs: 4, outputs: 3 }],
            &[4],
            &mut rng,
        )
        .unwrap();
        for p in net.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::new(vec![1.0, -2.0, 3.0, 4.0], &[1, 4]).unwrap();
        let out = net.forward(&x, None).unwrap().output;
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut net = Network::build(
            vec![LayerSpec::Dense { inputs: 3, outputs: 3 }],
            &[3],
            &mut rng,
        )
        .unwrap();
        net.params_mut()[0].data = vec![
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ];
        net.params_mut()[1].data = vec![0.0; 3];
        let x = Tensor::new(vec![0.5, -1.5, 2.0], &[1, 3]).unwrap();
        let out = net.forward(&x, None).unwrap().output;
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn forward_matches_hand_rolled_matrix_math() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let net = Network::build(
            vec![
                LayerSpec::Dense { inputs: 3, outputs: 2 },
                LayerSpec::Activation {
                    name: Activation::Tanh,
                },
                LayerSpec::Dense { inputs: 2, outputs: 2 },
            ],
            &[3],
            &mut rng,
        )
        .unwrap();
        let x = vec![0.2, -0.7, 1.1];
        let out = net
            .forward(&Tensor::new(x.clone(), &[1, 3]).unwrap(), None)
            .unwrap()
            .output;

        // Independent evaluation with plain loops.
        let w1 = &net.params()[0];
        let b1 = &net.params()[1];
        let w2 = &net.params()[2];
        let b2 = &net.params()[3];
        let mut h = vec![0.0f64; 2];
        for j in 0..2 {
            for (i, xi) in x.iter().enumerate() {
                h[j] += xi * w1.data[i * 2 + j];
            }
            h[j] = (h[j] + b1.data[j]).tanh();
        }
        let mut y = vec![0.0f64; 2];
        for j in 0..2 {
            for (i, hi) in h.iter().enumerate() {
                y[j] += hi * w2.data[i * 2 + j];
            }
            y[j] += b2.data[j];
        }
        for j in 0..2 {
            assert!((out.data()[j] - y[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_input_shape_mismatch() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let net = Network::build(
            vec![LayerSpec::Dense { inputs: 4, outputs: 2 }],
            &[4],
            &mut rng,
        )
        .unwrap();
        let x = Tensor::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert!(net.forward(&x, None).is_err());
    }

    #[test]
    fn adam_zero_grad_keeps_params_and_advances_step() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut net = Network::build(
            vec![LayerSpec::Dense { inputs: 2, outputs: 2 }],
            &[2],
            &mut rng,
        )
        .unwrap();
        let before = net.flat_params();
        let mut state = AdamState::new(&net);
        let zeros: Vec<Vec<f64>> = net
            .params()
            .iter()
            .map(|p| vec![0.0; p.data.len()])
            .collect();
        adam_step(&mut net, &zeros, &mut state, &AdamParams::default()).unwrap();
        assert_eq!(net.flat_params(), before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        // Scalar parameter, grad 0.5, lr 1e-3: bias-corrected first step
        // moves the parameter down by ≈ lr·sign(g).
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut net = Network::build(
            vec![LayerSpec::Dense { inputs: 1, outputs: 1 }],
            &[1],
            &mut rng,
        )
        .unwrap();
        net.params_mut()[0].data = vec![0.25];
        let mut state = AdamState::new(&net);
        let grads = vec![vec![0.5], vec![0.0]];
        adam_step(&mut net, &grads, &mut state, &AdamParams::with_lr(1e-3)).unwrap();
        let moved = 0.25 - net.params()[0].data[0];
        assert!((moved - 1e-3).abs() < 1e-8, "moved {moved}");
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let net0 = Network::build(
            vec![LayerSpec::Dense { inputs: 3, outputs: 3 }],
            &[3],
            &mut rng,
        )
        .unwrap();
        let grads = vec![vec![0.1; 9], vec![-0.2; 3]];
        let run = || {
            let mut net = net0.clone();
            let mut st = AdamState::new(&net);
            adam_step(&mut net, &grads, &mut st, &AdamParams::default()).unwrap();
            adam_step(&mut net, &grads, &mut st, &AdamParams::default()).unwrap();
            net.flat_params()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn adam_length_mismatch_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut net = Network::build(
            vec![LayerSpec::Dense { inputs: 2, outputs: 2 }],
            &[2],
            &mut rng,
        )
        .unwrap();
        let mut state = AdamState::new(&net);
        let bad = vec![vec![0.0; 4]];
        assert!(matches!(
            adam_step(&mut net, &bad, &mut state, &AdamParams::default()),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn conv_preset_composes_on_28x28() {
        let bundle = build_bundle(
            &ModelSpec::Preset {
                preset: ModelPreset::Conv,
                feature_dim: 16,
                hidden: 64,
            },
            &[1, 28, 28],
            3,
        )
        .unwrap();
        assert_eq!(bundle.feature_shape, vec![16, 7, 7]);
        assert_eq!(bundle.f_inv.output_shape(), &[1, 28, 28]);
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        let z = bundle.f.forward(&x, None).unwrap().output;
        assert_eq!(z.shape(), &[2, 16, 7, 7]);
        let rec = bundle.f_inv.forward(&z, None).unwrap().output;
        assert_eq!(rec.shape(), &[2, 1, 28, 28]);
        let logit = bundle.d.forward(&z, None).unwrap().output;
        assert_eq!(logit.shape(), &[2, 1]);
    }

    #[test]
    fn traced_forward_feeds_gradients_for_every_param() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let net = Network::build(
            vec![
                LayerSpec::Dense { inputs: 4, outputs: 3 },
                LayerSpec::Activation {
                    name: Activation::Relu,
                },
                LayerSpec::Dense { inputs: 3, outputs: 1 },
            ],
            &[4],
            &mut rng,
        )
        .unwrap();
        let tape = Tape::new();
        let x = Tensor::new(vec![0.3, 0.5, -0.2, 0.9, 1.0, 0.1, 0.0, -0.4], &[2, 4]).unwrap();
        let traced = net.forward(&x, Some(&tape)).unwrap();
        let loss = traced.output.sum_squares().unwrap();
        let grads = loss.backward().unwrap();
        let gs = net.grads_from(&traced, &grads);
        assert_eq!(gs.len(), net.params().len());
        assert!(gs.iter().flatten().any(|&v| v != 0.0));
    }
}

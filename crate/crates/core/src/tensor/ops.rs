//! Forward ops and their vector-Jacobian products.
//!
//! Every VJP is expressed through the same public ops, so a backward pass run
//! with `backward_retaining` yields gradients that are themselves recorded and
//! differentiable. The one exception is `cross_entropy_logits`, whose VJP
//! treats the softmax as a constant (first-order only; nothing in the lab
//! differentiates through a classification gradient twice).

use super::kernels;
use super::{record, Op, Tensor, TensorError};
use std::rc::Rc;

/// Activation functions available to model layers.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    /// Parse names like `relu`, `leaky_relu(0.2)`, `tanh`, `sigmoid`.
    pub fn parse(name: &str) -> Result<Activation, TensorError> {
        let name = name.trim();
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => {
                if let Some(arg) = name
                    .strip_prefix("leaky_relu(")
                    .and_then(|s| s.strip_suffix(')'))
                {
                    let alpha: f64 = arg
                        .parse()
                        .map_err(|_| TensorError::UnknownActivation(name.to_string()))?;
                    return Ok(Activation::LeakyRelu(alpha));
                }
                Err(TensorError::UnknownActivation(name.to_string()))
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        match self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu(alpha) => x.leaky_relu(*alpha),
            Activation::Tanh => x.tanh_act(),
            Activation::Sigmoid => x.sigmoid_act(),
        }
    }
}

/// `elementwise` dispatch by name, for config-driven layers.
pub fn elementwise(name: &str, x: &Tensor) -> Result<Tensor, TensorError> {
    Activation::parse(name)?.apply(x)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map_unary(
    name: &'static str,
    op: Op,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
) -> Result<Tensor, TensorError> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    record(name, op, &[x], data, x.shape().to_vec())
}

impl Tensor {
    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (a, b) = (self, rhs);
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        record("matmul", Op::Matmul, &[a, b], data, vec![m, n])
    }

    pub fn transpose2d(&self) -> Result<Tensor, TensorError> {
        if self.shape().len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose2d",
                expected: "rank-2 tensor".into(),
                got: self.shape().to_vec(),
            });
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let data = kernels::transpose(self.data(), m, n);
        record("transpose2d", Op::Transpose2d, &[self], data, vec![n, m])
    }

    // ── convolution family ──────────────────────────────────────────

    /// Cross-correlation of `self` [N,C,H,W] with kernel [F,C,kh,kw].
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        let x = self;
        if x.shape().len() != 4 || kernel.shape().len() != 4 || x.shape()[1] != kernel.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::KernelTooLarge {
                kernel: kernel.shape().to_vec(),
                input: x.shape().to_vec(),
                padding,
            });
        }
        let oh = kernels::conv_out_dim(h, kh, stride, padding);
        let ow = kernels::conv_out_dim(w, kw, stride, padding);
        let data = kernels::conv2d(x.data(), kernel.data(), n, c, h, w, f, kh, kw, stride, padding);
        record(
            "conv2d",
            Op::Conv2d { stride, padding },
            &[x, kernel],
            data,
            vec![n, f, oh, ow],
        )
    }

    /// Transposed convolution: the adjoint of [`Tensor::conv2d`] in its input.
    /// `self` is [N,F,H,W], kernel is [F,C,kh,kw]; output spatial size is
    /// (H-1)·stride - 2·padding + kh.
    pub fn tconv2d(
        &self,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        let (kh, kw) = (kernel.shape()[2], kernel.shape()[3]);
        let h = self.shape()[2];
        let w = self.shape()[3];
        let out_h = (h - 1) * stride + kh;
        let out_w = (w - 1) * stride + kw;
        if out_h < 2 * padding + 1 || out_w < 2 * padding + 1 {
            return Err(TensorError::KernelTooLarge {
                kernel: kernel.shape().to_vec(),
                input: self.shape().to_vec(),
                padding,
            });
        }
        self.tconv2d_sized(kernel, stride, padding, out_h - 2 * padding, out_w - 2 * padding)
    }

    /// Transposed convolution with an explicit output size (used as the VJP of
    /// conv2d, where stride truncation makes the formula size ambiguous).
    pub(crate) fn tconv2d_sized(
        &self,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor, TensorError> {
        let g = self;
        if g.shape().len() != 4 || kernel.shape().len() != 4 || g.shape()[1] != kernel.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "tconv2d",
                lhs: g.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let (n, f, gh, gw) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
        let (c, kh, kw) = (kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
        let data = kernels::tconv2d(
            g.data(),
            kernel.data(),
            n,
            f,
            gh,
            gw,
            c,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        );
        record(
            "tconv2d",
            Op::TConv2d { stride, padding },
            &[g, kernel],
            data,
            vec![n, c, out_h, out_w],
        )
    }

    /// Kernel gradient of conv2d: `self` is the conv input [N,C,H,W], `g` the
    /// output cotangent [N,F,H',W']; result is [F,C,kh,kw].
    pub(crate) fn conv2d_wgrad(
        &self,
        g: &Tensor,
        stride: usize,
        padding: usize,
        kh: usize,
        kw: usize,
    ) -> Result<Tensor, TensorError> {
        let x = self;
        if x.shape().len() != 4 || g.shape().len() != 4 || x.shape()[0] != g.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_wgrad",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, gh, gw) = (g.shape()[1], g.shape()[2], g.shape()[3]);
        let data = kernels::conv2d_wgrad(
            x.data(),
            g.data(),
            n,
            c,
            h,
            w,
            f,
            gh,
            gw,
            kh,
            kw,
            stride,
            padding,
        );
        record(
            "conv2d_wgrad",
            Op::ConvWGrad { stride, padding },
            &[x, g],
            data,
            vec![f, c, kh, kw],
        )
    }

    // ── elementwise binary ──────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("add", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a + b)
            .collect();
        record("add", Op::Add, &[self, rhs], data, self.shape().to_vec())
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("sub", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a - b)
            .collect();
        record("sub", Op::Sub, &[self, rhs], data, self.shape().to_vec())
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("mul", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a * b)
            .collect();
        record("mul", Op::Mul, &[self, rhs], data, self.shape().to_vec())
    }

    /// Row-broadcast bias add: self [m,n] + bias [n].
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape().len() != 2 || bias.shape() != [self.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let n = self.shape()[1];
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias.data()[i % n])
            .collect();
        record(
            "add_bias",
            Op::AddBias,
            &[self, bias],
            data,
            self.shape().to_vec(),
        )
    }

    /// Channel-broadcast bias add: self [N,C,H,W] + bias [C].
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape().len() != 4 || bias.shape() != [self.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let hw = self.shape()[2] * self.shape()[3];
        let c = self.shape()[1];
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias.data()[(i / hw) % c])
            .collect();
        record(
            "add_channel_bias",
            Op::AddChannelBias,
            &[self, bias],
            data,
            self.shape().to_vec(),
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor, TensorError> {
        map_unary("scale", Op::Scale(c), self, |v| v * c)
    }

    pub fn neg(&self) -> Result<Tensor, TensorError> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        map_unary("add_scalar", Op::AddScalar(c), self, |v| v + c)
    }

    /// Multiply by a scalar *tensor* (broadcast), keeping the scalar
    /// differentiable.
    pub fn smul(&self, s: &Tensor) -> Result<Tensor, TensorError> {
        if s.len() != 1 {
            return Err(TensorError::BadShape {
                op: "smul",
                expected: "scalar multiplier".into(),
                got: s.shape().to_vec(),
            });
        }
        let sv = s.data()[0];
        let data = self.data().iter().map(|v| v * sv).collect();
        record("smul", Op::SMul, &[self, s], data, self.shape().to_vec())
    }

    // ── elementwise unary ───────────────────────────────────────────

    pub fn relu(&self) -> Result<Tensor, TensorError> {
        map_unary("relu", Op::Relu, self, |v| v.max(0.0))
    }

    pub fn leaky_relu(&self, alpha: f64) -> Result<Tensor, TensorError> {
        map_unary("leaky_relu", Op::LeakyRelu(alpha), self, |v| {
            if v > 0.0 {
                v
            } else {
                alpha * v
            }
        })
    }

    pub fn tanh_act(&self) -> Result<Tensor, TensorError> {
        map_unary("tanh", Op::Tanh, self, f64::tanh)
    }

    pub fn sigmoid_act(&self) -> Result<Tensor, TensorError> {
        map_unary("sigmoid", Op::Sigmoid, self, kernels::sigmoid)
    }

    pub fn softplus_act(&self) -> Result<Tensor, TensorError> {
        map_unary("softplus", Op::Softplus, self, kernels::softplus)
    }

    pub fn sqrt_act(&self) -> Result<Tensor, TensorError> {
        map_unary("sqrt", Op::Sqrt, self, f64::sqrt)
    }

    pub fn recip(&self) -> Result<Tensor, TensorError> {
        map_unary("recip", Op::Recip, self, f64::recip)
    }

    // ── reductions and broadcasts ───────────────────────────────────

    pub fn sum_all(&self) -> Result<Tensor, TensorError> {
        let s: f64 = self.data().iter().sum();
        record("sum_all", Op::SumAll, &[self], vec![s], vec![1])
    }

    pub fn mean_all(&self) -> Result<Tensor, TensorError> {
        let n = self.len().max(1) as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// Σx², as a scalar.
    pub fn sum_squares(&self) -> Result<Tensor, TensorError> {
        self.mul(self)?.sum_all()
    }

    /// Column sums: [m,n] → [n].
    pub fn sum_axis0(&self) -> Result<Tensor, TensorError> {
        if self.shape().len() != 2 {
            return Err(TensorError::BadShape {
                op: "sum_axis0",
                expected: "rank-2 tensor".into(),
                got: self.shape().to_vec(),
            });
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += self.data()[i * n + j];
            }
        }
        record("sum_axis0", Op::SumAxis0, &[self], out, vec![n])
    }

    pub(crate) fn broadcast_axis0(&self, m: usize) -> Result<Tensor, TensorError> {
        let n = self.len();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.data());
        }
        record(
            "broadcast_axis0",
            Op::BroadcastAxis0,
            &[self],
            out,
            vec![m, n],
        )
    }

    /// Per-channel sums: [N,C,H,W] → [C].
    pub fn sum_channels(&self) -> Result<Tensor, TensorError> {
        if self.shape().len() != 4 {
            return Err(TensorError::BadShape {
                op: "sum_channels",
                expected: "rank-4 tensor".into(),
                got: self.shape().to_vec(),
            });
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let hw = h * w;
        let mut out = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    out[ci] += self.data()[base + i];
                }
            }
        }
        record("sum_channels", Op::SumChannels, &[self], out, vec![c])
    }

    pub(crate) fn broadcast_channels(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        debug_assert_eq!(self.len(), c);
        let hw = h * w;
        let mut out = vec![0.0; n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let v = self.data()[ci];
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    out[base + i] = v;
                }
            }
        }
        record(
            "broadcast_channels",
            Op::BroadcastChannels,
            &[self],
            out,
            shape.to_vec(),
        )
    }

    /// Per-example sums over all trailing axes: [B, rest…] → [B].
    pub fn sum_trailing(&self) -> Result<Tensor, TensorError> {
        if self.shape().is_empty() {
            return Err(TensorError::BadShape {
                op: "sum_trailing",
                expected: "rank ≥ 1".into(),
                got: self.shape().to_vec(),
            });
        }
        let b = self.shape()[0];
        let per = self.len() / b.max(1);
        let mut out = vec![0.0; b];
        for (i, chunk) in self.data().chunks(per).enumerate() {
            out[i] = chunk.iter().sum();
        }
        record("sum_trailing", Op::SumTrailing, &[self], out, vec![b])
    }

    /// Broadcast a [B] vector over trailing axes into `shape` (shape[0] == B).
    pub fn broadcast_trailing(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let b = self.len();
        if shape.is_empty() || shape[0] != b {
            return Err(TensorError::BadShape {
                op: "broadcast_trailing",
                expected: format!("target with leading dim {b}"),
                got: shape.to_vec(),
            });
        }
        let per: usize = shape.iter().skip(1).product();
        let mut out = Vec::with_capacity(b * per);
        for &v in self.data() {
            out.extend(std::iter::repeat(v).take(per));
        }
        record(
            "broadcast_trailing",
            Op::BroadcastTrailing,
            &[self],
            out,
            shape.to_vec(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let to_len: usize = shape.iter().product();
        if to_len != self.len() {
            return Err(TensorError::BadReshape {
                from: self.shape().to_vec(),
                from_len: self.len(),
                to: shape.to_vec(),
                to_len,
            });
        }
        record(
            "reshape",
            Op::Reshape,
            &[self],
            self.data().to_vec(),
            shape.to_vec(),
        )
    }

    // ── classification loss ─────────────────────────────────────────

    /// Mean softmax cross-entropy over the batch. `self` is [B,K] logits.
    pub fn cross_entropy_logits(&self, labels: &[usize]) -> Result<Tensor, TensorError> {
        if self.shape().len() != 2 || self.shape()[0] != labels.len() {
            return Err(TensorError::BadShape {
                op: "cross_entropy_logits",
                expected: format!("[{}, K] logits", labels.len()),
                got: self.shape().to_vec(),
            });
        }
        let (b, k) = (self.shape()[0], self.shape()[1]);
        let mut loss = 0.0;
        for i in 0..b {
            let row = &self.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[labels[i]];
        }
        loss /= b as f64;
        record(
            "cross_entropy_logits",
            Op::CrossEntropyLogits {
                labels: Rc::new(labels.to_vec()),
            },
            &[self],
            vec![loss],
            vec![1],
        )
    }
}

fn constant_mask(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.data().iter().map(|&v| f(v)).collect(), x.shape()).expect("mask")
}

/// Vector-Jacobian products, one entry per op input (None = no gradient).
pub(crate) fn vjp(
    op: &Op,
    inputs: &[Tensor],
    output: &Tensor,
    upstream: &Tensor,
) -> Result<Vec<Option<Tensor>>, TensorError> {
    let g = upstream;
    Ok(match op {
        Op::Leaf { .. } => vec![],
        Op::Matmul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let da = g.matmul(&b.transpose2d()?)?;
            let db = a.transpose2d()?.matmul(g)?;
            vec![Some(da), Some(db)]
        }
        Op::Transpose2d => vec![Some(g.transpose2d()?)],
        Op::Conv2d { stride, padding } => {
            let (x, k) = (&inputs[0], &inputs[1]);
            let dx = g.tconv2d_sized(k, *stride, *padding, x.shape()[2], x.shape()[3])?;
            let dk = x.conv2d_wgrad(g, *stride, *padding, k.shape()[2], k.shape()[3])?;
            vec![Some(dx), Some(dk)]
        }
        Op::TConv2d { stride, padding } => {
            let (x, k) = (&inputs[0], &inputs[1]);
            let dx = g.conv2d(k, *stride, *padding)?;
            let dk = g.conv2d_wgrad(x, *stride, *padding, k.shape()[2], k.shape()[3])?;
            vec![Some(dx), Some(dk)]
        }
        Op::ConvWGrad { stride, padding } => {
            // output dk = wgrad(x, y); upstream u is kernel-shaped.
            let (x, y) = (&inputs[0], &inputs[1]);
            let dx = y.tconv2d_sized(g, *stride, *padding, x.shape()[2], x.shape()[3])?;
            let dy = x.conv2d(g, *stride, *padding)?;
            vec![Some(dx), Some(dy)]
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.neg()?)],
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            vec![Some(g.mul(b)?), Some(g.mul(a)?)]
        }
        Op::AddBias => vec![Some(g.clone()), Some(g.sum_axis0()?)],
        Op::AddChannelBias => vec![Some(g.clone()), Some(g.sum_channels()?)],
        Op::Scale(c) => vec![Some(g.scale(*c)?)],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::SMul => {
            let (x, s) = (&inputs[0], &inputs[1]);
            vec![Some(g.smul(s)?), Some(g.mul(x)?.sum_all()?)]
        }
        Op::Relu => {
            let mask = constant_mask(&inputs[0], |v| if v > 0.0 { 1.0 } else { 0.0 });
            vec![Some(g.mul(&mask)?)]
        }
        Op::LeakyRelu(alpha) => {
            let a = *alpha;
            let mask = constant_mask(&inputs[0], |v| if v > 0.0 { 1.0 } else { a });
            vec![Some(g.mul(&mask)?)]
        }
        Op::Tanh => {
            // d tanh = 1 - y², built from the recorded output so it stays
            // differentiable.
            let ones = Tensor::ones(output.shape());
            let dy = ones.sub(&output.mul(output)?)?;
            vec![Some(g.mul(&dy)?)]
        }
        Op::Sigmoid => {
            let ones = Tensor::ones(output.shape());
            let dy = output.mul(&ones.sub(output)?)?;
            vec![Some(g.mul(&dy)?)]
        }
        Op::Softplus => vec![Some(g.mul(&inputs[0].sigmoid_act()?)?)],
        Op::Sqrt => {
            // d√x = 1/(2y)
            vec![Some(g.mul(&output.recip()?.scale(0.5)?)?)]
        }
        Op::Recip => {
            // d(1/x) = -y²
            vec![Some(g.mul(&output.mul(output)?)?.neg()?)]
        }
        Op::SumAll => {
            let ones = Tensor::ones(inputs[0].shape());
            vec![Some(ones.smul(g)?)]
        }
        Op::SumAxis0 => vec![Some(g.broadcast_axis0(inputs[0].shape()[0])?)],
        Op::BroadcastAxis0 => vec![Some(g.sum_axis0()?)],
        Op::SumChannels => vec![Some(g.broadcast_channels(inputs[0].shape())?)],
        Op::BroadcastChannels => vec![Some(g.sum_channels()?)],
        Op::SumTrailing => vec![Some(g.broadcast_trailing(inputs[0].shape())?)],
        Op::BroadcastTrailing => vec![Some(g.sum_trailing()?)],
        Op::Reshape => vec![Some(g.reshape(inputs[0].shape())?)],
        Op::CrossEntropyLogits { labels } => {
            // (softmax - onehot)/B, softmax treated as constant (first-order).
            let x = &inputs[0];
            let (b, k) = (x.shape()[0], x.shape()[1]);
            let mut d = vec![0.0; b * k];
            for i in 0..b {
                let row = &x.data()[i * k..(i + 1) * k];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..k {
                    d[i * k + j] = exps[j] / z / b as f64;
                }
                d[i * k + labels[i]] -= 1.0 / b as f64;
            }
            let d = Tensor::new(d, x.shape())?;
            vec![Some(d.smul(g)?)]
        }
    })
}

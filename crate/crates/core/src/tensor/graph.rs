use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::{conv_out_extent, dims4, Scalar, Tensor};
use crate::error::{invalid_arg, invalid_state, Result};
use crate::nn::ParamId;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Differentiable primitives known to the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    Conv2d,
    AvgPoolHalf,
    MaxPool2,
    GlobalAvgPool,
    Relu,
    Add,
    Mul,
    Scale,
    Sum,
    ConcatChannels,
    ShortcutDownsample,
    Reshape,
    Linear,
    BatchNormTrain,
    BatchNormEval,
    SoftmaxCrossEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 16] = [
        Primitive::Conv2d,
        Primitive::AvgPoolHalf,
        Primitive::MaxPool2,
        Primitive::GlobalAvgPool,
        Primitive::Relu,
        Primitive::Add,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Sum,
        Primitive::ConcatChannels,
        Primitive::ShortcutDownsample,
        Primitive::Reshape,
        Primitive::Linear,
        Primitive::BatchNormTrain,
        Primitive::BatchNormEval,
        Primitive::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv2d => "conv2d",
            Primitive::AvgPoolHalf => "avg_pool_half",
            Primitive::MaxPool2 => "max_pool2",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Relu => "relu",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Sum => "sum",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::ShortcutDownsample => "shortcut_downsample",
            Primitive::Reshape => "reshape",
            Primitive::Linear => "linear",
            Primitive::BatchNormTrain => "batch_norm_train",
            Primitive::BatchNormEval => "batch_norm_eval",
            Primitive::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    AvgPoolHalf {
        input: usize,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: usize,
    },
    Relu {
        input: usize,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
    Mul {
        lhs: usize,
        rhs: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Sum {
        input: usize,
    },
    ConcatChannels {
        inputs: Vec<usize>,
    },
    ShortcutDownsample {
        input: usize,
        stride: usize,
    },
    Reshape {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv2d { .. } => Primitive::Conv2d,
            Op::AvgPoolHalf { .. } => Primitive::AvgPoolHalf,
            Op::MaxPool2 { .. } => Primitive::MaxPool2,
            Op::GlobalAvgPool { .. } => Primitive::GlobalAvgPool,
            Op::Relu { .. } => Primitive::Relu,
            Op::Add { .. } => Primitive::Add,
            Op::Mul { .. } => Primitive::Mul,
            Op::Scale { .. } => Primitive::Scale,
            Op::Sum { .. } => Primitive::Sum,
            Op::ConcatChannels { .. } => Primitive::ConcatChannels,
            Op::ShortcutDownsample { .. } => Primitive::ShortcutDownsample,
            Op::Reshape { .. } => Primitive::Reshape,
            Op::Linear { .. } => Primitive::Linear,
            Op::BatchNorm { train: true, .. } => Primitive::BatchNormTrain,
            Op::BatchNorm { train: false, .. } => Primitive::BatchNormEval,
            Op::SoftmaxCrossEntropy { .. } => Primitive::SoftmaxCrossEntropy,
        })
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::Linear {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::AvgPoolHalf { input }
            | Op::MaxPool2 { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::Relu { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::ShortcutDownsample { input, .. }
            | Op::Reshape { input } => vec![*input],
            Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => vec![*lhs, *rhs],
            Op::ConcatChannels { inputs } => inputs.clone(),
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A differentiation tape. Operations append nodes in evaluation order, which is
/// therefore always a valid topological order.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    fault: Option<Primitive>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: corrupts the backward rule of `primitive` by scaling the
    /// gradients it produces by 1.5.
    pub fn inject_fault(&mut self, primitive: Option<Primitive>) {
        self.fault = primitive;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, param: Option<ParamId>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.push_with(value, op, requires_grad, param)
    }

    fn push_with(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(invalid_state!("variable {v:?} is not recorded on this tape"));
        }
        Ok(v.index)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, false, None)
    }

    /// A free leaf whose gradient is reported by [`Gradients::var`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, true, None)
    }

    /// One graph site of parameter `id`. Binding the same id at several sites
    /// makes backward sum the per-site gradients into one entry.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, true, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("variable belongs to this graph")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v).expect("variable belongs to this graph")].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, wi) = (self.idx(input)?, self.idx(weight)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let [n, cin, h, w] = dims4(self.val(xi).shape())?;
        let [cout, wcin, kh, kw] = match self.val(wi).shape() {
            &[a, b, c, d] => [a, b, c, d],
            other => return Err(invalid_arg!("conv weight must be rank 4, got {other:?}")),
        };
        if wcin != cin {
            return Err(invalid_arg!(
                "conv2d input channels: input has {cin} but weight expects {wcin}"
            ));
        }
        if stride == 0 {
            return Err(invalid_arg!("conv2d stride must be positive"));
        }
        if let Some(b) = bi {
            if self.val(b).shape() != [cout] {
                return Err(invalid_arg!(
                    "conv2d bias shape {:?} does not match {cout} output channels",
                    self.val(b).shape()
                ));
            }
        }
        let oh = conv_out_extent(h, kh, stride, padding)
            .ok_or_else(|| invalid_arg!("conv2d output height is not positive (h={h}, kh={kh}, pad={padding})"))?;
        let ow = conv_out_extent(w, kw, stride, padding)
            .ok_or_else(|| invalid_arg!("conv2d output width is not positive (w={w}, kw={kw}, pad={padding})"))?;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let out = kernels::conv_forward(
            self.val(xi).data(),
            self.val(wi).data(),
            bi.map(|b| self.val(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                geom,
            },
            None,
        ))
    }

    fn even_spatial(&self, i: usize, what: &str) -> Result<[usize; 4]> {
        let d = dims4(self.val(i).shape())?;
        if d[2] % 2 != 0 || d[3] % 2 != 0 {
            return Err(invalid_arg!(
                "{what} needs even spatial extents, got {}x{}",
                d[2],
                d[3]
            ));
        }
        Ok(d)
    }

    /// Non-overlapping 2x2 mean pooling.
    pub fn avg_pool_half(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let [n, c, h, w] = self.even_spatial(xi, "avg_pool_half")?;
        let out = kernels::avg_pool_half(self.val(xi).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::AvgPoolHalf { input: xi }, None))
    }

    /// Non-overlapping 2x2 max pooling.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let [n, c, h, w] = self.even_spatial(xi, "max_pool2")?;
        let (out, argmax) = kernels::max_pool2(self.val(xi).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2 { input: xi, argmax }, None))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let [n, c, h, w] = dims4(self.val(xi).shape())?;
        let scale = T::of(1.0 / (h * w) as f64);
        let out = self
            .val(xi)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input: xi }, None))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = self.val(xi);
        let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Relu { input: xi }, None))
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(invalid_arg!(
                "{what}: shapes {:?} and {:?} differ",
                self.val(a).shape(),
                self.val(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.idx(lhs)?, self.idx(rhs)?);
        self.same_shape(a, b, "add")?;
        let out = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add { lhs: a, rhs: b }, None))
    }

    /// Elementwise product.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.idx(lhs)?, self.idx(rhs)?);
        self.same_shape(a, b, "mul")?;
        let out = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul { lhs: a, rhs: b }, None))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(input)?;
        let factor = T::of(factor);
        let x = self.val(xi);
        let out = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Scale { input: xi, factor }, None))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let total = self.val(xi).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(total), Op::Sum { input: xi }, None))
    }

    /// Concatenation along the channel axis, in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(invalid_arg!("concat_channels needs at least one input"));
        }
        let idx = inputs
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let [n, _, h, w] = dims4(self.val(idx[0]).shape())?;
        let mut channels = 0;
        for (pos, &i) in idx.iter().enumerate() {
            let [ni, ci, hi, wi] = dims4(self.val(i).shape())?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(invalid_arg!(
                    "concat_channels input {pos} has batch/spatial {ni}x{hi}x{wi}, expected {n}x{h}x{w}"
                ));
            }
            channels += ci;
        }
        let mut out = Vec::with_capacity(n * channels * h * w);
        for s in 0..n {
            for &i in &idx {
                let plane = self.val(i).shape()[1] * h * w;
                out.extend_from_slice(&self.val(i).data()[s * plane..(s + 1) * plane]);
            }
        }
        let value = Tensor::new(vec![n, channels, h, w], out)?;
        Ok(self.push(value, Op::ConcatChannels { inputs: idx }, None))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride` and
    /// zero-padding up to `out_channels` channels.
    pub fn shortcut_downsample(
        &mut self,
        input: Var,
        out_channels: usize,
        stride: usize,
    ) -> Result<Var> {
        let xi = self.idx(input)?;
        let [n, c, h, w] = dims4(self.val(xi).shape())?;
        if out_channels < c {
            return Err(invalid_arg!(
                "shortcut cannot shrink channels from {c} to {out_channels}"
            ));
        }
        if stride == 0 {
            return Err(invalid_arg!("shortcut stride must be positive"));
        }
        let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let x = self.val(xi).data();
        let mut out = vec![T::zero(); n * out_channels * oh * ow];
        for s in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        out[((s * out_channels + ch) * oh + y) * ow + xo] =
                            x[((s * c + ch) * h + y * stride) * w + xo * stride];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, out_channels, oh, ow], out)?;
        Ok(self.push(value, Op::ShortcutDownsample { input: xi, stride }, None))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let xi = self.idx(input)?;
        let value = self.val(xi).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input: xi }, None))
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(input, vec![n, rest])
    }

    /// `x[N,D] * weight[K,D]^T + bias[K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(input)?, self.idx(weight)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let (n, d) = match self.val(xi).shape() {
            &[n, d] => (n, d),
            other => return Err(invalid_arg!("linear input must be N x D, got {other:?}")),
        };
        let (k, wd) = match self.val(wi).shape() {
            &[k, wd] => (k, wd),
            other => return Err(invalid_arg!("linear weight must be K x D, got {other:?}")),
        };
        if wd != d {
            return Err(invalid_arg!(
                "linear input dimension: input has {d} features but weight expects {wd}"
            ));
        }
        if let Some(b) = bi {
            if self.val(b).shape() != [k] {
                return Err(invalid_arg!(
                    "linear bias shape {:?} does not match {k} outputs",
                    self.val(b).shape()
                ));
            }
        }
        let mut out = vec![T::zero(); n * k];
        T::gemm(
            n,
            d,
            k,
            T::one(),
            self.val(xi).data(),
            (d as isize, 1),
            self.val(wi).data(),
            (1, d as isize),
            T::zero(),
            &mut out,
            (k as isize, 1),
        );
        if let Some(b) = bi {
            let bias = self.val(b).data();
            for row in out.chunks_mut(k) {
                row.iter_mut().zip(bias).for_each(|(o, &b)| *o = *o + b);
            }
        }
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                input: xi,
                weight: wi,
                bias: bi,
            },
            None,
        ))
    }

    fn bn_check(&self, xi: usize, gi: usize, bi: usize) -> Result<[usize; 4]> {
        let dims = dims4(self.val(xi).shape())?;
        for (what, i) in [("gamma", gi), ("beta", bi)] {
            if self.val(i).shape() != [dims[1]] {
                return Err(invalid_arg!(
                    "batch norm {what} has shape {:?} but input has {} channels",
                    self.val(i).shape(),
                    dims[1]
                ));
            }
        }
        Ok(dims)
    }

    /// Batch normalization with batch statistics. Returns the output together
    /// with the per-channel batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (xi, gi, bi) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let dims = self.bn_check(xi, gi, bi)?;
        let stats = kernels::bn_batch_stats(self.val(xi).data(), dims, eps);
        let (y, xhat) = kernels::bn_apply(
            self.val(xi).data(),
            dims,
            &stats.mean,
            &stats.inv_std,
            self.val(gi).data(),
            self.val(bi).data(),
        );
        let value = Tensor::new(dims.to_vec(), y)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                input: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std: stats.inv_std,
                train: true,
            },
            None,
        );
        Ok((var, stats.mean, stats.var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        variance: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let dims = self.bn_check(xi, gi, bi)?;
        if mean.len() != dims[1] || variance.len() != dims[1] {
            return Err(invalid_arg!(
                "batch norm statistics have {} channels but input has {}",
                mean.len(),
                dims[1]
            ));
        }
        let inv_std: Vec<T> = variance
            .iter()
            .map(|&v| (v + T::of(eps)).sqrt().recip())
            .collect();
        let (y, xhat) = kernels::bn_apply(
            self.val(xi).data(),
            dims,
            mean,
            &inv_std,
            self.val(gi).data(),
            self.val(bi).data(),
        );
        let value = Tensor::new(dims.to_vec(), y)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                train: false,
            },
            None,
        ))
    }

    /// Mean over the batch of the negative log-softmax at each label.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let (n, k) = match self.val(li).shape() {
            &[n, k] => (n, k),
            other => return Err(invalid_arg!("logits must be N x K, got {other:?}")),
        };
        if labels.len() != n {
            return Err(invalid_arg!(
                "{} labels given for a batch of {n}",
                labels.len()
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(invalid_arg!("label {l} of sample {i} is outside [0, {k})"));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = T::zero();
        for (row, &label) in self.val(li).data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            loss = loss + total.ln() - (row[label] - max);
            probs.extend(exps.into_iter().map(|e| e / total));
        }
        let loss = loss / T::of(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: li,
                probs,
                labels: labels.to_vec(),
            },
            None,
        ))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        if self.val(root).numel() != 1 {
            return Err(invalid_arg!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(root).shape()
            ));
        }
        let count = self.nodes.len();
        let mut reachable = vec![false; count];
        reachable[root] = true;
        for i in (0..=root).rev() {
            if reachable[i] {
                for j in self.nodes[i].op.inputs() {
                    reachable[j] = true;
                }
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..count).map(|_| None).collect();
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![T::one()]);
        }
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let mut contributions = self.node_backward(i, &dy)?;
            if self.fault.is_some() && self.fault == node.op.primitive() {
                let corrupt = T::of(1.5);
                for (_, g) in contributions.iter_mut() {
                    g.iter_mut().for_each(|v| *v = *v * corrupt);
                }
            }
            grads[i] = Some(dy);
            for (j, g) in contributions {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut vars = BTreeMap::new();
        let mut params: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        let mut sites: BTreeMap<ParamId, Vec<usize>> = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = Tensor::new(self.nodes[i].value.shape().to_vec(), g)?;
            if let Some(id) = self.nodes[i].param {
                sites.entry(id).or_default().push(i);
                match params.get_mut(&id) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .for_each(|(a, &b)| *a = *a + b),
                    None => {
                        params.insert(id, grad.clone());
                    }
                }
            }
            vars.insert(i, grad);
        }
        Ok(Gradients {
            graph: self.id,
            vars,
            params,
            sites,
        })
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn node_backward(&self, i: usize, dy: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = kernels::conv_backward(
                    self.val(*input).data(),
                    self.val(*weight).data(),
                    dy,
                    geom,
                    (
                        needs(*input),
                        needs(*weight),
                        bias.is_some_and(|b| needs(b)),
                    ),
                );
                out.extend(grads.input.map(|g| (*input, g)));
                out.extend(grads.weight.map(|g| (*weight, g)));
                if let (Some(b), Some(g)) = (bias, grads.bias) {
                    out.push((*b, g));
                }
            }
            Op::AvgPoolHalf { input } => {
                let [n, c, h, w] = dims4(self.val(*input).shape())?;
                out.push((*input, kernels::avg_pool_half_backward(dy, n * c, h, w)));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![T::zero(); self.val(*input).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] = dx[src] + dy[o];
                }
                out.push((*input, dx));
            }
            Op::GlobalAvgPool { input } => {
                let [_, _, h, w] = dims4(self.val(*input).shape())?;
                let scale = T::of(1.0 / (h * w) as f64);
                let dx = dy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * scale, h * w))
                    .collect();
                out.push((*input, dx));
            }
            Op::Relu { input } => {
                let dx = self
                    .val(*input)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*input, dx));
            }
            Op::Add { lhs, rhs } => {
                out.push((*lhs, dy.to_vec()));
                out.push((*rhs, dy.to_vec()));
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.val(*lhs).data(), self.val(*rhs).data());
                out.push((*lhs, dy.iter().zip(b).map(|(&g, &v)| g * v).collect()));
                out.push((*rhs, dy.iter().zip(a).map(|(&g, &v)| g * v).collect()));
            }
            Op::Scale { input, factor } => {
                out.push((*input, dy.iter().map(|&g| g * *factor).collect()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![dy[0]; self.val(*input).numel()]));
            }
            Op::ConcatChannels { inputs } => {
                let [n, total, h, w] = dims4(node.value.shape())?;
                let mut offset = 0;
                for &j in inputs {
                    let c = self.val(j).shape()[1];
                    let mut dx = Vec::with_capacity(n * c * h * w);
                    for s in 0..n {
                        let start = (s * total + offset) * h * w;
                        dx.extend_from_slice(&dy[start..start + c * h * w]);
                    }
                    out.push((j, dx));
                    offset += c;
                }
            }
            Op::ShortcutDownsample { input, stride } => {
                let [n, c, h, w] = dims4(self.val(*input).shape())?;
                let [_, oc, oh, ow] = dims4(node.value.shape())?;
                let mut dx = vec![T::zero(); n * c * h * w];
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                dx[((s * c + ch) * h + y * stride) * w + x * stride] =
                                    dy[((s * oc + ch) * oh + y) * ow + x];
                            }
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::Reshape { input } => out.push((*input, dy.to_vec())),
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, wt) = (self.val(*input), self.val(*weight));
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let k = wt.shape()[0];
                if needs(*input) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(
                        n,
                        k,
                        d,
                        T::one(),
                        dy,
                        (k as isize, 1),
                        wt.data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut dx,
                        (d as isize, 1),
                    );
                    out.push((*input, dx));
                }
                if needs(*weight) {
                    let mut dw = vec![T::zero(); k * d];
                    T::gemm(
                        k,
                        n,
                        d,
                        T::one(),
                        dy,
                        (1, k as isize),
                        x.data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut dw,
                        (d as isize, 1),
                    );
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); k];
                    for row in dy.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                    out.push((*b, db));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let dims = dims4(node.value.shape())?;
                let [n, c, h, w] = dims;
                let hw = h * w;
                let (sum_dy, sum_dy_xhat) = kernels::bn_channel_sums(dy, xhat, dims);
                let g = self.val(*gamma).data();
                if needs(*input) {
                    let mut dx = vec![T::zero(); dy.len()];
                    let count = T::of((n * hw) as f64);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let scale = g[ch] * inv_std[ch];
                            for j in base..base + hw {
                                dx[j] = if *train {
                                    scale
                                        * (dy[j]
                                            - sum_dy[ch] / count
                                            - xhat[j] * sum_dy_xhat[ch] / count)
                                } else {
                                    scale * dy[j]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, sum_dy_xhat));
                out.push((*beta, sum_dy));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = self.val(*logits).shape()[1];
                let scale = dy[0] / T::of(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (s, &l) in labels.iter().enumerate() {
                    dx[s * k + l] = dx[s * k + l] - scale;
                }
                out.push((*logits, dx));
            }
        }
        Ok(out)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    graph: u64,
    vars: BTreeMap<usize, Tensor<T>>,
    params: BTreeMap<ParamId, Tensor<T>>,
    sites: BTreeMap<ParamId, Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a recorded value; absent when unreachable from the loss
    /// or not tracked.
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.vars.get(&v.index)
    }

    /// Gradient of a parameter, summed over all of its graph sites.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&id, t)| (id, t))
    }

    /// Per-site gradients of a parameter, in graph order.
    pub fn site_grads(&self, id: ParamId) -> Vec<&Tensor<T>> {
        self.sites
            .get(&id)
            .map(|s| s.iter().map(|i| &self.vars[i]).collect())
            .unwrap_or_default()
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }
}

use rand::Rng;

use crate::element::Element;
use crate::error::TensorError;
use crate::ops::{conv, norm, pool};
use crate::tensor::Tensor;
use crate::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch-norm running moments, updated in train mode with momentum
/// [`BN_MOMENTUM`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2x2,
    AvgPool2x2,
    BatchNorm,
    Relu,
    Sigmoid,
    Dropout,
    Concat,
    FullyConnected,
    Reshape,
    Mul,
    Scale,
    Sum,
    Bce,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: conv::ConvGeom,
    },
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2x2 {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape {
        input: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2x2 { .. } => OpKind::MaxPool2x2,
            Op::AvgPool2x2 { .. } => OpKind::AvgPool2x2,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Concat { .. } => OpKind::Concat,
            Op::FullyConnected { .. } => OpKind::FullyConnected,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Bce { .. } => OpKind::Bce,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::FullyConnected {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Concat { inputs } => inputs.clone(),
            Op::Mul { lhs, rhs } => vec![*lhs, *rhs],
            Op::MaxPool2x2 { input, .. }
            | Op::AvgPool2x2 { input }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Dropout { input, .. }
            | Op::Reshape { input }
            | Op::Scale { input, .. }
            | Op::Sum { input } => vec![*input],
            Op::Bce { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation record: values and the operations that produced them, in
/// execution order. Every node's inputs precede it, so the record is already
/// topologically sorted.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of non-leaf operations the backward pass processed.
    pub fn visited_ops(&self) -> usize {
        self.visited
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded node in execution order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Panics if `var` was issued by a different graph with more nodes.
    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn inputs(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    /// Which side of every piecewise-linear switch the recorded pass took:
    /// the sign of each relu input and the winning slot of each max-pool
    /// window. Two passes with equal patterns share one linear piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => out.extend(
                    self.nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .map(|&v| usize::from(v > T::zero())),
                ),
                Op::MaxPool2x2 { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::contract("graph", format!("unknown node {}", var.0)))
        }
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let x = self.value(input);
        let k = self.value(kernel);
        let geom = conv::ConvGeom::new(x.shape(), k.shape(), stride, padding)?;
        let out = conv::forward(&geom, x.data(), k.data());
        let value = Tensor::from_parts(vec![geom.n, geom.o, geom.ho, geom.wo], out);
        Ok(self.push_op(value, Op::Conv2d { input, kernel, geom }))
    }

    fn even_spatial(&self, input: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        self.check(input)?;
        let (n, c, h, w) = self.value(input).dims4(op)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::contract(
                op,
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        Ok((n, c, h, w))
    }

    pub fn max_pool2x2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.even_spatial(input, "max_pool2x2")?;
        let (out, argmax) = pool::max2x2_forward(self.value(input).data(), n * c, h, w);
        let value = Tensor::from_parts(vec![n, c, h / 2, w / 2], out);
        Ok(self.push_op(value, Op::MaxPool2x2 { input, argmax }))
    }

    pub fn avg_pool2x2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.even_spatial(input, "avg_pool2x2")?;
        let out = pool::avg2x2_forward(self.value(input).data(), n * c, h, w);
        let value = Tensor::from_parts(vec![n, c, h / 2, w / 2], out);
        Ok(self.push_op(value, Op::AvgPool2x2 { input }))
    }

    /// Per-channel batch normalization. Train mode normalizes with batch
    /// moments and folds them into `running`; infer mode reads `running`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: &mut RunningStats<T>,
    ) -> Result<Var> {
        self.check(input)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (n, c, h, w) = self.value(input).dims4("batch_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != c {
                return Err(TensorError::contract(
                    "batch_norm",
                    format!("{name} has {} entries for {c} channels", self.value(v).numel()),
                ));
            }
        }
        if running.channels() != c {
            return Err(TensorError::contract(
                "batch_norm",
                format!("running stats track {} channels, input has {c}", running.channels()),
            ));
        }
        let batch_stats = mode == Mode::Train;
        if batch_stats && n < 2 {
            return Err(TensorError::contract(
                "batch_norm",
                "train mode needs a batch of at least 2",
            ));
        }
        let stats = (!batch_stats).then(|| (running.mean.as_slice(), running.var.as_slice()));
        let fwd = norm::forward(
            self.value(input).data(),
            (n, c, h * w),
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            T::lit(BN_EPS),
        );
        if batch_stats {
            let m = T::lit(BN_MOMENTUM);
            let count = n * h * w;
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            for ch in 0..c {
                running.mean[ch] = m * running.mean[ch] + (T::one() - m) * fwd.mean[ch];
                running.var[ch] = m * running.var[ch] + (T::one() - m) * fwd.var[ch] * unbias;
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], fwd.out);
        Ok(self.push_op(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push_op(value, Op::Relu { input }))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let value = self.value(input).map(|v| {
            // Split on sign so exp never overflows.
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        Ok(self.push_op(value, Op::Sigmoid { input }))
    }

    /// Inverted dropout: train mode zeroes each element with probability
    /// `rate` and scales survivors by `1 / (1 - rate)`. Infer mode and
    /// `rate == 0` return `input` unchanged without recording anything.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        self.check(input)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::contract(
                "dropout",
                format!("rate must lie in [0, 1), got {rate}"),
            ));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push_op(value, Op::Dropout { input, mask }))
    }

    /// Channel-wise concatenation of NCHW tensors sharing N, H and W.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::contract("concat_channels", "no inputs"))?;
        for &v in inputs {
            self.check(v)?;
        }
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut total_c = 0;
        for &v in inputs {
            let t = self.value(v);
            let (vn, vc, vh, vw) = t.dims4("concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::mismatch(
                    "concat_channels",
                    self.value(first).shape(),
                    t.shape(),
                ));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let value = Tensor::from_parts(vec![n, total_c, h, w], out);
        Ok(self.push_op(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// `input (N×D) · weight (D×O) + bias (O)`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, d) = match *x.shape() {
            [n, d] => (n, d),
            _ => return Err(TensorError::contract("fully_connected", format!("input must be N×D, got {:?}", x.shape()))),
        };
        let o = match *wt.shape() {
            [wd, o] if wd == d => o,
            _ => return Err(TensorError::mismatch("fully_connected", x.shape(), wt.shape())),
        };
        if b.numel() != o {
            return Err(TensorError::mismatch("fully_connected", wt.shape(), b.shape()));
        }
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        T::gemm(n, d, o, T::one(), x.data(), false, wt.data(), false, T::one(), &mut out);
        let value = Tensor::from_parts(vec![n, o], out);
        Ok(self.push_op(
            value,
            Op::FullyConnected {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let value = x.reshape(shape).map_err(|_| TensorError::mismatch("reshape", x.shape(), shape))?;
        Ok(self.push_op(value, Op::Reshape { input }))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.check(lhs)?;
        self.check(rhs)?;
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(TensorError::mismatch("mul", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts(a.shape().to_vec(), out);
        Ok(self.push_op(value, Op::Mul { lhs, rhs }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.check(input)?;
        let value = self.value(input).map(|v| v * factor);
        Ok(self.push_op(value, Op::Scale { input, factor }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let value = Tensor::scalar(self.value(input).sum());
        Ok(self.push_op(value, Op::Sum { input }))
    }

    /// Mean binary cross-entropy (natural log) between probabilities and a
    /// same-shaped target. Averaging over every element of a batch of
    /// equal-sized patches equals the mean of the per-patch losses.
    ///
    /// The clamp is treated as straight-through in the backward pass so a
    /// saturated sigmoid still receives a corrective gradient.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.check(pred)?;
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(TensorError::mismatch("bce", p.shape(), target.shape()));
        }
        let lo = T::lit(BCE_CLAMP);
        let hi = T::one() - lo;
        let mut acc = T::zero();
        for (&pv, &t) in p.data().iter().zip(target.data()) {
            let pc = pv.max(lo).min(hi);
            acc = acc + t * pc.ln() + (T::one() - t) * (T::one() - pc).ln();
        }
        let loss = -acc / T::from_usize(p.numel()).unwrap();
        let value = Tensor::scalar(loss);
        Ok(self.push_op(
            value,
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Reverse-mode pass from a scalar `output`. Gradients are accumulated
    /// additively, so a node consumed by several operations receives the sum
    /// of their contributions.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        self.check(output)?;
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("output must be scalar, got shape {:?}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::from_parts(out.shape().to_vec(), vec![T::one()]));
        let mut visited = 0;
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backward_node(node, &g, &mut grads);
        }
        // Only leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (dx, dk) = conv::backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    self.wants(*input),
                    self.wants(*kernel),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, like(*input, dx));
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, like(*kernel, dk));
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                let dx = pool::max2x2_backward(g.data(), argmax, self.value(*input).numel());
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::AvgPool2x2 { input } => {
                let s = self.value(*input).shape();
                let dx = pool::avg2x2_backward(g.data(), s[0] * s[1], s[2], s[3]);
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.value(*input).shape();
                let (dx, dg, db) = norm::backward(
                    g.data(),
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    (s[0], s[1], s[2] * s[3]),
                    *batch_stats,
                );
                self.accumulate(grads, *input, like(*input, dx));
                self.accumulate(grads, *gamma, like(*gamma, dg));
                self.accumulate(grads, *beta, like(*beta, db));
            }
            Op::Relu { input } => {
                let dx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::Sigmoid { input } => {
                let dx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::Dropout { input, mask } => {
                let dx = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::Concat { inputs } => {
                let s = node.value.shape();
                let (n, total_c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    if self.wants(v) {
                        let mut dx = Vec::with_capacity(n * c * hw);
                        for smp in 0..n {
                            let start = (smp * total_c + offset) * hw;
                            dx.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        self.accumulate(grads, v, like(v, dx));
                    }
                    offset += c;
                }
            }
            Op::FullyConnected {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let o = wt.shape()[1];
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(n, o, d, T::one(), g.data(), false, wt.data(), true, T::zero(), &mut dx);
                    self.accumulate(grads, *input, like(*input, dx));
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); d * o];
                    T::gemm(d, n, o, T::one(), x.data(), true, g.data(), false, T::zero(), &mut dw);
                    self.accumulate(grads, *weight, like(*weight, dw));
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (acc, &gv) in db.iter_mut().zip(row) {
                            *acc = *acc + gv;
                        }
                    }
                    self.accumulate(grads, *bias, like(*bias, db));
                }
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, like(*input, g.data().to_vec()));
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(*lhs), self.value(*rhs));
                if self.wants(*lhs) {
                    let d = g.data().iter().zip(b.data()).map(|(&gv, &y)| gv * y).collect();
                    self.accumulate(grads, *lhs, like(*lhs, d));
                }
                if self.wants(*rhs) {
                    let d = g.data().iter().zip(a.data()).map(|(&gv, &x)| gv * x).collect();
                    self.accumulate(grads, *rhs, like(*rhs, d));
                }
            }
            Op::Scale { input, factor } => {
                let dx = g.data().iter().map(|&gv| gv * *factor).collect();
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                self.accumulate(grads, *input, like(*input, vec![g.data()[0]; n]));
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred);
                let lo = T::lit(BCE_CLAMP);
                let hi = T::one() - lo;
                let scale = g.data()[0] / T::from_usize(p.numel()).unwrap();
                let dx = p
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&pv, &t)| {
                        let pc = pv.max(lo).min(hi);
                        scale * (pc - t) / (pc * (T::one() - pc))
                    })
                    .collect();
                self.accumulate(grads, *pred, like(*pred, dx));
            }
        }
    }
}

//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every operation in execution order, so node indices are
//! already a topological order and backward is a single reverse sweep. Nodes
//! whose inputs never require gradients are recorded as constants and skipped
//! during the sweep; this is how frozen parameters cost nothing in backward.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::loss;
use crate::ops::{self, BatchNormConfig, BatchNormStats, ConvGeometry};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Training or inference behaviour for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Backward rule of a user-defined op: receives the op's inputs, its output and
/// the upstream gradient, returns one gradient buffer per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    ConcatChannels { a: Var, b: Var },
    Conv2d { input: Var, filter: Var, bias: Option<Var>, geom: ConvGeometry },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { input: Var },
    AvgPool2 { input: Var },
    GlobalAvgPool { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    Softmax { input: Var },
    Dropout { input: Var, mask: Vec<T> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { input: Var },
    WeightedSum { input: Var, weights: Tensor<T> },
    ProbFocal { probs: Var, labels: Vec<usize>, alpha: T, gamma: T },
    SoftmaxFocal { logits: Var, labels: Vec<usize>, probs: Vec<T>, alpha: T, gamma: T },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// The computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs keep no backward state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Channel-wise concatenation of two `(B, H, W, ·)` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ha, wa, ca) = self.value(a).dims4("concat_channels")?;
        let (bb, hb, wb, cb) = self.value(b).dims4("concat_channels")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(shape_err(
                "concat_channels",
                format!("{:?} and {:?} differ outside the channel axis", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = ops::concat_channels_forward(self.value(a).data(), ca, self.value(b).data(), cb);
        let value = Tensor::from_parts(vec![ba, ha, wa, ca + cb], out);
        Ok(self.push(value, Op::ConcatChannels { a, b }, &[a, b]))
    }

    /// 2-D cross-correlation of a `(B, H, W, Cin)` input with a
    /// `(kH, kW, Cin, Cout)` filter, plus an optional `(Cout)` bias.
    pub fn conv2d(&mut self, input: Var, filter: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input).dims4("conv2d")?;
        let f = self.value(filter).dims4("conv2d")?;
        let geom = ConvGeometry::new([x.0, x.1, x.2, x.3], [f.0, f.1, f.2, f.3], stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.out_channels] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.value(b).shape(), geom.out_channels),
                ));
            }
        }
        let out = ops::conv2d_forward(
            self.value(input).data(),
            self.value(filter).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_parts(vec![geom.batch, geom.out_height, geom.out_width, geom.out_channels], out);
        let mut inputs = vec![input, filter];
        inputs.extend(bias);
        Ok(self.push(value, Op::Conv2d { input, filter, bias, geom }, &inputs))
    }

    /// Per-channel batch normalization over every axis but the last.
    ///
    /// Training mode normalizes with batch statistics and folds them into
    /// `stats`; eval mode uses `stats` and fails if it was never populated.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let channels = *shape.last().unwrap();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [channels] {
                return Err(shape_err("batch_norm", format!("{name} shape {:?}, expected [{channels}]", self.value(v).shape())));
            }
        }
        if stats.channels() != channels {
            return Err(shape_err("batch_norm", format!("running stats for {} channels, input has {channels}", stats.channels())));
        }
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let fwd = match mode {
            Mode::Train => ops::batch_norm_train(x, channels, g, b, stats, cfg)?,
            Mode::Eval => ops::batch_norm_eval(x, channels, g, b, stats, cfg)?,
        };
        let value = Tensor::from_parts(shape, fwd.out);
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat: fwd.xhat,
            inv_std: fwd.inv_std,
            batch_stats: mode == Mode::Train,
        };
        Ok(self.push(value, op, &[input, gamma, beta]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu { input }, &[input])
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool_2x2(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4("avg_pool_2x2")?;
        if dims.1 % 2 != 0 || dims.2 % 2 != 0 {
            return Err(shape_err("avg_pool_2x2", format!("spatial size {}x{} is not even", dims.1, dims.2)));
        }
        let out = ops::avg_pool_2x2_forward(self.value(input).data(), dims);
        let value = Tensor::from_parts(vec![dims.0, dims.1 / 2, dims.2 / 2, dims.3], out);
        Ok(self.push(value, Op::AvgPool2 { input }, &[input]))
    }

    /// Spatial mean per channel: `(B, H, W, C) -> (B, C)`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4("global_avg_pool")?;
        let out = ops::global_avg_pool_forward(self.value(input).data(), dims);
        let value = Tensor::from_parts(vec![dims.0, dims.3], out);
        Ok(self.push(value, Op::GlobalAvgPool { input }, &[input]))
    }

    /// `input (B, F) · weight (F, K) + bias (K)`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (rows, fin) = self.value(input).dims2("fully_connected")?;
        let (wf, fout) = self.value(weight).dims2("fully_connected")?;
        if wf != fin || self.value(bias).shape() != [fout] {
            return Err(shape_err(
                "fully_connected",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.value(input).shape(),
                    self.value(weight).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let out = ops::linear_forward(self.value(input).data(), self.value(weight).data(), self.value(bias).data(), rows, fin, fout);
        let value = Tensor::from_parts(vec![rows, fout], out);
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    /// Row-wise softmax of a `(B, K)` tensor.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let (_, k) = self.value(logits).dims2("softmax")?;
        let out = ops::softmax_rows(self.value(logits).data(), k);
        let value = Tensor::from_parts(self.value(logits).shape().to_vec(), out);
        Ok(self.push(value, Op::Softmax { input: logits }, &[logits]))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(input).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let out: Vec<T> = self.value(input).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::from_parts(self.value(input).shape().to_vec(), out);
        Ok(self.push(value, Op::Dropout { input, mask }, &[input]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), out);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), out);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum { input }, &[input])
    }

    /// `sum(input ⊙ weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(input).shape() {
            return Err(shape_err("weighted_sum", format!("{:?} vs {:?}", weights.shape(), self.value(input).shape())));
        }
        let s = self.value(input).data().iter().zip(weights.data()).map(|(&x, &w)| x * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, weights }, &[input]))
    }

    /// Mean cross-entropy of a probability matrix against class labels.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        self.focal_multiclass(probs, labels, 1.0, 0.0)
    }

    /// Mean multi-class focal loss of a probability matrix against class labels.
    pub fn focal_multiclass(&mut self, probs: Var, labels: &[usize], alpha: f64, gamma: f64) -> Result<Var> {
        let (_, k) = self.value(probs).dims2("focal_multiclass")?;
        let (alpha, gamma) = (T::from_f64(alpha), T::from_f64(gamma));
        let l = if gamma == T::zero() && alpha == T::one() {
            loss::cross_entropy(self.value(probs).data(), k, labels)?
        } else {
            loss::focal_multiclass(self.value(probs).data(), k, labels, alpha, gamma)?
        };
        let op = Op::ProbFocal { probs, labels: labels.to_vec(), alpha, gamma };
        Ok(self.push(Tensor::scalar(l), op, &[probs]))
    }

    /// Fused softmax + mean cross-entropy on a `(B, K)` logit matrix.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.softmax_focal(logits, labels, 1.0, 0.0)
    }

    /// Fused softmax + mean multi-class focal loss on a `(B, K)` logit matrix.
    pub fn softmax_focal(&mut self, logits: Var, labels: &[usize], alpha: f64, gamma: f64) -> Result<Var> {
        let (_, k) = self.value(logits).dims2("softmax_focal")?;
        let probs = ops::softmax_rows(self.value(logits).data(), k);
        let (alpha, gamma) = (T::from_f64(alpha), T::from_f64(gamma));
        let l = if gamma == T::zero() && alpha == T::one() {
            loss::cross_entropy(&probs, k, labels)?
        } else {
            loss::focal_multiclass(&probs, k, labels, alpha, gamma)?
        };
        let op = Op::SoftmaxFocal { logits, labels: labels.to_vec(), probs, alpha, gamma };
        Ok(self.push(Tensor::scalar(l), op, &[logits]))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, backward: CustomBackward<T>) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), backward }, inputs)
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let shape = self.value(loss).shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            backprop_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// `None` if `v` does not require a gradient; zeros if it does but the
    /// loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let val = |v: &Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::ConcatChannels { a, b } => {
            let ca = *val(a).shape().last().unwrap();
            let cb = *val(b).shape().last().unwrap();
            let (ga, gb) = ops::concat_channels_backward(g, ca, cb);
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Conv2d { input, filter, bias, geom } => {
            let want = [needs(input), needs(filter), bias.as_ref().is_some_and(needs)];
            let cg = ops::conv2d_backward(val(input).data(), val(filter).data(), g, geom, want);
            if let Some(d) = cg.input {
                accumulate(nodes, grads, *input, d);
            }
            if let Some(d) = cg.filter {
                accumulate(nodes, grads, *filter, d);
            }
            if let (Some(b), Some(d)) = (bias, cg.bias) {
                accumulate(nodes, grads, *b, d);
            }
        }
        Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
            let bg = ops::batch_norm_backward(g, xhat, inv_std, val(gamma).data(), *batch_stats);
            accumulate(nodes, grads, *input, bg.input);
            accumulate(nodes, grads, *gamma, bg.gamma);
            accumulate(nodes, grads, *beta, bg.beta);
        }
        Op::Relu { input } => {
            let d = val(input).data().iter().zip(g).map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() }).collect();
            accumulate(nodes, grads, *input, d);
        }
        Op::AvgPool2 { input } => {
            let dims = val(input).dims4("avg_pool_2x2").expect("checked in forward");
            accumulate(nodes, grads, *input, ops::avg_pool_2x2_backward(g, dims));
        }
        Op::GlobalAvgPool { input } => {
            let dims = val(input).dims4("global_avg_pool").expect("checked in forward");
            accumulate(nodes, grads, *input, ops::global_avg_pool_backward(g, dims));
        }
        Op::Linear { input, weight, bias } => {
            let (rows, fin) = val(input).dims2("fully_connected").expect("checked in forward");
            let fout = val(bias).len();
            if needs(input) {
                let mut dx = vec![T::zero(); rows * fin];
                T::gemm(rows, fout, fin, T::one(), g, fout as isize, 1, val(weight).data(), 1, fout as isize, T::zero(), &mut dx, fin as isize, 1);
                accumulate(nodes, grads, *input, dx);
            }
            if needs(weight) {
                let mut dw = vec![T::zero(); fin * fout];
                T::gemm(fin, rows, fout, T::one(), val(input).data(), 1, fin as isize, g, fout as isize, 1, T::zero(), &mut dw, fout as isize, 1);
                accumulate(nodes, grads, *weight, dw);
            }
            if needs(bias) {
                let mut db = vec![T::zero(); fout];
                for row in g.chunks_exact(fout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(nodes, grads, *bias, db);
            }
        }
        Op::Softmax { input } => {
            let k = *val(input).shape().last().unwrap();
            accumulate(nodes, grads, *input, ops::softmax_backward(nodes[i].value.data(), g, k));
        }
        Op::Dropout { input, mask } => {
            accumulate(nodes, grads, *input, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Mul { a, b } => {
            let (va, vb) = (val(a).data(), val(b).data());
            accumulate(nodes, grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
            accumulate(nodes, grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
        }
        Op::Sum { input } => {
            accumulate(nodes, grads, *input, vec![g[0]; val(input).len()]);
        }
        Op::WeightedSum { input, weights } => {
            accumulate(nodes, grads, *input, weights.data().iter().map(|&w| w * g[0]).collect());
        }
        Op::ProbFocal { probs, labels, alpha, gamma } => {
            let k = *val(probs).shape().last().unwrap();
            let d = loss::focal_grad_probs(val(probs).data(), k, labels, *alpha, *gamma);
            accumulate(nodes, grads, *probs, d.into_iter().map(|x| x * g[0]).collect());
        }
        Op::SoftmaxFocal { logits, labels, probs, alpha, gamma } => {
            let k = *val(logits).shape().last().unwrap();
            let d = loss::focal_grad_logits(probs, k, labels, *alpha, *gamma);
            accumulate(nodes, grads, *logits, d.into_iter().map(|x| x * g[0]).collect());
        }
        Op::Custom { inputs, backward } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
            for (v, d) in inputs.iter().zip(backward(&ins, &nodes[i].value, g)) {
                accumulate(nodes, grads, *v, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn concat_places_channels_and_splits_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[1, 2, 2, 1]));
        let b = g.param(Tensor::ones(&[1, 2, 2, 1]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 2, 2, 2]);
        for px in g.value(c).data().chunks(2) {
            assert_eq!(px, &[0.0, 1.0]);
        }
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn concat_shapes_and_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[1, 24, 24, 160]));
        let b = g.constant(Tensor::zeros(&[1, 24, 24, 160]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 24, 24, 320]);
        let d = g.constant(Tensor::zeros(&[1, 12, 24, 160]));
        assert!(matches!(g.concat_channels(a, d), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let mut g = Graph::<f64>::new();
        let xa = t(&[1, 2, 1, 2], vec![0.1, -2.0, 3.5, 1e-7]);
        let xb = t(&[1, 2, 1, 3], vec![9.0, 8.0, 7.0, -6.0, 5.0, 4.0]);
        let a = g.constant(xa.clone());
        let b = g.constant(xb.clone());
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).slice_channels(0, 2).unwrap(), xa);
        assert_eq!(g.value(c).slice_channels(2, 5).unwrap(), xb);
    }

    #[test]
    fn conv_fusion_shape_and_constant_field() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 24, 24, 320]));
        let f = g.constant(Tensor::zeros(&[1, 1, 320, 160]));
        let y = g.conv2d(x, f, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 24, 24, 160]);

        let x = g.constant(Tensor::ones(&[1, 3, 3, 1]));
        let f = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let b = g.constant(Tensor::full(&[1], 0.5));
        let y = g.conv2d(x, f, Some(b), 1, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 4, 2]));
        let f = g.constant(Tensor::zeros(&[3, 3, 3, 1]));
        assert!(g.conv2d(x, f, None, 1, 1).is_err());
        let f = g.constant(Tensor::zeros(&[3, 3, 2, 1]));
        assert!(g.conv2d(x, f, None, 2, 0).is_err());
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(g.conv2d(x, f, Some(b), 1, 1).is_err());
    }

    #[test]
    fn batch_norm_symmetric_and_collapsed_cases() {
        let cfg = BatchNormConfig::default();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 1, 1, 1], vec![-1.0, 1.0]));
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::zeros(&[1]));
        let mut stats = BatchNormStats::new(1);
        let y = g.batch_norm(x, gamma, beta, &mut stats, Mode::Train, cfg).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] + expected).abs() < 1e-12);
        assert!((g.value(y).data()[1] - expected).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-5);
        assert_eq!(stats.updates, 1);

        let x = g.constant(t(&[2, 1, 1, 2], vec![3.0, -1.0, 0.5, 4.0]));
        let gamma = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(t(&[2], vec![0.25, -7.0]));
        let mut stats = BatchNormStats::new(2);
        let y = g.batch_norm(x, gamma, beta, &mut stats, Mode::Train, cfg).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -7.0, 0.25, -7.0]);
    }

    #[test]
    fn batch_norm_eval_requires_running_stats() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 2, 2, 3]));
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let mut stats = BatchNormStats::new(3);
        let r = g.batch_norm(x, gamma, beta, &mut stats, Mode::Eval, BatchNormConfig::default());
        assert!(matches!(r, Err(Error::BatchNormNotReady)));
    }

    #[test]
    fn batch_norm_train_needs_two_values_per_channel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 1, 3]));
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let mut stats = BatchNormStats::new(3);
        assert!(g.batch_norm(x, gamma, beta, &mut stats, Mode::Train, BatchNormConfig::default()).is_err());
    }

    #[test]
    fn batch_norm_running_stats_momentum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::zeros(&[1]));
        let mut stats = BatchNormStats::new(1);
        g.batch_norm(x, gamma, beta, &mut stats, Mode::Train, BatchNormConfig::default()).unwrap();
        assert!((stats.mean[0] - 0.25).abs() < 1e-12);
        // unbiased batch variance 5/3, blended with the initial 1
        assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[4], vec![-1.0, -0.5, -3.0, -1e-9]));
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn avg_pool_window_shape_and_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.avg_pool_2x2(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);

        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 48, 48, 16]));
        let y = g.avg_pool_2x2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 24, 24, 16]);
        let odd = g.constant(Tensor::zeros(&[1, 5, 4, 1]));
        assert!(g.avg_pool_2x2(odd).is_err());
    }

    #[test]
    fn global_avg_pool_constant_shape_and_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1, 3, 4, 2], 1.75));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.75, 1.75]);
        let s = g.weighted_sum(y, t(&[1, 2], vec![12.0, -24.0])).unwrap();
        g.backward(s).unwrap();
        for px in g.grad(x).unwrap().data().chunks(2) {
            assert_eq!(px, &[1.0, -2.0]);
        }
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 12, 12, 232]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 232]);
    }

    #[test]
    fn fully_connected_identity_and_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], vec![0.5, -1.0, 2.0]));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.constant(t(&[3, 3], eye));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.fully_connected(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0]);

        let x = g.constant(Tensor::zeros(&[1, 232]));
        let w = g.constant(Tensor::zeros(&[232, 6]));
        let b = g.constant(Tensor::zeros(&[6]));
        let y = g.fully_connected(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 6]);
        let w_bad = g.constant(Tensor::zeros(&[231, 6]));
        assert!(g.fully_connected(x, w_bad, b).is_err());
    }

    #[test]
    fn softmax_uniform_stable_and_shift_invariant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let p = g.softmax(x).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[1, 2], vec![1000.0, 0.0]));
        let p = g.softmax(x).unwrap();
        let v = g.value(p).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);

        let raw = vec![0.3, -1.2, 2.5, 0.0, 4.0, -3.0];
        let shifted: Vec<f64> = raw.iter().map(|x| x + 17.25).collect();
        let a = g.constant(t(&[2, 3], raw));
        let b = g.constant(t(&[2, 3], shifted));
        let pa = g.softmax(a).unwrap();
        let pb = g.softmax(b).unwrap();
        assert!(g.value(pa).max_abs_diff(g.value(pb)) <= 1e-12);
        for row in g.value(pa).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dropout_modes_and_rate_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[4], vec![1.0, 2.0, 3.0, 4.0]).cast());
        let y = g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let y = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());

        let ones = g.constant(Tensor::ones(&[100_000]));
        let y = g.dropout(ones, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = g.value(y).data().iter().map(|&v| v as f64).sum::<f64>() / 1e5;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[3]).map(|v| v * 5.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_repeats_and_non_scalars() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardAlreadyRun)));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn unreachable_leaves_get_zero_grad_and_constants_none() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], vec![1.0, 2.0]));
        let unused = g.param(t(&[3], vec![1.0, 2.0, 3.0]));
        let c = g.constant(t(&[2], vec![4.0, 5.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0; 3]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn fused_cross_entropy_gradient_at_zero_logits() {
        for batch in [1usize, 4] {
            let mut g = Graph::<f64>::new();
            let z = g.param(Tensor::zeros(&[batch, 2]));
            let l = g.softmax_cross_entropy(z, &vec![0; batch]).unwrap();
            assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
            g.backward(l).unwrap();
            let b = batch as f64;
            for row in g.grad(z).unwrap().data().chunks(2) {
                assert!((row[0] + 0.5 / b).abs() < 1e-15);
                assert!((row[1] - 0.5 / b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fused_and_composed_losses_agree() {
        let logits = t(&[3, 4], (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.7).collect());
        let labels = [1, 3, 0];
        for (alpha, gamma) in [(1.0, 0.0), (0.1, 15.0), (0.5, 2.0)] {
            let mut g1 = Graph::<f64>::new();
            let z1 = g1.param(logits.clone());
            let l1 = g1.softmax_focal(z1, &labels, alpha, gamma).unwrap();
            g1.backward(l1).unwrap();

            let mut g2 = Graph::<f64>::new();
            let z2 = g2.param(logits.clone());
            let p = g2.softmax(z2).unwrap();
            let l2 = g2.focal_multiclass(p, &labels, alpha, gamma).unwrap();
            g2.backward(l2).unwrap();

            assert_eq!(g1.value(l1).item(), g2.value(l2).item());
            let d = g1.grad(z1).unwrap().max_abs_diff(&g2.grad(z2).unwrap());
            assert!(d < 1e-14, "alpha {alpha} gamma {gamma}: {d}");
        }
    }

    #[test]
    fn frozen_inputs_are_skipped() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 3, 3, 1]));
        let w = g.constant(Tensor::ones(&[3, 3, 1, 1]));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert!(!g.requires_grad(y));
        let head = g.param(Tensor::ones(&[1, 3, 3, 1]));
        let z = g.mul(y, head).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(head).unwrap().data(), g.value(y).data());
    }
}

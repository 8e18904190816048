//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each operation executes eagerly, appends a node holding its output and
//! whatever the backward rule needs, and returns a [`Var`] handle. Calling
//! [`Tape::backward`] on a scalar node replays the tape in reverse, visiting
//! every recorded operation exactly once and accumulating gradients
//! additively into every `requires_grad` node reachable from the loss.
//!
//! A tape and its nodes form one single-threaded execution context;
//! independent contexts (one per worker) may run in parallel.

use crate::error::{Error, Result};
use crate::kernels::bn::{self, BnBatchStats, BnMode};
use crate::kernels::conv::{self, ConvDims};
use crate::kernels::linear;
use crate::kernels::loss;
use crate::kernels::pool::{self, PoolDims};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    BatchNorm2d {
        input: Var,
        gamma: Var,
        beta: Var,
        norm_mean: Vec<T>,
        norm_inv_std: Vec<T>,
        through_batch_stats: bool,
        channels: usize,
        plane: usize,
        batch: usize,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        plane: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        batch: usize,
        in_f: usize,
        out_f: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        batch: usize,
        classes: usize,
    },
    L1DistanceSum {
        a: Var,
        b: Var,
    },
    SqL2Norm {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    TvLoss {
        input: Var,
        batch: usize,
        channels: usize,
        h: usize,
        w: usize,
    },
    BnStatsLoss {
        input: Var,
        target_mean: Vec<T>,
        target_var: Vec<T>,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
        channels: usize,
        plane: usize,
        batch: usize,
    },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Ordered record of executed operations plus their saved activations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node and saved activation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, shape, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape node is consistent")
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Insert a tensor as a leaf, honoring its requires_grad flag.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.data().to_vec(), tensor.shape().to_vec(), tensor.requires_grad(), Op::Leaf)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, false, Op::Leaf)
    }

    pub fn leaf_from_parts(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    // ── Operators ────────────────────────────────────────────────────

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let dims = ConvDims::compute(self.shape(input), self.shape(weight), stride, padding).ok_or_else(|| {
            Error::shape(format!(
                "conv2d: input {:?} incompatible with weight {:?} (stride {stride}, padding {padding})",
                self.shape(input),
                self.shape(weight)
            ))
        })?;
        if let Some(b) = bias {
            if self.shape(b) != [dims.c_out] {
                return Err(Error::shape(format!(
                    "conv2d: bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    dims.c_out
                )));
            }
        }
        let out = conv::forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &dims,
        );
        let shape = vec![dims.batch, dims.c_out, dims.h_out, dims.w_out];
        let req = self.requires(input) || self.requires(weight) || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(out, shape, req, Op::Conv2d { input, weight, bias, dims }))
    }

    /// Batch normalization. Returns the output node and, in train and
    /// synthesis modes, the batch statistics together with the updated
    /// running buffers (the caller owns running-state mutation).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        mode: BnMode,
        momentum_bn: T,
        eps: T,
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("batchnorm2d: expected 4-D input, got {shape:?}")));
        }
        let (batch, channels, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        if plane == 0 {
            return Err(Error::shape("batchnorm2d: zero spatial extent".to_string()));
        }
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] || running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::shape(format!(
                "batchnorm2d: parameter length mismatch for {channels} channels"
            )));
        }
        if eps <= T::zero() {
            return Err(Error::config("batchnorm2d: eps must be positive".to_string()));
        }
        if mode == BnMode::Train && batch * plane < 2 {
            return Err(Error::shape("batchnorm2d: train mode needs B*H*W >= 2".to_string()));
        }
        let fwd = bn::forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            mode,
            momentum_bn,
            eps,
            channels,
            plane,
            batch,
        );
        let req = self.requires(input) || self.requires(gamma) || self.requires(beta);
        let var = self.push(
            fwd.output,
            shape,
            req,
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                norm_mean: fwd.norm_mean,
                norm_inv_std: fwd.norm_inv_std,
                through_batch_stats: mode == BnMode::Train,
                channels,
                plane,
                batch,
            },
        );
        Ok((var, fwd.batch_stats))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out: Vec<T> = self.value(input).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(input).to_vec();
        let req = self.requires(input);
        self.push(out, shape, req, Op::Relu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, shape, req, Op::Add { a, b }))
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let dims = PoolDims::compute(self.shape(input), kernel, stride).ok_or_else(|| {
            Error::shape(format!(
                "maxpool2d: input {:?} incompatible with kernel {kernel}, stride {stride}",
                self.shape(input)
            ))
        })?;
        let (out, argmax) = pool::maxpool_forward(self.value(input), &dims);
        let shape = vec![dims.batch, dims.channels, dims.h_out, dims.w_out];
        let req = self.requires(input);
        Ok(self.push(out, shape, req, Op::MaxPool2d { input, argmax }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 || shape[2] * shape[3] == 0 {
            return Err(Error::shape(format!("global_avg_pool: expected non-empty 4-D input, got {shape:?}")));
        }
        let plane = shape[2] * shape[3];
        let out = pool::global_avg_pool_forward(self.value(input), shape[0], shape[1], plane);
        let req = self.requires(input);
        Ok(self.push(out, vec![shape[0], shape[1]], req, Op::GlobalAvgPool { input, plane }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear: input {xs:?} incompatible with weight {ws:?}")));
        }
        let (batch, in_f, out_f) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [out_f] {
                return Err(Error::shape(format!(
                    "linear: bias shape {:?} does not match {out_f} outputs",
                    self.shape(b)
                )));
            }
        }
        let out = linear::forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)), batch, in_f, out_f);
        let req = self.requires(input) || self.requires(weight) || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(out, vec![batch, out_f], req, Op::Linear { input, weight, bias, batch, in_f, out_f }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("softmax_cross_entropy: expected [B, K] logits, got {shape:?}")));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if labels.len() != batch {
            return Err(Error::shape(format!(
                "softmax_cross_entropy: {} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!("softmax_cross_entropy: label {bad} out of range [0, {classes})")));
        }
        let (loss_v, probs) = loss::softmax_cross_entropy_forward(self.value(logits), labels, batch, classes);
        let req = self.requires(logits);
        Ok(self.push(
            vec![loss_v],
            vec![],
            req,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs, batch, classes },
        ))
    }

    pub fn l1_distance_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "l1_distance_sum: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let v = loss::l1_distance_sum_forward(self.value(a), self.value(b));
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![v], vec![], req, Op::L1DistanceSum { a, b }))
    }

    pub fn sq_l2_norm(&mut self, input: Var) -> Var {
        let v = self.value(input).iter().map(|&x| x * x).sum();
        let req = self.requires(input);
        self.push(vec![v], vec![], req, Op::SqL2Norm { input })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let v = self.value(input).iter().cloned().sum();
        let req = self.requires(input);
        self.push(vec![v], vec![], req, Op::Sum { input })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out: Vec<T> = self.value(input).iter().map(|&v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let req = self.requires(input);
        self.push(out, shape, req, Op::Scale { input, factor })
    }

    pub fn tv_loss(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("tv_loss: expected 4-D image batch, got {shape:?}")));
        }
        let (batch, channels, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h < 2 || w < 2 {
            return Err(Error::shape(format!("tv_loss: spatial dims must be at least 2x2, got {h}x{w}")));
        }
        let v = loss::tv_loss_forward(self.value(input), batch, channels, h, w);
        let req = self.requires(input);
        Ok(self.push(vec![v], vec![], req, Op::TvLoss { input, batch, channels, h, w }))
    }

    /// Statistics-matching loss between the batch statistics of a 4-D
    /// activation and fixed per-channel targets.
    pub fn bn_stats_loss(&mut self, input: Var, target_mean: &[T], target_var: &[T]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("bn_stats_loss: expected 4-D input, got {shape:?}")));
        }
        let (batch, channels, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if target_mean.len() != channels || target_var.len() != channels {
            return Err(Error::shape(format!("bn_stats_loss: target length mismatch for {channels} channels")));
        }
        let plane = h * w;
        if batch * plane == 0 {
            return Err(Error::shape("bn_stats_loss: empty input".to_string()));
        }
        let fwd = loss::bn_stats_loss_forward(self.value(input), target_mean, target_var, channels, plane, batch);
        let req = self.requires(input);
        Ok(self.push(
            vec![fwd.loss],
            vec![],
            req,
            Op::BnStatsLoss {
                input,
                target_mean: target_mean.to_vec(),
                target_var: target_var.to_vec(),
                batch_mean: fwd.batch_mean,
                batch_var: fwd.batch_var,
                channels,
                plane,
                batch,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, grad: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            }
            None => node.grad = Some(grad.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// into every requires_grad node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::graph("backward: empty tape".to_string()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = match self.nodes[idx].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            // Leaf nodes keep their gradient; everything else propagates.
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Conv2d { input, weight, bias, dims } => {
                    let (input, weight, bias, dims) = (*input, *weight, *bias, *dims);
                    if self.requires(input) {
                        let gi = conv::backward_input(&grad, self.value(weight), &dims);
                        self.accumulate(input, &gi);
                    }
                    if self.requires(weight) {
                        let gw = conv::backward_weight(&grad, self.value(input), &dims);
                        self.accumulate(weight, &gw);
                    }
                    if let Some(b) = bias {
                        if self.requires(b) {
                            let gb = conv::backward_bias(&grad, &dims);
                            self.accumulate(b, &gb);
                        }
                    }
                }
                Op::BatchNorm2d {
                    input,
                    gamma,
                    beta,
                    norm_mean,
                    norm_inv_std,
                    through_batch_stats,
                    channels,
                    plane,
                    batch,
                } => {
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    let (channels, plane, batch, through) = (*channels, *plane, *batch, *through_batch_stats);
                    let norm_mean = norm_mean.clone();
                    let norm_inv_std = norm_inv_std.clone();
                    let grads = bn::backward(
                        &grad,
                        self.value(input),
                        self.value(gamma),
                        &norm_mean,
                        &norm_inv_std,
                        through,
                        channels,
                        plane,
                        batch,
                    );
                    if self.requires(input) {
                        self.accumulate(input, &grads.grad_input);
                    }
                    if self.requires(gamma) {
                        self.accumulate(gamma, &grads.grad_gamma);
                    }
                    if self.requires(beta) {
                        self.accumulate(beta, &grads.grad_beta);
                    }
                }
                Op::Relu { input } => {
                    let input = *input;
                    // subgradient 0 at 0
                    let gi: Vec<T> = self.value(input)
                        .iter()
                        .zip(&grad)
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    self.accumulate(input, &gi);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::MaxPool2d { input, argmax } => {
                    let input = *input;
                    let argmax = argmax.clone();
                    let gi = pool::maxpool_backward(&grad, &argmax, self.value(input).len());
                    self.accumulate(input, &gi);
                }
                Op::GlobalAvgPool { input, plane } => {
                    let (input, plane) = (*input, *plane);
                    let gi = pool::global_avg_pool_backward(&grad, plane);
                    self.accumulate(input, &gi);
                }
                Op::Linear { input, weight, bias, batch, in_f, out_f } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let (batch, in_f, out_f) = (*batch, *in_f, *out_f);
                    if self.requires(input) {
                        let gi = linear::backward_input(&grad, self.value(weight), batch, in_f, out_f);
                        self.accumulate(input, &gi);
                    }
                    if self.requires(weight) {
                        let gw = linear::backward_weight(&grad, self.value(input), batch, in_f, out_f);
                        self.accumulate(weight, &gw);
                    }
                    if let Some(b) = bias {
                        if self.requires(b) {
                            let gb = linear::backward_bias(&grad, batch, out_f);
                            self.accumulate(b, &gb);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs, batch, classes } => {
                    let logits = *logits;
                    let (batch, classes) = (*batch, *classes);
                    let gl = loss::softmax_cross_entropy_backward(grad[0], probs, labels, batch, classes);
                    self.accumulate(logits, &gl);
                }
                Op::L1DistanceSum { a, b } => {
                    let (a, b) = (*a, *b);
                    let (ga, gb) = loss::l1_distance_sum_backward(grad[0], self.value(a), self.value(b));
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::SqL2Norm { input } => {
                    let input = *input;
                    let two = T::from_f64(2.0);
                    let gi: Vec<T> = self.value(input).iter().map(|&x| two * x * grad[0]).collect();
                    self.accumulate(input, &gi);
                }
                Op::Sum { input } => {
                    let input = *input;
                    let gi = vec![grad[0]; self.value(input).len()];
                    self.accumulate(input, &gi);
                }
                Op::Scale { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    let gi: Vec<T> = grad.iter().map(|&g| g * factor).collect();
                    self.accumulate(input, &gi);
                }
                Op::TvLoss { input, batch, channels, h, w } => {
                    let input = *input;
                    let (batch, channels, h, w) = (*batch, *channels, *h, *w);
                    let gi = loss::tv_loss_backward(grad[0], self.value(input), batch, channels, h, w);
                    self.accumulate(input, &gi);
                }
                Op::BnStatsLoss {
                    input,
                    target_mean,
                    target_var,
                    batch_mean,
                    batch_var,
                    channels,
                    plane,
                    batch,
                } => {
                    let input = *input;
                    let (channels, plane, batch) = (*channels, *plane, *batch);
                    let (tm, tv, bm, bv) = (target_mean.clone(), target_var.clone(), batch_mean.clone(), batch_var.clone());
                    let gi = loss::bn_stats_loss_backward(grad[0], self.value(input), &tm, &tv, &bm, &bv, channels, plane, batch);
                    self.accumulate(input, &gi);
                }
            }
        }
        Ok(())
    }

    /// Check a node's value for NaN/Inf; numeric corruption is an error,
    /// never a silent state.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        for &x in self.value(v) {
            if !x.is_finite() {
                return Err(Error::numeric(format!("non-finite value in {context}")));
            }
        }
        Ok(())
    }
}

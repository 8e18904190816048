//! Forward execution of a [`NetworkGraph`] on an autodiff tape.
//!
//! One execution = one tape. Parameters enter the tape as leaves; after a
//! backward pass their gradients are collected back by parameter key. In
//! train mode the batch-norm running statistics are written back into the
//! graph, so train-mode forwards need exclusive access; eval and synthesis
//! forwards never mutate the graph and may share it across workers.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph, INPUT_ID};
use crate::kernels::bn::BnMode;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which parameter leaves are marked for gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    None,
    Backbone,
    All,
}

#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub bn_mode: BnMode,
    pub capture_taps: bool,
    /// Stop after the backbone boundary layer (the head is not executed).
    pub upto_boundary: bool,
    pub grad_scope: GradScope,
    /// Mark the input leaf for gradients (image synthesis needs pixels).
    pub grad_input: bool,
}

impl ExecOptions {
    pub fn inference() -> Self {
        ExecOptions {
            bn_mode: BnMode::Eval,
            capture_taps: false,
            upto_boundary: false,
            grad_scope: GradScope::None,
            grad_input: false,
        }
    }

    pub fn train() -> Self {
        ExecOptions {
            bn_mode: BnMode::Train,
            capture_taps: false,
            upto_boundary: false,
            grad_scope: GradScope::All,
            grad_input: false,
        }
    }

    pub fn distill_student() -> Self {
        ExecOptions {
            bn_mode: BnMode::Eval,
            capture_taps: true,
            upto_boundary: true,
            grad_scope: GradScope::Backbone,
            grad_input: false,
        }
    }

    pub fn distill_teacher() -> Self {
        ExecOptions {
            bn_mode: BnMode::Eval,
            capture_taps: true,
            upto_boundary: true,
            grad_scope: GradScope::None,
            grad_input: false,
        }
    }

    pub fn synthesis() -> Self {
        ExecOptions {
            bn_mode: BnMode::Synthesis,
            capture_taps: false,
            upto_boundary: true,
            grad_scope: GradScope::None,
            grad_input: true,
        }
    }
}

/// Result of one forward pass: the tape plus handles into it.
pub struct Execution<T> {
    pub tape: Tape<T>,
    pub input: Var,
    /// Output of the last executed layer (z at the boundary, or y).
    pub output: Var,
    /// Captured taps in topological order, shallowest first, boundary
    /// excluded.
    pub taps: Vec<(String, Var)>,
    /// Per batch-norm layer statistics-matching scalars (synthesis mode).
    pub bn_stat_losses: Vec<(String, Var)>,
    /// Parameter key -> leaf var, for gradient collection.
    pub param_vars: BTreeMap<String, Var>,
}

impl<T: Scalar> Execution<T> {
    pub fn output_tensor(&self) -> Tensor<T> {
        self.tape.value_tensor(self.output)
    }

    /// Collect parameter gradients after a backward pass.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        self.param_vars
            .iter()
            .filter_map(|(key, &var)| self.tape.grad(var).map(|g| (key.clone(), g.to_vec())))
            .collect()
    }

    pub fn input_grad(&self) -> Option<&[T]> {
        self.tape.grad(self.input)
    }
}

impl<T: Scalar> NetworkGraph<T> {
    /// Forward pass that never mutates the graph. Train mode is rejected
    /// here; use [`NetworkGraph::forward_train`].
    pub fn forward(&self, input: &Tensor<T>, opts: &ExecOptions) -> Result<Execution<T>> {
        if opts.bn_mode == BnMode::Train {
            return Err(Error::graph(
                "train-mode forward mutates running statistics; call forward_train".to_string(),
            ));
        }
        let (exec, _) = run_forward(self, input, opts)?;
        Ok(exec)
    }

    /// Train-mode forward; writes updated running statistics back into the
    /// graph (single-writer access required).
    pub fn forward_train(&mut self, input: &Tensor<T>, opts: &ExecOptions) -> Result<Execution<T>> {
        let (exec, updates) = run_forward(self, input, opts)?;
        for (layer_id, mean, var) in updates {
            *self.param_mut(&layer_id, "running_mean")? = Tensor::from_vec(vec![mean.len()], mean)?;
            *self.param_mut(&layer_id, "running_var")? = Tensor::from_vec(vec![var.len()], var)?;
        }
        Ok(exec)
    }

    /// Convenience eval-mode forward returning the network output.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input, &ExecOptions::inference())?.output_tensor())
    }

    /// Run only the head on a boundary feature map.
    pub fn head_forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape: Tape<T> = Tape::new();
        let mut values: HashMap<String, Var> = HashMap::new();
        let boundary = self.backbone_boundary().to_string();
        values.insert(boundary, tape.leaf(z));
        let mut last = *values.values().next().unwrap();
        for layer in self.head_layers() {
            let var = execute_layer(self, &mut tape, layer, &values, GradScope::None, BnMode::Eval, &mut BTreeMap::new())?
                .0;
            values.insert(layer.id.clone(), var);
            last = var;
        }
        Ok(tape.value_tensor(last))
    }
}

type RunningUpdates<T> = Vec<(String, Vec<T>, Vec<T>)>;

fn wants_grad(scope: GradScope, is_backbone: bool) -> bool {
    match scope {
        GradScope::None => false,
        GradScope::Backbone => is_backbone,
        GradScope::All => true,
    }
}

/// Insert a parameter leaf, flagging it for gradients per the scope.
/// Running statistics never get gradients.
fn param_leaf<T: Scalar>(
    graph: &NetworkGraph<T>,
    tape: &mut Tape<T>,
    layer_id: &str,
    name: &str,
    grad: bool,
    param_vars: &mut BTreeMap<String, Var>,
) -> Result<Var> {
    let key = crate::graph::param_key(layer_id, name);
    let tensor = graph.param(layer_id, name)?;
    let var = tape.leaf_from_parts(tensor.shape().to_vec(), tensor.data().to_vec(), grad);
    param_vars.insert(key, var);
    Ok(var)
}

fn execute_layer<T: Scalar>(
    graph: &NetworkGraph<T>,
    tape: &mut Tape<T>,
    layer: &crate::graph::LayerSpec,
    values: &HashMap<String, Var>,
    scope: GradScope,
    bn_mode: BnMode,
    param_vars: &mut BTreeMap<String, Var>,
) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
    let fetch = |id: &str| -> Result<Var> {
        values
            .get(id)
            .copied()
            .ok_or_else(|| Error::graph(format!("layer '{}': input '{id}' not computed", layer.id)))
    };
    let input = fetch(&layer.inputs[0])?;
    let is_backbone = graph
        .backbone_layers()
        .iter()
        .any(|l| l.id == layer.id);
    let grad = wants_grad(scope, is_backbone);

    let with_context = |e: Error| match e {
        Error::Shape(msg) => Error::Shape(format!("layer '{}': {msg}", layer.id)),
        other => other,
    };

    match &layer.kind {
        LayerKind::Conv2d { stride, padding, bias, .. } => {
            let w = param_leaf(graph, tape, &layer.id, "weight", grad, param_vars)?;
            let b = if *bias {
                Some(param_leaf(graph, tape, &layer.id, "bias", grad, param_vars)?)
            } else {
                None
            };
            let out = tape.conv2d(input, w, b, *stride, *padding).map_err(with_context)?;
            Ok((out, None))
        }
        LayerKind::BatchNorm2d { eps, momentum, .. } => {
            let gamma = param_leaf(graph, tape, &layer.id, "gamma", grad, param_vars)?;
            let beta = param_leaf(graph, tape, &layer.id, "beta", grad, param_vars)?;
            let running_mean = graph.param(&layer.id, "running_mean")?.data().to_vec();
            let running_var = graph.param(&layer.id, "running_var")?.data().to_vec();
            let (out, stats) = tape
                .batchnorm2d(
                    input,
                    gamma,
                    beta,
                    &running_mean,
                    &running_var,
                    bn_mode,
                    T::from_f64(*momentum),
                    T::from_f64(*eps),
                )
                .map_err(with_context)?;
            let update = stats
                .filter(|_| bn_mode == BnMode::Train)
                .map(|s| (s.new_running_mean, s.new_running_var));
            Ok((out, update))
        }
        LayerKind::Relu => Ok((tape.relu(input), None)),
        LayerKind::MaxPool2d { kernel, stride } => {
            Ok((tape.maxpool2d(input, *kernel, *stride).map_err(with_context)?, None))
        }
        LayerKind::GlobalAvgPool => Ok((tape.global_avg_pool(input).map_err(with_context)?, None)),
        LayerKind::Linear { bias, .. } => {
            let w = param_leaf(graph, tape, &layer.id, "weight", grad, param_vars)?;
            let b = if *bias {
                Some(param_leaf(graph, tape, &layer.id, "bias", grad, param_vars)?)
            } else {
                None
            };
            let out = tape.linear(input, w, b).map_err(with_context)?;
            Ok((out, None))
        }
        LayerKind::ResidualAdd => {
            let rhs = fetch(&layer.inputs[1])?;
            let out = tape.add(input, rhs).map_err(with_context)?;
            Ok((out, None))
        }
    }
}

fn run_forward<T: Scalar>(
    graph: &NetworkGraph<T>,
    input: &Tensor<T>,
    opts: &ExecOptions,
) -> Result<(Execution<T>, RunningUpdates<T>)> {
    if input.shape().len() != 4 {
        return Err(Error::shape(format!("network input must be [B, C, H, W], got {:?}", input.shape())));
    }
    let mut tape: Tape<T> = Tape::new();
    let input_var = tape.leaf_from_parts(input.shape().to_vec(), input.data().to_vec(), opts.grad_input);

    let mut values: HashMap<String, Var> = HashMap::new();
    values.insert(INPUT_ID.to_string(), input_var);

    let mut taps: Vec<(String, Var)> = Vec::new();
    let mut bn_stat_losses: Vec<(String, Var)> = Vec::new();
    let mut param_vars: BTreeMap<String, Var> = BTreeMap::new();
    let mut running_updates: RunningUpdates<T> = Vec::new();

    let boundary_idx = graph.boundary_index();
    let last_idx = if opts.upto_boundary { boundary_idx } else { graph.layers().len() - 1 };

    let mut output = input_var;
    for layer in &graph.layers()[..=last_idx] {
        // In synthesis mode the statistics-matching term watches the raw
        // batch-norm input against the frozen running statistics.
        if opts.bn_mode == BnMode::Synthesis {
            if let LayerKind::BatchNorm2d { .. } = layer.kind {
                let bn_input = values[&layer.inputs[0]];
                let target_mean = graph.param(&layer.id, "running_mean")?.data().to_vec();
                let target_var = graph.param(&layer.id, "running_var")?.data().to_vec();
                let loss = tape.bn_stats_loss(bn_input, &target_mean, &target_var)?;
                bn_stat_losses.push((layer.id.clone(), loss));
            }
        }

        let (var, update) = execute_layer(graph, &mut tape, layer, &values, opts.grad_scope, opts.bn_mode, &mut param_vars)?;
        if let Some((mean, var_stats)) = update {
            running_updates.push((layer.id.clone(), mean, var_stats));
        }
        values.insert(layer.id.clone(), var);
        output = var;

        if opts.capture_taps && layer.tap && layer.id != graph.backbone_boundary() {
            taps.push((layer.id.clone(), var));
        }
    }

    Ok((
        Execution { tape, input: input_var, output, taps, bn_stat_losses, param_vars },
        running_updates,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_resnet_tiny;
    use crate::rng::rng_from_seed;

    fn random_input(seed: u64, shape: Vec<usize>) -> Tensor<f32> {
        let mut rng = rng_from_seed(seed);
        Tensor::rand_uniform(shape, 0.0, 1.0, &mut rng)
    }

    #[test]
    fn no_capture_means_no_taps() {
        let mut rng = rng_from_seed(0);
        let g = build_resnet_tiny::<f32>(&[8], &[1], 2, &mut rng).unwrap();
        let x = random_input(1, vec![1, 3, 16, 16]);
        let exec = g.forward(&x, &ExecOptions::inference()).unwrap();
        assert!(exec.taps.is_empty());
    }

    #[test]
    fn tap_channels_follow_stage_widths() {
        let mut rng = rng_from_seed(0);
        let g = build_resnet_tiny::<f32>(&[16, 32, 64], &[1, 1, 1], 10, &mut rng).unwrap();
        let x = random_input(2, vec![2, 3, 32, 32]);
        let mut opts = ExecOptions::inference();
        opts.capture_taps = true;
        let exec = g.forward(&x, &opts).unwrap();
        let channels: Vec<usize> = exec.taps.iter().map(|(_, v)| exec.tape.shape(*v)[1]).collect();
        assert_eq!(channels, vec![16, 32, 64]);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let mut rng = rng_from_seed(0);
        let g = build_resnet_tiny::<f32>(&[8, 16], &[1, 1], 4, &mut rng).unwrap();
        let x = random_input(3, vec![2, 3, 16, 16]);
        let a = g.predict(&x).unwrap();
        let b = g.predict(&x). unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn split_forward_equals_full_forward() {
        let mut rng = rng_from_seed(0);
        let g = build_resnet_tiny::<f32>(&[8, 16], &[1, 1], 4, &mut rng).unwrap();
        let x = random_input(4, vec![2, 3, 16, 16]);
        let full = g.predict(&x).unwrap();
        let mut opts = ExecOptions::inference();
        opts.upto_boundary = true;
        let z = g.forward(&x, &opts).unwrap().output_tensor();
        let y = g.head_forward(&z).unwrap();
        for (a, b) in full.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_forward_never_touches_running_stats() {
        let mut rng = rng_from_seed(0);
        let g = build_resnet_tiny::<f32>(&[8], &[1], 2, &mut rng).unwrap();
        let before = crate::hash::tensor_map_hash(g.params());
        let x = random_input(5, vec![2, 3, 16, 16]);
        let _ = g.predict(&x).unwrap();
        assert_eq!(before, crate::hash::tensor_map_hash(g.params()));
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut rng = rng_from_seed(0);
        let mut g = build_resnet_tiny::<f32>(&[8], &[1], 2, &mut rng).unwrap();
        let before = g.param("stem_bn", "running_mean").unwrap().clone();
        let x = random_input(6, vec![4, 3, 16, 16]);
        let _ = g.forward_train(&x, &ExecOptions::train()).unwrap();
        let after = g.param("stem_bn", "running_mean").unwrap();
        assert_ne!(before.data(), after.data());
    }
}

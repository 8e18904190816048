//! Layer-graph representation of backbone + head networks.
//!
//! A [`NetworkGraph`] is a topologically ordered DAG of [`LayerSpec`]s with
//! named parameter tensors and an explicit backbone boundary: everything up
//! to and including the boundary layer is the backbone, everything after it
//! is the task head. Tap-flagged layers mark intermediate feature maps whose
//! shape must survive pruning so they can anchor the distillation loss.

mod build;
mod checkpoint;
mod exec;

pub use build::{build_resnet_tiny, build_vgg_tiny, parse_conv_plan, ConvPlanToken};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use exec::{ExecOptions, Execution, GradScope};

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reserved id that layer inputs use to reference the network input.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm2d {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    ResidualAdd,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm2d { .. } => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Linear { .. } => "linear",
            LayerKind::ResidualAdd => "residual_add",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Predecessor layer ids; graph sources reference [`INPUT_ID`].
    pub inputs: Vec<String>,
    /// Intermediate-loss tap point.
    #[serde(default)]
    pub tap: bool,
    /// Whether the pruner may remove output filters of this layer.
    #[serde(default)]
    pub prunable: bool,
}

/// Execution mode for batch-norm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Serializable architecture: the layer list plus the backbone boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    pub backbone_boundary: String,
}

#[derive(Debug, Clone)]
pub struct NetworkGraph<T> {
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, Tensor<T>>,
    backbone_boundary: String,
    pub mode: Mode,
}

impl<T: Scalar> NetworkGraph<T> {
    /// Build a graph from parts, validating the structural invariants.
    pub fn new(
        layers: Vec<LayerSpec>,
        params: BTreeMap<String, Tensor<T>>,
        backbone_boundary: String,
    ) -> Result<Self> {
        let g = NetworkGraph { layers, params, backbone_boundary, mode: Mode::Eval };
        g.validate()?;
        Ok(g)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Result<&LayerSpec> {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::graph(format!("unknown layer '{id}'")))
    }

    pub fn backbone_boundary(&self) -> &str {
        &self.backbone_boundary
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn param(&self, layer_id: &str, name: &str) -> Result<&Tensor<T>> {
        let key = param_key(layer_id, name);
        self.params
            .get(&key)
            .ok_or_else(|| Error::graph(format!("missing parameter '{key}'")))
    }

    pub fn param_mut(&mut self, layer_id: &str, name: &str) -> Result<&mut Tensor<T>> {
        let key = param_key(layer_id, name);
        self.params
            .get_mut(&key)
            .ok_or_else(|| Error::graph(format!("missing parameter '{key}'")))
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { layers: self.layers.clone(), backbone_boundary: self.backbone_boundary.clone() }
    }

    /// Index of the boundary layer in topological order.
    pub fn boundary_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.id == self.backbone_boundary)
            .expect("validated graph has its boundary")
    }

    /// Backbone layers: everything up to and including the boundary.
    pub fn backbone_layers(&self) -> &[LayerSpec] {
        &self.layers[..=self.boundary_index()]
    }

    /// Head layers: everything strictly after the boundary.
    pub fn head_layers(&self) -> &[LayerSpec] {
        &self.layers[self.boundary_index() + 1..]
    }

    fn layer_param_keys(layer: &LayerSpec) -> Vec<String> {
        match layer.kind {
            LayerKind::Conv2d { bias, .. } => {
                let mut v = vec![param_key(&layer.id, "weight")];
                if bias {
                    v.push(param_key(&layer.id, "bias"));
                }
                v
            }
            LayerKind::BatchNorm2d { .. } => ["gamma", "beta", "running_mean", "running_var"]
                .iter()
                .map(|n| param_key(&layer.id, n))
                .collect(),
            LayerKind::Linear { bias, .. } => {
                let mut v = vec![param_key(&layer.id, "weight")];
                if bias {
                    v.push(param_key(&layer.id, "bias"));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Parameter keys of head layers, in sorted order.
    pub fn head_param_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self.head_layers().iter().flat_map(Self::layer_param_keys).collect();
        keys.sort();
        keys
    }

    /// Parameter keys of backbone layers, in sorted order.
    pub fn backbone_param_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self.backbone_layers().iter().flat_map(Self::layer_param_keys).collect();
        keys.sort();
        keys
    }

    /// Trainable parameter keys (running statistics are excluded), sorted.
    pub fn trainable_param_keys(&self, backbone_only: bool) -> Vec<String> {
        let layers = if backbone_only { self.backbone_layers() } else { &self.layers[..] };
        let mut keys: Vec<String> = layers
            .iter()
            .flat_map(Self::layer_param_keys)
            .filter(|k| !k.ends_with(".running_mean") && !k.ends_with(".running_var"))
            .collect();
        keys.sort();
        keys
    }

    /// Head parameters as a name -> tensor map (for hashing).
    pub fn head_params(&self) -> BTreeMap<String, Tensor<T>> {
        self.head_param_keys()
            .into_iter()
            .filter_map(|k| self.params.get(&k).map(|t| (k.clone(), t.clone())))
            .collect()
    }

    /// Tap-flagged layers in topological order.
    pub fn tap_layer_ids(&self) -> Vec<String> {
        self.layers.iter().filter(|l| l.tap).map(|l| l.id.clone()).collect()
    }

    /// Tap layers strictly upstream of the boundary; these anchor the
    /// intermediate distillation loss (depth index n = 1 is the shallowest).
    pub fn intermediate_tap_ids(&self) -> Vec<String> {
        let boundary = self.boundary_index();
        self.layers[..boundary]
            .iter()
            .filter(|l| l.tap)
            .map(|l| l.id.clone())
            .collect()
    }

    pub fn total_param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone_param_keys()
            .iter()
            .filter_map(|k| self.params.get(k))
            .map(|t| t.numel())
            .sum()
    }

    /// Structural validation: topological order, DAG, arity, boundary,
    /// and parameter presence with consistent shapes.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::graph("graph has no layers".to_string()));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for layer in &self.layers {
            if layer.id == INPUT_ID {
                return Err(Error::graph(format!("layer id '{INPUT_ID}' is reserved")));
            }
            if !seen.insert(&layer.id) {
                return Err(Error::graph(format!("duplicate layer id '{}'", layer.id)));
            }
            let arity = if matches!(layer.kind, LayerKind::ResidualAdd) { 2 } else { 1 };
            if layer.inputs.len() != arity {
                return Err(Error::graph(format!(
                    "layer '{}' ({}) must have exactly {arity} input(s), has {}",
                    layer.id,
                    layer.kind.name(),
                    layer.inputs.len()
                )));
            }
            for input in &layer.inputs {
                if input != INPUT_ID && !seen.contains(input.as_str()) {
                    return Err(Error::graph(format!(
                        "layer '{}' references '{input}' which is not defined before it (graph must be a topologically ordered DAG)",
                        layer.id
                    )));
                }
            }
            for key in Self::layer_param_keys(layer) {
                if !self.params.contains_key(&key) {
                    return Err(Error::graph(format!("missing parameter '{key}'")));
                }
            }
            // parameter shape consistency per layer kind
            match &layer.kind {
                LayerKind::Conv2d { in_channels, out_channels, kernel, bias, .. } => {
                    let w = self.param(&layer.id, "weight")?;
                    let expect = [*out_channels, *in_channels, *kernel, *kernel];
                    if w.shape() != expect {
                        return Err(Error::graph(format!(
                            "layer '{}': weight shape {:?} does not match spec {:?}",
                            layer.id,
                            w.shape(),
                            expect
                        )));
                    }
                    if *bias && self.param(&layer.id, "bias")?.shape() != [*out_channels] {
                        return Err(Error::graph(format!("layer '{}': bias shape mismatch", layer.id)));
                    }
                }
                LayerKind::BatchNorm2d { channels, .. } => {
                    for name in ["gamma", "beta", "running_mean", "running_var"] {
                        if self.param(&layer.id, name)?.shape() != [*channels] {
                            return Err(Error::graph(format!(
                                "layer '{}': {name} shape mismatch for {channels} channels",
                                layer.id
                            )));
                        }
                    }
                }
                LayerKind::Linear { in_features, out_features, bias } => {
                    let w = self.param(&layer.id, "weight")?;
                    if w.shape() != [*out_features, *in_features] {
                        return Err(Error::graph(format!("layer '{}': weight shape mismatch", layer.id)));
                    }
                    if *bias && self.param(&layer.id, "bias")?.shape() != [*out_features] {
                        return Err(Error::graph(format!("layer '{}': bias shape mismatch", layer.id)));
                    }
                }
                _ => {}
            }
        }
        if !seen.contains(self.backbone_boundary.as_str()) {
            return Err(Error::graph(format!(
                "backbone boundary '{}' is not a layer",
                self.backbone_boundary
            )));
        }
        Ok(())
    }

    /// Static shape inference from an input shape [B, C, H, W].
    /// Errors name the offending layer.
    pub fn infer_shapes(&self, input_shape: &[usize]) -> Result<HashMap<String, Vec<usize>>> {
        if input_shape.len() != 4 {
            return Err(Error::shape(format!("expected [B, C, H, W] input, got {input_shape:?}")));
        }
        let mut shapes: HashMap<String, Vec<usize>> = HashMap::new();
        shapes.insert(INPUT_ID.to_string(), input_shape.to_vec());
        for layer in &self.layers {
            let in_shape = shapes
                .get(&layer.inputs[0])
                .ok_or_else(|| Error::graph(format!("layer '{}': missing input shape", layer.id)))?
                .clone();
            let out = match &layer.kind {
                LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
                    if in_shape.len() != 4 || in_shape[1] != *in_channels {
                        return Err(Error::shape(format!(
                            "layer '{}': expected {in_channels} input channels, got shape {in_shape:?}",
                            layer.id
                        )));
                    }
                    let dims = crate::kernels::conv::ConvDims::compute(
                        &in_shape,
                        &[*out_channels, *in_channels, *kernel, *kernel],
                        *stride,
                        *padding,
                    )
                    .ok_or_else(|| {
                        Error::shape(format!("layer '{}': convolution does not fit input {in_shape:?}", layer.id))
                    })?;
                    vec![dims.batch, dims.c_out, dims.h_out, dims.w_out]
                }
                LayerKind::BatchNorm2d { channels, .. } => {
                    if in_shape.len() != 4 || in_shape[1] != *channels {
                        return Err(Error::shape(format!(
                            "layer '{}': expected {channels} channels, got shape {in_shape:?}",
                            layer.id
                        )));
                    }
                    in_shape
                }
                LayerKind::Relu => in_shape,
                LayerKind::MaxPool2d { kernel, stride } => {
                    let dims = crate::kernels::pool::PoolDims::compute(&in_shape, *kernel, *stride)
                        .ok_or_else(|| {
                            Error::shape(format!("layer '{}': pool does not fit input {in_shape:?}", layer.id))
                        })?;
                    vec![dims.batch, dims.channels, dims.h_out, dims.w_out]
                }
                LayerKind::GlobalAvgPool => {
                    if in_shape.len() != 4 {
                        return Err(Error::shape(format!("layer '{}': expected 4-D input", layer.id)));
                    }
                    vec![in_shape[0], in_shape[1]]
                }
                LayerKind::Linear { in_features, out_features, .. } => {
                    if in_shape.len() != 2 || in_shape[1] != *in_features {
                        return Err(Error::shape(format!(
                            "layer '{}': expected [B, {in_features}] input, got {in_shape:?}",
                            layer.id
                        )));
                    }
                    vec![in_shape[0], *out_features]
                }
                LayerKind::ResidualAdd => {
                    let other = shapes
                        .get(&layer.inputs[1])
                        .ok_or_else(|| Error::graph(format!("layer '{}': missing input shape", layer.id)))?;
                    if *other != in_shape {
                        return Err(Error::shape(format!(
                            "layer '{}': residual inputs disagree: {in_shape:?} vs {other:?}",
                            layer.id
                        )));
                    }
                    in_shape
                }
            };
            shapes.insert(layer.id.clone(), out);
        }
        Ok(shapes)
    }
}

pub fn param_key(layer_id: &str, name: &str) -> String {
    format!("{layer_id}.{name}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_spec(id: &str, input: &str, cin: usize, cout: usize) -> LayerSpec {
        LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Conv2d { in_channels: cin, out_channels: cout, kernel: 3, stride: 1, padding: 1, bias: false },
            inputs: vec![input.to_string()],
            tap: false,
            prunable: false,
        }
    }

    #[test]
    fn rejects_forward_reference() {
        let mut params = BTreeMap::new();
        params.insert("c1.weight".to_string(), Tensor::<f32>::zeros(vec![4, 3, 3, 3]));
        let layers = vec![conv_spec("c1", "c2", 3, 4)];
        assert!(NetworkGraph::new(layers, params, "c1".to_string()).is_err());
    }

    #[test]
    fn rejects_duplicate_ids() {
        let mut params = BTreeMap::new();
        params.insert("c1.weight".to_string(), Tensor::<f32>::zeros(vec![4, 3, 3, 3]));
        let layers = vec![conv_spec("c1", INPUT_ID, 3, 4), conv_spec("c1", INPUT_ID, 3, 4)];
        assert!(NetworkGraph::new(layers, params, "c1".to_string()).is_err());
    }

    #[test]
    fn shape_error_names_the_layer() {
        let mut params = BTreeMap::new();
        params.insert("c1.weight".to_string(), Tensor::<f32>::zeros(vec![4, 3, 3, 3]));
        let g = NetworkGraph::new(vec![conv_spec("c1", INPUT_ID, 3, 4)], params, "c1".to_string()).unwrap();
        let err = g.infer_shapes(&[1, 5, 8, 8]).unwrap_err();
        assert!(err.to_string().contains("c1"), "{err}");
    }
}

//! Desk-scale network constructors.
//!
//! Residual nets tap the feature map after each residual connection; VGG
//! style stacks tap after every batch-norm layer. Layers whose output shape
//! must stay fixed (second conv of a block, projections, the final conv of a
//! VGG stack) are marked non-prunable so taps and residual joins remain
//! shape-consistent after pruning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{param_key, LayerKind, LayerSpec, NetworkGraph, INPUT_ID};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in).
fn kaiming_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut SeededRng) -> Tensor<T> {
    let bound = T::from_f64((6.0 / fan_in as f64).sqrt());
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

struct Builder<T> {
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Builder<T> {
    fn new() -> Self {
        Builder { layers: Vec::new(), params: BTreeMap::new() }
    }

    fn conv(
        &mut self,
        id: &str,
        input: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        prunable: bool,
        rng: &mut SeededRng,
    ) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Conv2d { in_channels: cin, out_channels: cout, kernel, stride, padding, bias: false },
            inputs: vec![input.to_string()],
            tap: false,
            prunable,
        });
        let fan_in = cin * kernel * kernel;
        self.params
            .insert(param_key(id, "weight"), kaiming_uniform(vec![cout, cin, kernel, kernel], fan_in, rng));
        id.to_string()
    }

    fn bn(&mut self, id: &str, input: &str, channels: usize, tap: bool) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::BatchNorm2d { channels, eps: BN_EPS, momentum: BN_MOMENTUM },
            inputs: vec![input.to_string()],
            tap,
            prunable: false,
        });
        self.params.insert(param_key(id, "gamma"), Tensor::ones(vec![channels]));
        self.params.insert(param_key(id, "beta"), Tensor::zeros(vec![channels]));
        self.params.insert(param_key(id, "running_mean"), Tensor::zeros(vec![channels]));
        self.params.insert(param_key(id, "running_var"), Tensor::ones(vec![channels]));
        id.to_string()
    }

    fn relu(&mut self, id: &str, input: &str) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Relu,
            inputs: vec![input.to_string()],
            tap: false,
            prunable: false,
        });
        id.to_string()
    }

    fn maxpool(&mut self, id: &str, input: &str, kernel: usize, stride: usize) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::MaxPool2d { kernel, stride },
            inputs: vec![input.to_string()],
            tap: false,
            prunable: false,
        });
        id.to_string()
    }

    fn gap(&mut self, id: &str, input: &str, tap: bool) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::GlobalAvgPool,
            inputs: vec![input.to_string()],
            tap,
            prunable: false,
        });
        id.to_string()
    }

    fn residual_add(&mut self, id: &str, a: &str, b: &str, tap: bool) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::ResidualAdd,
            inputs: vec![a.to_string(), b.to_string()],
            tap,
            prunable: false,
        });
        id.to_string()
    }

    fn linear(&mut self, id: &str, input: &str, in_f: usize, out_f: usize, rng: &mut SeededRng) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Linear { in_features: in_f, out_features: out_f, bias: true },
            inputs: vec![input.to_string()],
            tap: false,
            prunable: false,
        });
        self.params.insert(param_key(id, "weight"), kaiming_uniform(vec![out_f, in_f], in_f, rng));
        self.params.insert(param_key(id, "bias"), Tensor::zeros(vec![out_f]));
        id.to_string()
    }
}

/// Small residual classifier: stem conv, one stack of basic blocks per
/// stage (stride-2 transition with 1x1 projection between stages), global
/// average pooling as the backbone boundary, and a linear head.
///
/// Only the first conv of each block is prunable; the block-output conv and
/// every projection keep full width so residual joins and taps stay
/// shape-consistent. Taps sit on each residual add and on the boundary.
pub fn build_resnet_tiny<T: Scalar>(
    stage_channels: &[usize],
    blocks_per_stage: &[usize],
    num_classes: usize,
    rng: &mut SeededRng,
) -> Result<NetworkGraph<T>> {
    if stage_channels.is_empty() || blocks_per_stage.is_empty() {
        return Err(Error::config("build_resnet_tiny: stage lists must be non-empty".to_string()));
    }
    if stage_channels.len() != blocks_per_stage.len() {
        return Err(Error::config(
            "build_resnet_tiny: stage_channels and blocks_per_stage must have the same length".to_string(),
        ));
    }
    if stage_channels.iter().any(|&c| c == 0) || blocks_per_stage.iter().any(|&b| b == 0) || num_classes == 0 {
        return Err(Error::config("build_resnet_tiny: all sizes must be at least 1".to_string()));
    }

    let mut b = Builder::<T>::new();
    let mut cur = b.conv("stem_conv", INPUT_ID, 3, stage_channels[0], 3, 1, 1, false, rng);
    cur = b.bn("stem_bn", &cur, stage_channels[0], false);
    cur = b.relu("stem_relu", &cur);
    let mut cur_channels = stage_channels[0];

    for (s, (&channels, &blocks)) in stage_channels.iter().zip(blocks_per_stage).enumerate() {
        for blk in 0..blocks {
            let prefix = format!("s{s}b{blk}");
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            let main = b.conv(&format!("{prefix}_conv_a"), &cur, cur_channels, channels, 3, stride, 1, true, rng);
            let main = b.bn(&format!("{prefix}_bn_a"), &main, channels, false);
            let main = b.relu(&format!("{prefix}_relu_a"), &main);
            let main = b.conv(&format!("{prefix}_conv_b"), &main, channels, channels, 3, 1, 1, false, rng);
            let main = b.bn(&format!("{prefix}_bn_b"), &main, channels, false);
            let skip = if stride != 1 || cur_channels != channels {
                let p = b.conv(&format!("{prefix}_proj"), &cur, cur_channels, channels, 1, stride, 0, false, rng);
                b.bn(&format!("{prefix}_proj_bn"), &p, channels, false)
            } else {
                cur.clone()
            };
            let added = b.residual_add(&format!("{prefix}_add"), &main, &skip, true);
            cur = b.relu(&format!("{prefix}_relu_out"), &added);
            cur_channels = channels;
        }
    }

    let boundary = b.gap("gap", &cur, true);
    b.linear("fc", &boundary, cur_channels, num_classes, rng);
    NetworkGraph::new(b.layers, b.params, boundary)
}

/// Token of a VGG-style conv plan: a conv width or a max-pool marker
/// (spelled "M" in JSON configs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPlanToken {
    Conv(usize),
    MaxPool,
}

impl Serialize for ConvPlanToken {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ConvPlanToken::Conv(c) => s.serialize_u64(*c as u64),
            ConvPlanToken::MaxPool => s.serialize_str("M"),
        }
    }
}

impl<'de> Deserialize<'de> for ConvPlanToken {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        match &value {
            serde_json::Value::Number(n) if n.as_u64().is_some() => {
                Ok(ConvPlanToken::Conv(n.as_u64().unwrap() as usize))
            }
            serde_json::Value::String(s) if s == "M" => Ok(ConvPlanToken::MaxPool),
            other => Err(serde::de::Error::custom(format!(
                "unknown plan token {other} (expected a channel count or \"M\")"
            ))),
        }
    }
}

/// Plain conv-BN-ReLU stack with max-pool markers, boundary at the end of
/// the stack, and a GAP + linear head. Taps after every batch norm; the
/// final conv is non-prunable so the boundary width is preserved.
pub fn build_vgg_tiny<T: Scalar>(
    conv_plan: &[ConvPlanToken],
    num_classes: usize,
    rng: &mut SeededRng,
) -> Result<NetworkGraph<T>> {
    let conv_count = conv_plan.iter().filter(|t| matches!(t, ConvPlanToken::Conv(_))).count();
    if conv_count == 0 {
        return Err(Error::config("build_vgg_tiny: plan needs at least one conv before the classifier".to_string()));
    }
    if conv_plan.iter().any(|t| matches!(t, ConvPlanToken::Conv(0))) {
        return Err(Error::config("build_vgg_tiny: conv width must be at least 1".to_string()));
    }
    if num_classes == 0 {
        return Err(Error::config("build_vgg_tiny: num_classes must be at least 1".to_string()));
    }

    let last_conv_pos = conv_plan
        .iter()
        .rposition(|t| matches!(t, ConvPlanToken::Conv(_)))
        .expect("checked above");

    let mut b = Builder::<T>::new();
    let mut cur = INPUT_ID.to_string();
    let mut cur_channels = 3usize;
    let mut conv_idx = 0usize;
    let mut pool_idx = 0usize;
    for (pos, token) in conv_plan.iter().enumerate() {
        match token {
            ConvPlanToken::Conv(channels) => {
                let prunable = pos != last_conv_pos;
                cur = b.conv(&format!("conv{conv_idx}"), &cur, cur_channels, *channels, 3, 1, 1, prunable, rng);
                cur = b.bn(&format!("bn{conv_idx}"), &cur, *channels, true);
                cur = b.relu(&format!("relu{conv_idx}"), &cur);
                cur_channels = *channels;
                conv_idx += 1;
            }
            ConvPlanToken::MaxPool => {
                cur = b.maxpool(&format!("pool{pool_idx}"), &cur, 2, 2);
                pool_idx += 1;
            }
        }
    }

    let boundary = cur;
    let gap = b.gap("gap", &boundary, false);
    b.linear("fc", &gap, cur_channels, num_classes, rng);
    NetworkGraph::new(b.layers, b.params, boundary)
}

/// Parse a JSON-ish plan list (numbers and "M" strings).
pub fn parse_conv_plan(values: &[serde_json::Value]) -> Result<Vec<ConvPlanToken>> {
    values
        .iter()
        .map(|v| match v {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|c| ConvPlanToken::Conv(c as usize))
                .ok_or_else(|| Error::config(format!("invalid conv width {n}"))),
            serde_json::Value::String(s) if s == "M" => Ok(ConvPlanToken::MaxPool),
            other => Err(Error::config(format!("unknown plan token {other} (expected a channel count or \"M\")"))),
        })
        .collect()
}

//! Structured filter pruning with channel rewiring.
//!
//! Filters are scored per layer (l1 weight mass or the following batch
//! norm's scale magnitude), the lowest-scoring ones are planned away, and
//! the graph is rewritten: pruned conv rows, the following batch-norm
//! vectors, and every downstream consumer's input channels are sliced to
//! the kept indices.
//!
//! A conv is effectively prunable only when shrinking it cannot change the
//! shape of a tap, the boundary, a residual join, or the network output:
//! the prunable flag must be set and the layer's channel cone (the layers
//! that pass its channel count through unchanged, up to the next conv or
//! linear consumer) must be free of taps, the boundary, and residual adds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{param_key, LayerKind, NetworkGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStrategy {
    L1,
    BnScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    Uniform,
    SizeWeighted,
}

/// Per-layer kept-filter decision plus the derived input-channel rewiring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrunePlan {
    pub strategy: PruneStrategy,
    pub global_ratio: f64,
    pub mode: SparsityMode,
    /// Pruned conv layer id -> kept output filter indices, sorted ascending.
    pub kept: BTreeMap<String, Vec<usize>>,
    /// Consumer layer id -> kept input channel indices, sorted ascending.
    pub rewiring: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFilterCount {
    pub layer_id: String,
    pub before: usize,
    pub after: usize,
}

/// Backbone-only pruning statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub removed_filters_pct: f64,
    pub removed_params_pct: f64,
    pub per_layer: Vec<LayerFilterCount>,
}

/// l1 filter scores: s_i = sum of |w| over the filter's Cin x kh x kw slab.
pub fn score_filters_l1<T: Scalar>(weight: &Tensor<T>) -> Result<Vec<f64>> {
    if weight.shape().len() != 4 {
        return Err(Error::shape(format!(
            "score_filters_l1: expected 4-D conv weight, got {:?}",
            weight.shape()
        )));
    }
    let c_out = weight.shape()[0];
    let slab: usize = weight.shape()[1..].iter().product();
    let mut scores = vec![0.0f64; c_out];
    for (i, s) in scores.iter_mut().enumerate() {
        *s = weight.data()[i * slab..(i + 1) * slab]
            .iter()
            .map(|v| v.to_f64x().abs())
            .sum();
    }
    Ok(scores)
}

/// Batch-norm scale scores: |gamma_i| per channel.
pub fn score_filters_bnscale<T: Scalar>(gamma: &Tensor<T>) -> Result<Vec<f64>> {
    if gamma.shape().len() != 1 {
        return Err(Error::shape(format!(
            "score_filters_bnscale: expected 1-D gamma, got {:?}",
            gamma.shape()
        )));
    }
    Ok(gamma.data().iter().map(|v| v.to_f64x().abs()).collect())
}

/// Keep the `keep` highest-scoring indices; ties break toward lower index.
/// Returned indices are sorted ascending.
pub fn select_kept(scores: &[f64], keep: usize) -> Result<Vec<usize>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("filter scores must be finite".to_string()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    if kept.is_empty() {
        return Err(Error::config("pruning would empty the layer".to_string()));
    }
    Ok(kept)
}

struct ConeWalk {
    /// BN / pool / relu layers whose channel dimension tracks the producer.
    passthrough: Vec<String>,
    /// Conv / linear layers that consume the producer's channels as input.
    consumers: Vec<String>,
    /// True when the cone is free of taps, the boundary, residual adds,
    /// and does not leak to the network output.
    safe: bool,
}

/// Walk downstream from a conv through channel-preserving layers.
fn channel_cone<T: Scalar>(graph: &NetworkGraph<T>, conv_id: &str) -> ConeWalk {
    let mut walk = ConeWalk { passthrough: Vec::new(), consumers: Vec::new(), safe: true };
    let mut frontier = vec![conv_id.to_string()];
    while let Some(current) = frontier.pop() {
        let mut has_consumer_downstream = false;
        for layer in graph.layers() {
            if !layer.inputs.iter().any(|i| *i == current) {
                continue;
            }
            has_consumer_downstream = true;
            match layer.kind {
                LayerKind::Conv2d { .. } | LayerKind::Linear { .. } => {
                    walk.consumers.push(layer.id.clone());
                }
                LayerKind::ResidualAdd => {
                    walk.safe = false;
                }
                LayerKind::BatchNorm2d { .. } | LayerKind::Relu | LayerKind::MaxPool2d { .. } | LayerKind::GlobalAvgPool => {
                    if layer.tap || layer.id == graph.backbone_boundary() {
                        walk.safe = false;
                    }
                    walk.passthrough.push(layer.id.clone());
                    frontier.push(layer.id.clone());
                }
            }
        }
        // the channel count escapes as the network output
        if !has_consumer_downstream {
            walk.safe = false;
        }
    }
    if graph
        .layer(conv_id)
        .map(|l| l.tap || l.id == graph.backbone_boundary())
        .unwrap_or(true)
    {
        walk.safe = false;
    }
    walk
}

/// Conv layers that may actually lose filters, in topological order.
pub fn effectively_prunable<T: Scalar>(graph: &NetworkGraph<T>) -> Vec<String> {
    let boundary = graph.boundary_index();
    graph.layers()[..=boundary]
        .iter()
        .filter(|l| l.prunable && matches!(l.kind, LayerKind::Conv2d { .. }))
        .filter(|l| channel_cone(graph, &l.id).safe)
        .map(|l| l.id.clone())
        .collect()
}

fn filter_count<T: Scalar>(graph: &NetworkGraph<T>, id: &str) -> usize {
    match graph.layer(id).map(|l| &l.kind) {
        Ok(LayerKind::Conv2d { out_channels, .. }) => *out_channels,
        _ => 0,
    }
}

fn scores_for<T: Scalar>(graph: &NetworkGraph<T>, conv_id: &str, strategy: PruneStrategy) -> Result<Vec<f64>> {
    match strategy {
        PruneStrategy::L1 => score_filters_l1(graph.param(conv_id, "weight")?),
        PruneStrategy::BnScale => {
            let cone = channel_cone(graph, conv_id);
            let bn = cone
                .passthrough
                .iter()
                .find(|id| matches!(graph.layer(id).map(|l| &l.kind), Ok(LayerKind::BatchNorm2d { .. })))
                .ok_or_else(|| {
                    Error::graph(format!(
                        "bn_scale pruning: conv '{conv_id}' has no following batch-norm layer"
                    ))
                })?;
            score_filters_bnscale(graph.param(bn, "gamma")?)
        }
    }
}

/// Removed-filter count per layer for the requested sparsity mode.
fn removal_counts(filter_counts: &[usize], global_ratio: f64, mode: SparsityMode) -> Vec<usize> {
    match mode {
        SparsityMode::Uniform => filter_counts.iter().map(|&f| (global_ratio * f as f64).floor() as usize).collect(),
        SparsityMode::SizeWeighted => {
            let total: usize = filter_counts.iter().sum();
            if total == 0 {
                return Vec::new();
            }
            let mean = total as f64 / filter_counts.len() as f64;
            let caps: Vec<usize> = filter_counts
                .iter()
                .map(|&f| ((0.9 * f as f64).floor() as usize).min(f.saturating_sub(1)))
                .collect();
            let mut removed: Vec<usize> = filter_counts
                .iter()
                .zip(&caps)
                .map(|(&f, &cap)| {
                    let r = (global_ratio * f as f64 / mean).clamp(0.0, 0.9);
                    ((r * f as f64).floor() as usize).min(cap)
                })
                .collect();
            // nudge toward the exact global total, one filter at a time,
            // wider layers first
            let target = (global_ratio * total as f64).floor() as usize;
            let mut order: Vec<usize> = (0..filter_counts.len()).collect();
            order.sort_by(|&a, &b| filter_counts[b].cmp(&filter_counts[a]).then(a.cmp(&b)));
            let mut guard = 0usize;
            while removed.iter().sum::<usize>() < target && guard < 10_000 {
                let mut bumped = false;
                for &l in &order {
                    if removed[l] < caps[l] {
                        removed[l] += 1;
                        bumped = true;
                        break;
                    }
                }
                if !bumped {
                    break;
                }
                guard += 1;
            }
            while removed.iter().sum::<usize>() > target && guard < 20_000 {
                for &l in order.iter().rev() {
                    if removed[l] > 0 {
                        removed[l] -= 1;
                        break;
                    }
                }
                guard += 1;
            }
            removed
        }
    }
}

pub fn plan_prune<T: Scalar>(
    graph: &NetworkGraph<T>,
    global_ratio: f64,
    strategy: PruneStrategy,
    mode: SparsityMode,
) -> Result<PrunePlan> {
    if !(0.0..1.0).contains(&global_ratio) {
        return Err(Error::config("ratio must be in [0,1)".to_string()));
    }
    let prunable = effectively_prunable(graph);
    let filter_counts: Vec<usize> = prunable.iter().map(|id| filter_count(graph, id)).collect();
    let removals = removal_counts(&filter_counts, global_ratio, mode);

    let mut kept = BTreeMap::new();
    for ((id, &filters), &remove) in prunable.iter().zip(&filter_counts).zip(&removals) {
        if remove >= filters {
            return Err(Error::config(format!(
                "ratio {global_ratio} would empty layer '{id}' ({filters} filters)"
            )));
        }
        let scores = scores_for(graph, id, strategy)?;
        kept.insert(id.clone(), select_kept(&scores, filters - remove)?);
    }

    // Rewiring: every conv/linear consumer in a pruned conv's cone keeps
    // exactly the producer's kept channel indices as input channels.
    let mut rewiring = BTreeMap::new();
    for (id, kept_idx) in &kept {
        let cone = channel_cone(graph, id);
        for consumer in cone.consumers {
            rewiring.insert(consumer, kept_idx.clone());
        }
    }

    Ok(PrunePlan { strategy, global_ratio, mode, kept, rewiring })
}

fn slice_rows<T: Scalar>(t: &Tensor<T>, kept: &[usize]) -> Tensor<T> {
    let row: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = kept.len();
    let mut data = Vec::with_capacity(kept.len() * row);
    for &k in kept {
        data.extend_from_slice(&t.data()[k * row..(k + 1) * row]);
    }
    Tensor::from_vec(shape, data).expect("sliced tensor is consistent")
}

fn slice_conv_in_channels<T: Scalar>(t: &Tensor<T>, kept: &[usize]) -> Tensor<T> {
    let (c_out, c_in, kh, kw) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let kernel = kh * kw;
    let mut data = Vec::with_capacity(c_out * kept.len() * kernel);
    for co in 0..c_out {
        for &ci in kept {
            let base = (co * c_in + ci) * kernel;
            data.extend_from_slice(&t.data()[base..base + kernel]);
        }
    }
    Tensor::from_vec(vec![c_out, kept.len(), kh, kw], data).expect("sliced tensor is consistent")
}

fn slice_linear_in_features<T: Scalar>(t: &Tensor<T>, kept: &[usize]) -> Tensor<T> {
    let (out_f, in_f) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(out_f * kept.len());
    for o in 0..out_f {
        let row = &t.data()[o * in_f..(o + 1) * in_f];
        for &k in kept {
            data.push(row[k]);
        }
    }
    Tensor::from_vec(vec![out_f, kept.len()], data).expect("sliced tensor is consistent")
}

/// Structurally rewrite the graph per the plan. Head parameters are moved
/// over untouched, byte for byte.
pub fn apply_prune<T: Scalar>(graph: &NetworkGraph<T>, plan: &PrunePlan) -> Result<NetworkGraph<T>> {
    for id in plan.kept.keys() {
        let filters = filter_count(graph, id);
        if filters == 0 {
            return Err(Error::graph(format!("plan references unknown conv layer '{id}'")));
        }
        let kept = &plan.kept[id];
        if kept.is_empty() || kept.iter().any(|&k| k >= filters) || kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::graph(format!(
                "plan for layer '{id}' is not a sorted non-empty subset of 0..{filters}"
            )));
        }
    }

    // Propagate kept channel sets through the graph.
    let mut kept_channels: BTreeMap<String, Option<Vec<usize>>> = BTreeMap::new();
    let channel_set = |m: &BTreeMap<String, Option<Vec<usize>>>, id: &str| -> Option<Vec<usize>> {
        if id == crate::graph::INPUT_ID {
            None
        } else {
            m.get(id).cloned().flatten()
        }
    };

    let mut layers = Vec::with_capacity(graph.layers().len());
    let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let boundary_idx = graph.boundary_index();

    for (idx, layer) in graph.layers().iter().enumerate() {
        let mut spec = layer.clone();
        let in_kept = channel_set(&kept_channels, &layer.inputs[0]);
        let is_head = idx > boundary_idx;

        if is_head {
            // Head layers are never altered; copy parameters bitwise.
            for (key, tensor) in graph.params() {
                if key.starts_with(&format!("{}.", layer.id)) {
                    params.insert(key.clone(), tensor.clone());
                }
            }
            if in_kept.is_some() {
                return Err(Error::graph(format!(
                    "pruned channels reach head layer '{}'; the backbone output must keep full width",
                    layer.id
                )));
            }
            kept_channels.insert(layer.id.clone(), None);
            layers.push(spec);
            continue;
        }

        match &mut spec.kind {
            LayerKind::Conv2d { in_channels, out_channels, .. } => {
                let mut weight = graph.param(&layer.id, "weight")?.clone();
                if let Some(kept_in) = &in_kept {
                    weight = slice_conv_in_channels(&weight, kept_in);
                    *in_channels = kept_in.len();
                }
                // a kept list covering the full range is the identity
                let out_kept = plan
                    .kept
                    .get(&layer.id)
                    .filter(|kept| kept.len() < *out_channels)
                    .cloned();
                if let Some(kept_out) = &out_kept {
                    weight = slice_rows(&weight, kept_out);
                    *out_channels = kept_out.len();
                    if let Ok(bias) = graph.param(&layer.id, "bias") {
                        params.insert(param_key(&layer.id, "bias"), slice_rows(bias, kept_out));
                    }
                } else if let Ok(bias) = graph.param(&layer.id, "bias") {
                    params.insert(param_key(&layer.id, "bias"), bias.clone());
                }
                params.insert(param_key(&layer.id, "weight"), weight);
                kept_channels.insert(layer.id.clone(), out_kept);
            }
            LayerKind::BatchNorm2d { channels, .. } => {
                if let Some(kept) = &in_kept {
                    for name in ["gamma", "beta", "running_mean", "running_var"] {
                        let sliced = slice_rows(graph.param(&layer.id, name)?, kept);
                        params.insert(param_key(&layer.id, name), sliced);
                    }
                    *channels = kept.len();
                } else {
                    for name in ["gamma", "beta", "running_mean", "running_var"] {
                        params.insert(param_key(&layer.id, name), graph.param(&layer.id, name)?.clone());
                    }
                }
                kept_channels.insert(layer.id.clone(), in_kept);
            }
            LayerKind::Relu | LayerKind::MaxPool2d { .. } | LayerKind::GlobalAvgPool => {
                kept_channels.insert(layer.id.clone(), in_kept);
            }
            LayerKind::Linear { in_features, .. } => {
                let mut weight = graph.param(&layer.id, "weight")?.clone();
                if let Some(kept) = &in_kept {
                    weight = slice_linear_in_features(&weight, kept);
                    *in_features = kept.len();
                }
                params.insert(param_key(&layer.id, "weight"), weight);
                if let Ok(bias) = graph.param(&layer.id, "bias") {
                    params.insert(param_key(&layer.id, "bias"), bias.clone());
                }
                kept_channels.insert(layer.id.clone(), None);
            }
            LayerKind::ResidualAdd => {
                let rhs_kept = channel_set(&kept_channels, &layer.inputs[1]);
                if in_kept != rhs_kept {
                    return Err(Error::graph(format!(
                        "layer '{}': residual join inputs were pruned inconsistently",
                        layer.id
                    )));
                }
                kept_channels.insert(layer.id.clone(), in_kept);
            }
        }
        let final_kept = kept_channels.get(&layer.id).cloned().flatten();
        if (spec.tap || spec.id == graph.backbone_boundary()) && final_kept.is_some() {
            return Err(Error::graph(format!(
                "layer '{}': pruning would change a tap or boundary shape",
                layer.id
            )));
        }
        layers.push(spec);
    }

    let pruned = NetworkGraph::new(layers, params, graph.backbone_boundary().to_string())?;
    Ok(pruned)
}

/// Compare two graphs layer by layer. Percentages are backbone-only.
pub fn report<T: Scalar>(before: &NetworkGraph<T>, after: &NetworkGraph<T>) -> Result<PruneReport> {
    let mut per_layer = Vec::new();
    let mut filters_before = 0usize;
    let mut filters_after = 0usize;
    for layer in before.backbone_layers() {
        if let LayerKind::Conv2d { out_channels, .. } = layer.kind {
            let after_count = match after.layer(&layer.id)?.kind {
                LayerKind::Conv2d { out_channels, .. } => out_channels,
                _ => return Err(Error::graph(format!("layer '{}' changed kind", layer.id))),
            };
            per_layer.push(LayerFilterCount { layer_id: layer.id.clone(), before: out_channels, after: after_count });
            filters_before += out_channels;
            filters_after += after_count;
        }
    }
    let params_before = before.backbone_param_count();
    let params_after = after.backbone_param_count();
    let pct = |b: usize, a: usize| if b == 0 { 0.0 } else { 100.0 * (b - a) as f64 / b as f64 };
    Ok(PruneReport {
        removed_filters_pct: pct(filters_before, filters_after),
        removed_params_pct: pct(params_before, params_after),
        per_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_resnet_tiny, build_vgg_tiny, ConvPlanToken};
    use crate::rng::rng_from_seed;
    use crate::tensor::Tensor;

    fn resnet(seed: u64) -> NetworkGraph<f32> {
        let mut rng = rng_from_seed(seed);
        build_resnet_tiny(&[8, 16, 32], &[1, 1, 1], 4, &mut rng).unwrap()
    }

    #[test]
    fn l1_scores_zero_weight() {
        let w = Tensor::<f32>::zeros(vec![4, 3, 3, 3]);
        assert_eq!(score_filters_l1(&w).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn l1_score_half_filled_filter() {
        let mut w = Tensor::<f64>::zeros(vec![2, 3, 3, 3]);
        for v in &mut w.data_mut()[..27] {
            *v = 0.5;
        }
        let scores = score_filters_l1(&w).unwrap();
        assert!((scores[0] - 13.5).abs() < 1e-12);
        assert_eq!(scores[1], 0.0);
    }

    #[test]
    fn l1_matches_naive_absolute_sum() {
        let mut rng = rng_from_seed(1);
        let w = Tensor::<f64>::randn(vec![5, 2, 3, 3], 0.0, 1.0, &mut rng);
        let scores = score_filters_l1(&w).unwrap();
        for (i, &s) in scores.iter().enumerate() {
            let mut acc = 0.0;
            for ci in 0..2 {
                for k in 0..9 {
                    acc += w.data()[(i * 2 + ci) * 9 + k].abs();
                }
            }
            assert!((s - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn bnscale_scores_are_absolute_values() {
        let g = Tensor::<f64>::from_vec(vec![3], vec![-2.0, 0.1, 1.0]).unwrap();
        assert_eq!(score_filters_bnscale(&g).unwrap(), vec![2.0, 0.1, 1.0]);
    }

    #[test]
    fn equal_scores_keep_lower_indices() {
        let kept = select_kept(&[1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn random_scores_match_sort_oracle() {
        let mut rng = rng_from_seed(2);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..16).map(|_| crate::rng::next_gaussian(&mut rng)).collect();
            let kept = select_kept(&scores, 12).unwrap();
            // brute-force stable sort oracle
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let mut expect: Vec<usize> = order[..12].to_vec();
            expect.sort_unstable();
            assert_eq!(kept, expect);
        }
    }

    #[test]
    fn ratio_zero_plan_is_identity() {
        let g = resnet(3);
        let plan = plan_prune(&g, 0.0, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
        for (id, kept) in &plan.kept {
            assert_eq!(kept.len(), filter_count(&g, id));
        }
        let pruned = apply_prune(&g, &plan).unwrap();
        assert_eq!(
            crate::hash::tensor_map_hash(g.params()),
            crate::hash::tensor_map_hash(pruned.params())
        );
    }

    #[test]
    fn uniform_quarter_on_16_filters_keeps_top_12() {
        let g = resnet(4);
        let plan = plan_prune(&g, 0.25, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
        let kept = &plan.kept["s1b0_conv_a"];
        assert_eq!(kept.len(), 12);
        let scores = score_filters_l1(g.param("s1b0_conv_a", "weight").unwrap()).unwrap();
        let mut order: Vec<usize> = (0..16).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut expect = order[..12].to_vec();
        expect.sort_unstable();
        assert_eq!(*kept, expect);
    }

    #[test]
    fn non_prunable_layers_keep_everything() {
        let g = resnet(5);
        let plan = plan_prune(&g, 0.4, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
        assert!(!plan.kept.contains_key("s0b0_conv_b"));
        assert!(!plan.kept.contains_key("stem_conv"));
        let pruned = apply_prune(&g, &plan).unwrap();
        for id in ["s0b0_conv_b", "s1b0_conv_b", "stem_conv", "s1b0_proj"] {
            assert_eq!(filter_count(&pruned, id), filter_count(&g, id), "{id}");
        }
    }

    #[test]
    fn consumer_keeps_selected_input_channels() {
        // hand-trace: prune a 4-filter conv to {0, 2}; the consumer weight
        // [Cout, 4, k, k] must become [Cout, 2, k, k] with channels {0, 2}.
        let g = resnet(6);
        let mut plan = plan_prune(&g, 0.0, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
        plan.kept.insert("s0b0_conv_a".to_string(), vec![0, 2]);
        plan.rewiring.insert("s0b0_conv_b".to_string(), vec![0, 2]);
        let pruned = apply_prune(&g, &plan).unwrap();
        let w_before = g.param("s0b0_conv_b", "weight").unwrap();
        let w_after = pruned.param("s0b0_conv_b", "weight").unwrap();
        assert_eq!(w_after.shape(), &[8, 2, 3, 3]);
        for co in 0..8 {
            for (slot, &ci) in [0usize, 2].iter().enumerate() {
                for k in 0..9 {
                    let before = w_before.data()[(co * 8 + ci) * 9 + k];
                    let after = w_after.data()[(co * 2 + slot) * 9 + k];
                    assert_eq!(before, after);
                }
            }
        }
        // the following BN is sliced too
        assert_eq!(pruned.param("s0b0_bn_a", "gamma").unwrap().shape(), &[2]);
    }

    #[test]
    fn tap_shapes_survive_pruning() {
        let g = resnet(7);
        let plan = plan_prune(&g, 0.3, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
        let pruned = apply_prune(&g, &plan).unwrap();
        let shapes_before = g.infer_shapes(&[1, 3, 32, 32]).unwrap();
        let shapes_after = pruned.infer_shapes(&[1, 3, 32, 32]).unwrap();
        for tap in g.tap_layer_ids() {
            assert_eq!(shapes_before[&tap], shapes_after[&tap], "tap {tap}");
        }
    }

    #[test]
    fn head_parameters_are_bitwise_identical() {
        let g = resnet(8);
        let plan = plan_prune(&g, 0.4, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
        let pruned = apply_prune(&g, &plan).unwrap();
        assert_eq!(
            crate::hash::per_tensor_hashes(&g.head_params()),
            crate::hash::per_tensor_hashes(&pruned.head_params())
        );
    }

    #[test]
    fn pruned_graph_forward_succeeds() {
        let g = resnet(9);
        let plan = plan_prune(&g, 0.3, PruneStrategy::BnScale, SparsityMode::SizeWeighted).unwrap();
        let pruned = apply_prune(&g, &plan).unwrap();
        let mut rng = rng_from_seed(10);
        let x = Tensor::rand_uniform(vec![2, 3, 32, 32], 0.0, 1.0, &mut rng);
        pruned.predict(&x).unwrap();
    }

    #[test]
    fn backbone_params_strictly_decrease_with_ratio() {
        let g = resnet(11);
        let mut last = g.backbone_param_count();
        for ratio in [0.1, 0.2, 0.3, 0.4] {
            let plan = plan_prune(&g, ratio, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
            let pruned = apply_prune(&g, &plan).unwrap();
            let count = pruned.backbone_param_count();
            assert!(count < last, "ratio {ratio}: {count} !< {last}");
            last = count;
        }
    }

    #[test]
    fn report_identity_is_zero() {
        let g = resnet(12);
        let r = report(&g, &g).unwrap();
        assert_eq!(r.removed_filters_pct, 0.0);
        assert_eq!(r.removed_params_pct, 0.0);
    }

    #[test]
    fn report_percentages_recomputable() {
        let g = resnet(13);
        let plan = plan_prune(&g, 0.1, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
        let pruned = apply_prune(&g, &plan).unwrap();
        let r = report(&g, &pruned).unwrap();
        assert!(r.removed_filters_pct > 0.0);
        assert!(r.removed_params_pct > 0.0);
        assert!((r.removed_filters_pct - r.removed_params_pct).abs() > 1e-9);
        let fb: usize = r.per_layer.iter().map(|l| l.before).sum();
        let fa: usize = r.per_layer.iter().map(|l| l.after).sum();
        assert!((r.removed_filters_pct - 100.0 * (fb - fa) as f64 / fb as f64).abs() < 1e-9);
        let recount = 100.0 * (g.backbone_param_count() - pruned.backbone_param_count()) as f64
            / g.backbone_param_count() as f64;
        assert!((r.removed_params_pct - recount).abs() < 1e-9);
    }

    #[test]
    fn invalid_ratio_is_rejected_with_message() {
        let g = resnet(14);
        let err = plan_prune(&g, 1.0, PruneStrategy::L1, SparsityMode::Uniform).unwrap_err();
        assert!(err.to_string().contains("ratio must be in [0,1)"), "{err}");
    }

    #[test]
    fn vgg_taps_make_every_conv_shape_critical() {
        // every conv feeds a tapped batch norm, so nothing is effectively
        // prunable and the plan is the identity
        let mut rng = rng_from_seed(15);
        let plan_tokens = [ConvPlanToken::Conv(8), ConvPlanToken::MaxPool, ConvPlanToken::Conv(16)];
        let g: NetworkGraph<f32> = build_vgg_tiny(&plan_tokens, 4, &mut rng).unwrap();
        assert!(effectively_prunable(&g).is_empty());
        let plan = plan_prune(&g, 0.3, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
        let pruned = apply_prune(&g, &plan).unwrap();
        assert_eq!(
            crate::hash::tensor_map_hash(g.params()),
            crate::hash::tensor_map_hash(pruned.params())
        );
    }
}

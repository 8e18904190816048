//! Supervised baseline training and evaluation on labeled datasets.

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, LabeledDataset};
use crate::error::{Error, Result};
use crate::graph::{ExecOptions, NetworkGraph};
use crate::optim::SgdOptimizer;
use crate::rng::derive_seed_indexed;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, batch_size: 64, lr: 0.01, momentum: 0.9, weight_decay: 5e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Cross-entropy training of the full graph (backbone and head).
pub fn train_supervised<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::data("training dataset is empty".to_string()));
    }
    let mut optimizer = SgdOptimizer::new(
        T::from_f64(cfg.lr),
        T::from_f64(cfg.momentum),
        T::from_f64(cfg.weight_decay),
    )?;
    let trainable = graph.trainable_param_keys(false);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let shuffle = derive_seed_indexed(cfg.seed, "train-epoch", epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for indices in batch_indices(data.len(), cfg.batch_size, Some(shuffle)) {
            let (batch, labels) = data.batch(&indices);
            let mut exec = graph.forward_train(&batch, &ExecOptions::train())?;
            let loss = exec.tape.softmax_cross_entropy(exec.output, &labels)?;
            exec.tape.check_finite(loss, "training loss")?;
            loss_sum += exec.tape.scalar(loss).to_f64x();
            batches += 1;
            exec.tape.backward(loss)?;
            let grads = exec.param_grads();
            optimizer.step(graph.params_mut(), &grads, &trainable)?;
        }
        stats.push(EpochStats { epoch, mean_loss: loss_sum / batches as f64 });
    }
    Ok(stats)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub total: usize,
}

/// Top-1 accuracy plus per-class accuracy. An empty dataset is an explicit
/// error, never a NaN.
pub fn evaluate<T: Scalar>(
    graph: &NetworkGraph<T>,
    data: &LabeledDataset<T>,
    batch_size: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::data("evaluation dataset is empty".to_string()));
    }
    let mut correct = 0usize;
    let mut class_total = vec![0usize; data.classes];
    let mut class_correct = vec![0usize; data.classes];
    for indices in batch_indices(data.len(), batch_size, None) {
        let (batch, labels) = data.batch(&indices);
        let logits = graph.predict(&batch)?;
        let classes = logits.shape()[1];
        for (b, &label) in labels.iter().enumerate() {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            class_total[label] += 1;
            if best == label {
                correct += 1;
                class_correct[label] += 1;
            }
        }
    }
    let per_class = class_correct
        .iter()
        .zip(&class_total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    Ok(EvalResult { accuracy: correct as f64 / data.len() as f64, per_class, total: data.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_shapes_dataset;
    use crate::graph::build_resnet_tiny;
    use crate::rng::rng_from_seed;

    #[test]
    fn a_few_epochs_beat_chance_on_tiny_shapes() {
        let mut rng = rng_from_seed(1);
        let mut g = build_resnet_tiny::<f32>(&[8], &[1], 4, &mut rng).unwrap();
        let train = generate_shapes_dataset::<f32>(2, 24, 4, 32, "train").unwrap();
        let test = generate_shapes_dataset::<f32>(3, 8, 4, 32, "test").unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 16, ..TrainConfig::default() };
        let stats = train_supervised(&mut g, &train, &cfg).unwrap();
        assert!(stats.last().unwrap().mean_loss < stats.first().unwrap().mean_loss);
        let result = evaluate(&g, &test, 16).unwrap();
        assert!(result.accuracy > 0.3, "accuracy {}", result.accuracy);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let train = generate_shapes_dataset::<f32>(4, 8, 4, 32, "train").unwrap();
        let run = || {
            let mut rng = rng_from_seed(5);
            let mut g = build_resnet_tiny::<f32>(&[6], &[1], 4, &mut rng).unwrap();
            let cfg = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
            train_supervised(&mut g, &train, &cfg).unwrap();
            crate::hash::tensor_map_hash(g.params())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_dataset_is_an_error_not_nan() {
        let mut rng = rng_from_seed(6);
        let g = build_resnet_tiny::<f32>(&[6], &[1], 4, &mut rng).unwrap();
        let empty = LabeledDataset::<f32>::new(vec![], vec![], 4, "test").unwrap();
        assert!(evaluate(&g, &empty, 8).is_err());
    }
}

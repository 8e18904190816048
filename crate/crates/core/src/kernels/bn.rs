//! Batch normalization over [B, C, H, W], channel-wise.
//!
//! Variance is biased (divide by B*H*W) everywhere: normalization, returned
//! batch statistics, and the running-average update all share the one
//! convention, so a momentum-1 update folled by an eval pass reproduces the
//! train-mode output exactly.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics; running stats get an EMA update.
    Train,
    /// Normalize by running statistics; nothing is mutated.
    Eval,
    /// Normalize by running statistics (frozen), but batch statistics are
    /// still computed so a statistics-matching loss can consume them.
    Synthesis,
}

#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub new_running_mean: Vec<T>,
    pub new_running_var: Vec<T>,
}

/// Per-channel biased mean and variance over the B, H, W axes.
pub fn channel_stats<T: Scalar>(input: &[T], channels: usize, plane: usize, batch: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(batch * plane);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut acc = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            for &v in &input[base..base + plane] {
                acc += v;
            }
        }
        mean[c] = acc / count;
    }
    for c in 0..channels {
        let m = mean[c];
        let mut acc = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            for &v in &input[base..base + plane] {
                let d = v - m;
                acc += d * d;
            }
        }
        var[c] = acc / count;
    }
    (mean, var)
}

pub struct BnForward<T> {
    pub output: Vec<T>,
    /// Mean actually used for normalization.
    pub norm_mean: Vec<T>,
    /// 1/sqrt(var + eps) actually used for normalization.
    pub norm_inv_std: Vec<T>,
    /// Batch statistics, present in train and synthesis modes.
    pub batch_stats: Option<BnBatchStats<T>>,
}

pub fn forward<T: Scalar>(
    input: &[T],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    mode: BnMode,
    momentum_bn: T,
    eps: T,
    channels: usize,
    plane: usize,
    batch: usize,
) -> BnForward<T> {
    let (norm_mean, norm_var, batch_stats) = match mode {
        BnMode::Train => {
            let (mean, var) = channel_stats(input, channels, plane, batch);
            let one_m = T::one() - momentum_bn;
            let new_running_mean: Vec<T> = running_mean
                .iter()
                .zip(&mean)
                .map(|(&r, &m)| one_m * r + momentum_bn * m)
                .collect();
            let new_running_var: Vec<T> = running_var
                .iter()
                .zip(&var)
                .map(|(&r, &v)| one_m * r + momentum_bn * v)
                .collect();
            let stats = BnBatchStats {
                mean: mean.clone(),
                var: var.clone(),
                new_running_mean,
                new_running_var,
            };
            (mean, var, Some(stats))
        }
        BnMode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        BnMode::Synthesis => {
            let (mean, var) = channel_stats(input, channels, plane, batch);
            let stats = BnBatchStats {
                mean,
                var,
                new_running_mean: running_mean.to_vec(),
                new_running_var: running_var.to_vec(),
            };
            (running_mean.to_vec(), running_var.to_vec(), Some(stats))
        }
    };

    let norm_inv_std: Vec<T> = norm_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut output = vec![T::zero(); input.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * plane;
            let (m, is, g, bt) = (norm_mean[c], norm_inv_std[c], gamma[c], beta[c]);
            let scale = g * is;
            for (o, &v) in output[base..base + plane].iter_mut().zip(&input[base..base + plane]) {
                *o = (v - m) * scale + bt;
            }
        }
    }

    BnForward { output, norm_mean, norm_inv_std, batch_stats }
}

pub struct BnGrads<T> {
    pub grad_input: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
}

/// Backward pass. In train mode the gradient flows through the batch
/// statistics; in eval/synthesis modes normalization is a frozen affine map.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    gamma: &[T],
    norm_mean: &[T],
    norm_inv_std: &[T],
    through_batch_stats: bool,
    channels: usize,
    plane: usize,
    batch: usize,
) -> BnGrads<T> {
    let count = T::from_usize(batch * plane);
    let mut grad_input = vec![T::zero(); input.len()];
    let mut grad_gamma = vec![T::zero(); channels];
    let mut grad_beta = vec![T::zero(); channels];

    for c in 0..channels {
        let (m, is, g) = (norm_mean[c], norm_inv_std[c], gamma[c]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            for (&dy, &x) in grad_out[base..base + plane].iter().zip(&input[base..base + plane]) {
                let xhat = (x - m) * is;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        grad_beta[c] = sum_dy;
        grad_gamma[c] = sum_dy_xhat;

        if through_batch_stats {
            let k1 = sum_dy / count;
            let k2 = sum_dy_xhat / count;
            for b in 0..batch {
                let base = (b * channels + c) * plane;
                for ((gi, &dy), &x) in grad_input[base..base + plane]
                    .iter_mut()
                    .zip(&grad_out[base..base + plane])
                    .zip(&input[base..base + plane])
                {
                    let xhat = (x - m) * is;
                    *gi = g * is * (dy - k1 - xhat * k2);
                }
            }
        } else {
            let scale = g * is;
            for b in 0..batch {
                let base = (b * channels + c) * plane;
                for (gi, &dy) in grad_input[base..base + plane].iter_mut().zip(&grad_out[base..base + plane]) {
                    *gi = dy * scale;
                }
            }
        }
    }

    BnGrads { grad_input, grad_gamma, grad_beta }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{next_gaussian, rng_from_seed};

    #[test]
    fn already_normalized_input_passes_through() {
        // batch mean 0, var 1 per channel: output = input / sqrt(1 + eps)
        let input = vec![-1.0f64, 1.0, -1.0, 1.0];
        let eps = 1e-5;
        let fwd = forward(
            &input,
            &[1.0],
            &[0.0],
            &[0.0],
            &[1.0],
            BnMode::Train,
            0.1,
            eps,
            1,
            2,
            2,
        );
        let factor = 1.0 / (1.0f64 + eps).sqrt();
        for (o, i) in fwd.output.iter().zip(&input) {
            assert!((o - i * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_is_affine_identity() {
        let eps = 1e-5;
        let fwd = forward(
            &[1.0f64],
            &[2.0],
            &[3.0],
            &[0.0],
            &[1.0],
            BnMode::Eval,
            0.1,
            eps,
            1,
            1,
            1,
        );
        let expected = 2.0 / (1.0f64 + eps).sqrt() + 3.0;
        assert!((fwd.output[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn batch_stats_match_direct_computation() {
        let mut rng = rng_from_seed(3);
        let (batch, channels, plane) = (4, 3, 25);
        let input: Vec<f64> = (0..batch * channels * plane).map(|_| next_gaussian(&mut rng)).collect();
        let (mean, var) = channel_stats(&input, channels, plane, batch);
        for c in 0..channels {
            let mut vals = Vec::new();
            for b in 0..batch {
                let base = (b * channels + c) * plane;
                vals.extend_from_slice(&input[base..base + plane]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!((mean[c] - m).abs() < 1e-6);
            assert!((var[c] - v).abs() < 1e-6);
        }
    }

    #[test]
    fn momentum_one_running_update_reproduces_train_output_in_eval() {
        let mut rng = rng_from_seed(4);
        let (batch, channels, plane) = (2, 2, 9);
        let input: Vec<f64> = (0..batch * channels * plane).map(|_| next_gaussian(&mut rng)).collect();
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.2, -0.1];
        let train = forward(
            &input, &gamma, &beta, &[0.0, 0.0], &[1.0, 1.0], BnMode::Train, 1.0, 1e-5, channels, plane, batch,
        );
        let stats = train.batch_stats.as_ref().unwrap();
        let eval = forward(
            &input,
            &gamma,
            &beta,
            &stats.new_running_mean,
            &stats.new_running_var,
            BnMode::Eval,
            1.0,
            1e-5,
            channels,
            plane,
            batch,
        );
        for (a, b) in train.output.iter().zip(&eval.output) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn synthesis_mode_keeps_running_stats_frozen() {
        let input = vec![5.0f64; 8];
        let fwd = forward(
            &input, &[1.0], &[0.0], &[0.25], &[4.0], BnMode::Synthesis, 0.1, 1e-5, 1, 4, 2,
        );
        let stats = fwd.batch_stats.unwrap();
        assert_eq!(stats.new_running_mean, vec![0.25]);
        assert_eq!(stats.new_running_var, vec![4.0]);
        assert!((stats.mean[0] - 5.0).abs() < 1e-12);
        assert!(stats.var[0].abs() < 1e-12);
        // normalized by running stats, not the batch's own
        let expected = (5.0 - 0.25) / (4.0f64 + 1e-5).sqrt();
        assert!((fwd.output[0] - expected).abs() < 1e-12);
    }
}

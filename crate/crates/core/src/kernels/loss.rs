//! Scalar-valued loss kernels and their input gradients.

use crate::scalar::Scalar;

/// Numerically stable softmax cross entropy, mean over the batch.
/// Returns (loss, probabilities[B, K]).
pub fn softmax_cross_entropy_forward<T: Scalar>(logits: &[T], labels: &[usize], batch: usize, classes: usize) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); batch * classes];
    let mut loss = T::zero();
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        for (k, &v) in row.iter().enumerate() {
            probs[b * classes + k] = (v - log_denom).exp();
        }
        loss += log_denom - row[labels[b]];
    }
    (loss / T::from_usize(batch), probs)
}

pub fn softmax_cross_entropy_backward<T: Scalar>(grad: T, probs: &[T], labels: &[usize], batch: usize, classes: usize) -> Vec<T> {
    let inv_b = T::one() / T::from_usize(batch);
    let mut grad_logits = probs.to_vec();
    for (b, &label) in labels.iter().enumerate() {
        grad_logits[b * classes + label] -= T::one();
    }
    for g in &mut grad_logits {
        *g *= grad * inv_b;
    }
    grad_logits
}

/// Sum of absolute differences over all elements.
pub fn l1_distance_sum_forward<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += (x - y).abs();
    }
    acc
}

/// Subgradient: sign(a - b), 0 where the inputs coincide.
pub fn l1_distance_sum_backward<T: Scalar>(grad: T, a: &[T], b: &[T]) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    for i in 0..a.len() {
        let d = a[i] - b[i];
        let s = if d > T::zero() {
            T::one()
        } else if d < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        ga[i] = grad * s;
        gb[i] = -grad * s;
    }
    (ga, gb)
}

/// Total variation prior: sum over the batch of squared horizontal and
/// vertical neighbour differences, normalized by channels * h * w.
pub fn tv_loss_forward<T: Scalar>(input: &[T], batch: usize, channels: usize, h: usize, w: usize) -> T {
    let norm = T::from_usize(channels * h * w);
    let mut acc = T::zero();
    for bc in 0..batch * channels {
        let plane = &input[bc * h * w..(bc + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..w - 1 {
                let d = row[x + 1] - row[x];
                acc += d * d;
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                let d = plane[(y + 1) * w + x] - plane[y * w + x];
                acc += d * d;
            }
        }
    }
    acc / norm
}

pub fn tv_loss_backward<T: Scalar>(grad: T, input: &[T], batch: usize, channels: usize, h: usize, w: usize) -> Vec<T> {
    let scale = grad * T::from_f64(2.0) / T::from_usize(channels * h * w);
    let mut grad_in = vec![T::zero(); input.len()];
    for bc in 0..batch * channels {
        let base = bc * h * w;
        for y in 0..h {
            for x in 0..w - 1 {
                let i0 = base + y * w + x;
                let d = scale * (input[i0 + 1] - input[i0]);
                grad_in[i0 + 1] += d;
                grad_in[i0] -= d;
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                let i0 = base + y * w + x;
                let i1 = i0 + w;
                let d = scale * (input[i1] - input[i0]);
                grad_in[i1] += d;
                grad_in[i0] -= d;
            }
        }
    }
    grad_in
}

/// Distance between the batch statistics of `input` and fixed target
/// statistics, divided by the channel count:
/// (||mu - m||^2 + ||var - v||^2) / C with biased variance.
pub struct BnStatsLossForward<T> {
    pub loss: T,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

pub fn bn_stats_loss_forward<T: Scalar>(
    input: &[T],
    target_mean: &[T],
    target_var: &[T],
    channels: usize,
    plane: usize,
    batch: usize,
) -> BnStatsLossForward<T> {
    let (mean, var) = super::bn::channel_stats(input, channels, plane, batch);
    let inv_c = T::one() / T::from_usize(channels);
    let mut acc = T::zero();
    for c in 0..channels {
        let dm = mean[c] - target_mean[c];
        let dv = var[c] - target_var[c];
        acc += dm * dm + dv * dv;
    }
    BnStatsLossForward { loss: acc * inv_c, batch_mean: mean, batch_var: var }
}

pub fn bn_stats_loss_backward<T: Scalar>(
    grad: T,
    input: &[T],
    target_mean: &[T],
    target_var: &[T],
    batch_mean: &[T],
    batch_var: &[T],
    channels: usize,
    plane: usize,
    batch: usize,
) -> Vec<T> {
    // dL/dmu_c = 2 (mu_c - m_c) / C, dL/dvar_c = 2 (var_c - v_c) / C
    // dmu_c/dx = 1/K, dvar_c/dx = 2 (x - mu_c) / K  (biased variance)
    let count = T::from_usize(batch * plane);
    let inv_c = T::one() / T::from_usize(channels);
    let two = T::from_f64(2.0);
    let mut grad_in = vec![T::zero(); input.len()];
    for c in 0..channels {
        let d_mean = grad * two * (batch_mean[c] - target_mean[c]) * inv_c / count;
        let d_var = grad * two * (batch_var[c] - target_var[c]) * inv_c;
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            for (gi, &x) in grad_in[base..base + plane].iter_mut().zip(&input[base..base + plane]) {
                *gi = d_mean + d_var * two * (x - batch_mean[c]) / count;
            }
        }
    }
    grad_in
}

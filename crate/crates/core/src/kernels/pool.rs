//! Max pooling and global average pooling over [B, C, H, W].

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct PoolDims {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl PoolDims {
    pub fn compute(input_shape: &[usize], kernel: usize, stride: usize) -> Option<PoolDims> {
        if input_shape.len() != 4 || kernel == 0 || stride == 0 {
            return None;
        }
        let (batch, channels, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        if h < kernel || w < kernel {
            return None;
        }
        let h_out = (h - kernel) / stride + 1;
        let w_out = (w - kernel) / stride + 1;
        Some(PoolDims { batch, channels, h, w, kernel, stride, h_out, w_out })
    }
}

/// Max pool; returns the output and the flat input index of each maximum
/// (first occurrence wins on ties) for the backward scatter.
pub fn maxpool_forward<T: Scalar>(input: &[T], d: &PoolDims) -> (Vec<T>, Vec<usize>) {
    let out_plane = d.h_out * d.w_out;
    let n_out = d.batch * d.channels * out_plane;
    let mut out = vec![T::zero(); n_out];
    let mut argmax = vec![0usize; n_out];
    for bc in 0..d.batch * d.channels {
        let in_base = bc * d.h * d.w;
        let out_base = bc * out_plane;
        for oy in 0..d.h_out {
            for ox in 0..d.w_out {
                let y0 = oy * d.stride;
                let x0 = ox * d.stride;
                let mut best = input[in_base + y0 * d.w + x0];
                let mut best_idx = in_base + y0 * d.w + x0;
                for ky in 0..d.kernel {
                    for kx in 0..d.kernel {
                        let idx = in_base + (y0 + ky) * d.w + (x0 + kx);
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[out_base + oy * d.w_out + ox] = best;
                argmax[out_base + oy * d.w_out + ox] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<T: Scalar>(grad_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut grad_in = vec![T::zero(); input_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        grad_in[idx] += g;
    }
    grad_in
}

/// [B, C, H, W] -> [B, C].
pub fn global_avg_pool_forward<T: Scalar>(input: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize(plane);
    let mut out = vec![T::zero(); batch * channels];
    for (bc, o) in out.iter_mut().enumerate() {
        let base = bc * plane;
        let mut acc = T::zero();
        for &v in &input[base..base + plane] {
            acc += v;
        }
        *o = acc * inv;
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &[T], plane: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize(plane);
    let mut grad_in = vec![T::zero(); grad_out.len() * plane];
    for (bc, &g) in grad_out.iter().enumerate() {
        let gv = g * inv;
        for gi in &mut grad_in[bc * plane..(bc + 1) * plane] {
            *gi = gv;
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_2x2_picks_maxima() {
        let d = PoolDims::compute(&[1, 1, 2, 4], 2, 2).unwrap();
        let input = vec![1.0f32, 2.0, 5.0, 3.0, 4.0, 0.0, 1.0, 6.0];
        let (out, argmax) = maxpool_forward(&input, &d);
        assert_eq!(out, vec![4.0, 6.0]);
        assert_eq!(argmax, vec![4, 7]);
        let grad = maxpool_backward(&[1.0f32, 2.0], &argmax, input.len());
        assert_eq!(grad, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn gap_averages_each_plane() {
        let out = global_avg_pool_forward(&[1.0f64, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0], 1, 2, 4);
        assert_eq!(out, vec![2.5, 25.0]);
    }
}

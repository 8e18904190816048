//! Fully-connected layer: x[B, I] * W[O, I]^T + b[O].

use rayon::prelude::*;

use crate::scalar::Scalar;

pub fn forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, batch: usize, in_f: usize, out_f: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * out_f];
    out.par_chunks_mut(out_f).enumerate().for_each(|(b, out_row)| {
        let x_row = &x[b * in_f..(b + 1) * in_f];
        for (o, out_v) in out_row.iter_mut().enumerate() {
            let w_row = &weight[o * in_f..(o + 1) * in_f];
            let mut acc = bias.map_or(T::zero(), |bb| bb[o]);
            for (&xv, &wv) in x_row.iter().zip(w_row) {
                acc += xv * wv;
            }
            *out_v = acc;
        }
    });
    out
}

pub fn backward_input<T: Scalar>(grad_out: &[T], weight: &[T], batch: usize, in_f: usize, out_f: usize) -> Vec<T> {
    let mut grad_x = vec![T::zero(); batch * in_f];
    grad_x.par_chunks_mut(in_f).enumerate().for_each(|(b, gx_row)| {
        let g_row = &grad_out[b * out_f..(b + 1) * out_f];
        for (o, &g) in g_row.iter().enumerate() {
            let w_row = &weight[o * in_f..(o + 1) * in_f];
            for (gx, &wv) in gx_row.iter_mut().zip(w_row) {
                *gx += g * wv;
            }
        }
    });
    grad_x
}

pub fn backward_weight<T: Scalar>(grad_out: &[T], x: &[T], batch: usize, in_f: usize, out_f: usize) -> Vec<T> {
    let mut grad_w = vec![T::zero(); out_f * in_f];
    grad_w.par_chunks_mut(in_f).enumerate().for_each(|(o, gw_row)| {
        for b in 0..batch {
            let g = grad_out[b * out_f + o];
            let x_row = &x[b * in_f..(b + 1) * in_f];
            for (gw, &xv) in gw_row.iter_mut().zip(x_row) {
                *gw += g * xv;
            }
        }
    });
    grad_w
}

pub fn backward_bias<T: Scalar>(grad_out: &[T], batch: usize, out_f: usize) -> Vec<T> {
    let mut grad_b = vec![T::zero(); out_f];
    for b in 0..batch {
        for (gb, &g) in grad_b.iter_mut().zip(&grad_out[b * out_f..(b + 1) * out_f]) {
            *gb += g;
        }
    }
    grad_b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_hand_computation() {
        // x = [[1, 2]], W = [[3, 4], [5, 6]], b = [10, 20]
        let out = forward(&[1.0f64, 2.0], &[3.0, 4.0, 5.0, 6.0], Some(&[10.0, 20.0]), 1, 2, 2);
        assert_eq!(out, vec![21.0, 37.0]);
    }
}

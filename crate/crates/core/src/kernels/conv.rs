//! Direct 2-D cross-correlation and its backward passes.
//!
//! The implementation is an explicit sliding-window cross-correlation; the
//! stride-1 fast path reduces every inner step to a contiguous axpy so the
//! compiler can vectorize it.

use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn compute(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Option<ConvDims> {
        if input_shape.len() != 4 || weight_shape.len() != 4 || stride == 0 {
            return None;
        }
        let (batch, c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (c_out, wc_in, kh, kw) = (weight_shape[0], weight_shape[1], weight_shape[2], weight_shape[3]);
        if wc_in != c_in {
            return None;
        }
        let h_pad = h + 2 * padding;
        let w_pad = w + 2 * padding;
        if h_pad < kh || w_pad < kw {
            return None;
        }
        let h_out = (h_pad - kh) / stride + 1;
        let w_out = (w_pad - kw) / stride + 1;
        if h_out == 0 || w_out == 0 {
            return None;
        }
        Some(ConvDims { batch, c_in, h, w, c_out, kh, kw, stride, padding, h_out, w_out })
    }
}

/// Valid output-column range [lo, hi) for a kernel column `kx`:
/// input column ix = ox*s + kx - p must land in [0, w).
fn ox_range(kx: usize, d: &ConvDims) -> (usize, usize) {
    let s = d.stride;
    let p = d.padding as isize;
    let off = kx as isize - p; // ix = ox*s + off
    let lo = if off >= 0 { 0 } else { ((-off) as usize + s - 1) / s };
    let hi_incl = (d.w as isize - 1 - off) / s as isize;
    if hi_incl < lo as isize {
        return (0, 0);
    }
    (lo, (hi_incl as usize).min(d.w_out - 1) + 1)
}

pub fn forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Vec<T> {
    let out_plane = d.h_out * d.w_out;
    let in_plane = d.h * d.w;
    let mut out = vec![T::zero(); d.batch * d.c_out * out_plane];

    out.par_chunks_mut(d.c_out * out_plane)
        .enumerate()
        .for_each(|(b, out_b)| {
            let in_b = &input[b * d.c_in * in_plane..(b + 1) * d.c_in * in_plane];
            if d.stride == 1 {
                forward_one_stride1(in_b, weight, bias, out_b, d);
            } else {
                forward_one_strided(in_b, weight, bias, out_b, d);
            }
        });
    out
}

/// dst[i] += w0*s0[i] + w1*s1[i] + w2*s2[i]
fn axpy3<T: Scalar>(dst: &mut [T], w0: T, s0: &[T], w1: T, s1: &[T], w2: T, s2: &[T]) {
    let n = dst.len();
    let (s0, s1, s2) = (&s0[..n], &s1[..n], &s2[..n]);
    for i in 0..n {
        dst[i] += w0 * s0[i] + w1 * s1[i] + w2 * s2[i];
    }
}

/// Interior output-column range where every kx of a width-3 kernel reads a
/// valid input column (stride 1).
fn interior3(d: &ConvDims) -> (usize, usize) {
    let lo = d.padding.min(d.w_out);
    let hi = (d.w + d.padding).saturating_sub(2).min(d.w_out);
    (lo, hi.max(lo))
}

/// Stride-1 path: one contiguous pass over the output row per
/// (co, ci, ky); width-3 kernels fuse all three taps into a single pass.
fn forward_one_stride1<T: Scalar>(in_b: &[T], weight: &[T], bias: Option<&[T]>, out_b: &mut [T], d: &ConvDims) {
    let out_plane = d.h_out * d.w_out;
    let in_plane = d.h * d.w;
    let p = d.padding;
    for co in 0..d.c_out {
        let out_c = &mut out_b[co * out_plane..(co + 1) * out_plane];
        if let Some(bias) = bias {
            out_c.fill(bias[co]);
        }
        for ci in 0..d.c_in {
            let in_c = &in_b[ci * in_plane..(ci + 1) * in_plane];
            let w_base = (co * d.c_in + ci) * d.kh * d.kw;
            for ky in 0..d.kh {
                let wk = &weight[w_base + ky * d.kw..w_base + (ky + 1) * d.kw];
                if d.kw == 3 {
                    let (lo, hi) = interior3(d);
                    for oy in 0..d.h_out {
                        let iy = (oy + ky) as isize - p as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let in_row = &in_c[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let out_row = &mut out_c[oy * d.w_out..(oy + 1) * d.w_out];
                        if lo < hi {
                            let base = lo - p;
                            axpy3(
                                &mut out_row[lo..hi],
                                wk[0],
                                &in_row[base..],
                                wk[1],
                                &in_row[base + 1..],
                                wk[2],
                                &in_row[base + 2..],
                            );
                        }
                        for ox in (0..lo).chain(hi..d.w_out) {
                            let mut acc = T::zero();
                            for (kx, &wv) in wk.iter().enumerate() {
                                let ix = ox as isize + kx as isize - p as isize;
                                if ix >= 0 && ix < d.w as isize {
                                    acc += wv * in_row[ix as usize];
                                }
                            }
                            out_row[ox] += acc;
                        }
                    }
                } else {
                    for (kx, &wv) in wk.iter().enumerate() {
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = ox_range(kx, d);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..d.h_out {
                            let iy = (oy + ky) as isize - p as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let in_row = &in_c[iy as usize * d.w..(iy as usize + 1) * d.w];
                            let out_row = &mut out_c[oy * d.w_out + ox_lo..oy * d.w_out + ox_hi];
                            // ox_range guarantees ox_lo + kx >= padding
                            let ix0 = ox_lo + kx - p;
                            let src = &in_row[ix0..ix0 + (ox_hi - ox_lo)];
                            for (o, &i) in out_row.iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Phase decomposition of one input channel plane: phase r holds the
/// columns j*s + r of every row, so a strided column walk becomes a
/// contiguous slice of the phase buffer. Row y of phase r lives at
/// offset[r] + y * width[r].
struct Phases {
    offset: Vec<usize>,
    width: Vec<usize>,
    total: usize,
}

impl Phases {
    fn new(d: &ConvDims) -> Phases {
        let s = d.stride;
        let mut offset = Vec::with_capacity(s);
        let mut width = Vec::with_capacity(s);
        let mut total = 0usize;
        for r in 0..s {
            offset.push(total);
            let w_r = if r < d.w { (d.w - r).div_ceil(s) } else { 0 };
            width.push(w_r);
            total += d.h * w_r;
        }
        Phases { offset, width, total }
    }

    fn split<T: Scalar>(&self, plane: &[T], d: &ConvDims, buf: &mut [T]) {
        let s = d.stride;
        for r in 0..s {
            let w_r = self.width[r];
            for y in 0..d.h {
                let dst = &mut buf[self.offset[r] + y * w_r..self.offset[r] + (y + 1) * w_r];
                let row = &plane[y * d.w..(y + 1) * d.w];
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = row[j * s + r];
                }
            }
        }
    }

    /// Phase index mapping for a kernel column: input column
    /// ix = ox * s + kx - p sits in phase r at index ox + q.
    fn locate(&self, kx: usize, d: &ConvDims) -> (usize, isize) {
        let t = kx as isize - d.padding as isize;
        let s = d.stride as isize;
        let r = t.rem_euclid(s);
        let q = (t - r) / s;
        (r as usize, q)
    }
}

/// Strided path: split each input channel into stride phases once, then
/// run contiguous accumulation exactly like the stride-1 kernel.
fn forward_one_strided<T: Scalar>(in_b: &[T], weight: &[T], bias: Option<&[T]>, out_b: &mut [T], d: &ConvDims) {
    let out_plane = d.h_out * d.w_out;
    let in_plane = d.h * d.w;
    let phases = Phases::new(d);
    let mut scratch = vec![T::zero(); phases.total];

    if let Some(bias) = bias {
        for co in 0..d.c_out {
            out_b[co * out_plane..(co + 1) * out_plane].fill(bias[co]);
        }
    }
    for ci in 0..d.c_in {
        phases.split(&in_b[ci * in_plane..(ci + 1) * in_plane], d, &mut scratch);
        for co in 0..d.c_out {
            let out_c = &mut out_b[co * out_plane..(co + 1) * out_plane];
            for ky in 0..d.kh {
                let wk_base = ((co * d.c_in + ci) * d.kh + ky) * d.kw;
                if d.kw == 3 {
                    let taps: Vec<(usize, usize, usize, isize)> =
                        (0..3).map(|kx| { let (lo, hi) = ox_range(kx, d); let (r, q) = phases.locate(kx, d); (lo, hi, r, q) }).collect();
                    let common_lo = taps.iter().map(|t| t.0).max().unwrap();
                    let common_hi = taps.iter().map(|t| t.1).min().unwrap();
                    for oy in 0..d.h_out {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let out_row = &mut out_c[oy * d.w_out..(oy + 1) * d.w_out];
                        if common_lo < common_hi {
                            let src = |kx: usize| {
                                let (_, _, r, q) = taps[kx];
                                let row_base = phases.offset[r] + iy as usize * phases.width[r];
                                &scratch[(row_base as isize + common_lo as isize + q) as usize..]
                            };
                            axpy3(
                                &mut out_row[common_lo..common_hi],
                                weight[wk_base],
                                src(0),
                                weight[wk_base + 1],
                                src(1),
                                weight[wk_base + 2],
                                src(2),
                            );
                        }
                        for (kx, &(lo, hi, r, q)) in taps.iter().enumerate() {
                            let wv = weight[wk_base + kx];
                            let row_base = phases.offset[r] + iy as usize * phases.width[r];
                            for ox in (lo..common_lo.min(hi)).chain(common_hi.max(lo)..hi) {
                                let j = (ox as isize + q) as usize;
                                out_row[ox] += wv * scratch[row_base + j];
                            }
                        }
                    }
                } else {
                    for kx in 0..d.kw {
                        let wv = weight[wk_base + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = ox_range(kx, d);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let (r, q) = phases.locate(kx, d);
                        let w_r = phases.width[r];
                        for oy in 0..d.h_out {
                            let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let row_base = phases.offset[r] + iy as usize * w_r;
                            let j0 = (ox_lo as isize + q) as usize;
                            let src = &scratch[row_base + j0..row_base + j0 + (ox_hi - ox_lo)];
                            let out_row = &mut out_c[oy * d.w_out + ox_lo..oy * d.w_out + ox_hi];
                            for (o, &i) in out_row.iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. input: transposed correlation of the output gradient.
pub fn backward_input<T: Scalar>(grad_out: &[T], weight: &[T], d: &ConvDims) -> Vec<T> {
    let out_plane = d.h_out * d.w_out;
    let in_plane = d.h * d.w;
    let mut grad_in = vec![T::zero(); d.batch * d.c_in * in_plane];

    grad_in
        .par_chunks_mut(d.c_in * in_plane)
        .enumerate()
        .for_each(|(b, gin_b)| {
            let gout_b = &grad_out[b * d.c_out * out_plane..(b + 1) * d.c_out * out_plane];
            if d.stride == 1 {
                backward_input_one_stride1(gout_b, weight, gin_b, d);
            } else {
                backward_input_one_strided(gout_b, weight, gin_b, d);
            }
        });
    grad_in
}

fn backward_input_one_stride1<T: Scalar>(gout_b: &[T], weight: &[T], gin_b: &mut [T], d: &ConvDims) {
    let out_plane = d.h_out * d.w_out;
    let in_plane = d.h * d.w;
    for co in 0..d.c_out {
        let gout_c = &gout_b[co * out_plane..(co + 1) * out_plane];
        for ci in 0..d.c_in {
            let gin_c = &mut gin_b[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = weight[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = ox_range(kx, d);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..d.h_out {
                        let iy = (oy + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let gout_row = &gout_c[oy * d.w_out + ox_lo..oy * d.w_out + ox_hi];
                        let gin_row = &mut gin_c[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let ix0 = ox_lo + kx - d.padding;
                        let dst = &mut gin_row[ix0..ix0 + (ox_hi - ox_lo)];
                        for (i, &g) in dst.iter_mut().zip(gout_row) {
                            *i += wv * g;
                        }
                    }
                }
            }
        }
    }
}

fn backward_input_one_strided<T: Scalar>(gout_b: &[T], weight: &[T], gin_b: &mut [T], d: &ConvDims) {
    let out_plane = d.h_out * d.w_out;
    let in_plane = d.h * d.w;
    let phases = Phases::new(d);
    let mut phase_acc = vec![T::zero(); phases.total];

    for ci in 0..d.c_in {
        phase_acc.fill(T::zero());
        for co in 0..d.c_out {
            let gout_c = &gout_b[co * out_plane..(co + 1) * out_plane];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wv = weight[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = ox_range(kx, d);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let (r, q) = phases.locate(kx, d);
                    let w_r = phases.width[r];
                    for oy in 0..d.h_out {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let row_base = phases.offset[r] + iy as usize * w_r;
                        let j0 = (ox_lo as isize + q) as usize;
                        let dst = &mut phase_acc[row_base + j0..row_base + j0 + (ox_hi - ox_lo)];
                        let gout_row = &gout_c[oy * d.w_out + ox_lo..oy * d.w_out + ox_hi];
                        for (a, &g) in dst.iter_mut().zip(gout_row) {
                            *a += wv * g;
                        }
                    }
                }
            }
        }
        // merge phases back into the strided layout
        let gin_c = &mut gin_b[ci * in_plane..(ci + 1) * in_plane];
        for r in 0..d.stride {
            let w_r = phases.width[r];
            for y in 0..d.h {
                let src = &phase_acc[phases.offset[r] + y * w_r..phases.offset[r] + (y + 1) * w_r];
                let row = &mut gin_c[y * d.w..(y + 1) * d.w];
                for (j, &v) in src.iter().enumerate() {
                    row[j * d.stride + r] += v;
                }
            }
        }
    }
}

/// Dot product with four independent accumulators; the fixed summation
/// order keeps results reproducible while letting the loop vectorize.
fn dot_unrolled<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (x, y) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Three shifted dot products sharing one pass over `g`.
fn dot3<T: Scalar>(g: &[T], a0: &[T], a1: &[T], a2: &[T]) -> (T, T, T) {
    let n = g.len();
    let (a0, a1, a2) = (&a0[..n], &a1[..n], &a2[..n]);
    let (mut acc0, mut acc1, mut acc2) = (T::zero(), T::zero(), T::zero());
    for i in 0..n {
        acc0 += g[i] * a0[i];
        acc1 += g[i] * a1[i];
        acc2 += g[i] * a2[i];
    }
    (acc0, acc1, acc2)
}

/// Gradient w.r.t. the filter bank; accumulation runs over the batch in a
/// fixed order per output channel.
pub fn backward_weight<T: Scalar>(grad_out: &[T], input: &[T], d: &ConvDims) -> Vec<T> {
    let out_plane = d.h_out * d.w_out;
    let in_plane = d.h * d.w;
    let w_stride = d.c_in * d.kh * d.kw;

    if d.stride == 1 {
        let mut grad_w = vec![T::zero(); d.c_out * w_stride];
        grad_w
            .par_chunks_mut(w_stride)
            .enumerate()
            .for_each(|(co, gw_c)| {
                for b in 0..d.batch {
                    let gout_c = &grad_out[(b * d.c_out + co) * out_plane..(b * d.c_out + co + 1) * out_plane];
                    let in_b = &input[b * d.c_in * in_plane..(b + 1) * d.c_in * in_plane];
                    for ci in 0..d.c_in {
                        let in_c = &in_b[ci * in_plane..(ci + 1) * in_plane];
                        for ky in 0..d.kh {
                            if d.kw == 3 {
                                let (lo, hi) = interior3(d);
                                let mut acc = [T::zero(); 3];
                                for oy in 0..d.h_out {
                                    let iy = (oy + ky) as isize - d.padding as isize;
                                    if iy < 0 || iy >= d.h as isize {
                                        continue;
                                    }
                                    let in_row = &in_c[iy as usize * d.w..(iy as usize + 1) * d.w];
                                    let gout_row = &gout_c[oy * d.w_out..(oy + 1) * d.w_out];
                                    if lo < hi {
                                        let base = lo - d.padding;
                                        let (d0, d1, d2) = dot3(
                                            &gout_row[lo..hi],
                                            &in_row[base..],
                                            &in_row[base + 1..],
                                            &in_row[base + 2..],
                                        );
                                        acc[0] += d0;
                                        acc[1] += d1;
                                        acc[2] += d2;
                                    }
                                    for ox in (0..lo).chain(hi..d.w_out) {
                                        let g = gout_row[ox];
                                        for (kx, a) in acc.iter_mut().enumerate() {
                                            let ix = ox as isize + kx as isize - d.padding as isize;
                                            if ix >= 0 && ix < d.w as isize {
                                                *a += g * in_row[ix as usize];
                                            }
                                        }
                                    }
                                }
                                for (kx, &a) in acc.iter().enumerate() {
                                    gw_c[(ci * d.kh + ky) * d.kw + kx] += a;
                                }
                            } else {
                                for kx in 0..d.kw {
                                    let (ox_lo, ox_hi) = ox_range(kx, d);
                                    if ox_lo >= ox_hi {
                                        continue;
                                    }
                                    let mut acc = T::zero();
                                    for oy in 0..d.h_out {
                                        let iy = (oy + ky) as isize - d.padding as isize;
                                        if iy < 0 || iy >= d.h as isize {
                                            continue;
                                        }
                                        let gout_row = &gout_c[oy * d.w_out + ox_lo..oy * d.w_out + ox_hi];
                                        let in_row = &in_c[iy as usize * d.w..(iy as usize + 1) * d.w];
                                        let ix0 = ox_lo + kx - d.padding;
                                        acc += dot_unrolled(gout_row, &in_row[ix0..ix0 + (ox_hi - ox_lo)]);
                                    }
                                    gw_c[(ci * d.kh + ky) * d.kw + kx] += acc;
                                }
                            }
                        }
                    }
                }
            });
        return grad_w;
    }

    // strided path: phase-split each input channel so the inner dot is
    // contiguous; sequential so every filter element accumulates in batch
    // order
    let mut grad_w = vec![T::zero(); d.c_out * w_stride];
    let phases = Phases::new(d);
    let mut scratch = vec![T::zero(); phases.total];
    for b in 0..d.batch {
        let in_b = &input[b * d.c_in * in_plane..(b + 1) * d.c_in * in_plane];
        for ci in 0..d.c_in {
            phases.split(&in_b[ci * in_plane..(ci + 1) * in_plane], d, &mut scratch);
            for co in 0..d.c_out {
                let gout_c = &grad_out[(b * d.c_out + co) * out_plane..(b * d.c_out + co + 1) * out_plane];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let (ox_lo, ox_hi) = ox_range(kx, d);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let (r, q) = phases.locate(kx, d);
                        let w_r = phases.width[r];
                        let mut acc = T::zero();
                        for oy in 0..d.h_out {
                            let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let row_base = phases.offset[r] + iy as usize * w_r;
                            let j0 = (ox_lo as isize + q) as usize;
                            let gout_row = &gout_c[oy * d.w_out + ox_lo..oy * d.w_out + ox_hi];
                            acc += dot_unrolled(gout_row, &scratch[row_base + j0..row_base + j0 + (ox_hi - ox_lo)]);
                        }
                        grad_w[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx] += acc;
                    }
                }
            }
        }
    }
    grad_w
}

pub fn backward_bias<T: Scalar>(grad_out: &[T], d: &ConvDims) -> Vec<T> {
    let out_plane = d.h_out * d.w_out;
    let mut grad_b = vec![T::zero(); d.c_out];
    for b in 0..d.batch {
        for (co, gb) in grad_b.iter_mut().enumerate() {
            let gout_c = &grad_out[(b * d.c_out + co) * out_plane..(b * d.c_out + co + 1) * out_plane];
            for &g in gout_c {
                *gb += g;
            }
        }
    }
    grad_b
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive 7-nested-loop reference convolution.
    fn conv_reference(input: &[f64], weight: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.batch * d.c_out * d.h_out * d.w_out];
        for b in 0..d.batch {
            for co in 0..d.c_out {
                for oy in 0..d.h_out {
                    for ox in 0..d.w_out {
                        let mut acc = bias.map_or(0.0, |bb| bb[co]);
                        for ci in 0..d.c_in {
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                                    let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    let iv = input[((b * d.c_in + ci) * d.h + iy as usize) * d.w + ix as usize];
                                    let wv = weight[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                                    acc += iv * wv;
                                }
                            }
                        }
                        out[((b * d.c_out + co) * d.h_out + oy) * d.w_out + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_buf(n: usize, rng: &mut crate::rng::SeededRng) -> Vec<f64> {
        (0..n).map(|_| crate::rng::next_gaussian(rng)).collect()
    }

    #[test]
    fn ones_3x3_gives_nine() {
        let d = ConvDims::compute(&[1, 1, 3, 3], &[1, 1, 3, 3], 1, 0).unwrap();
        let out = forward(&vec![1.0f64; 9], &vec![1.0f64; 9], None, &d);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn identity_1x1_kernel_preserves_input() {
        let d = ConvDims::compute(&[2, 1, 4, 5], &[1, 1, 1, 1], 1, 0).unwrap();
        let mut rng = crate::rng::rng_from_seed(1);
        let input = rand_buf(2 * 4 * 5, &mut rng);
        let out = forward(&input, &[1.0], None, &d);
        assert_eq!(out, input);
    }

    #[test]
    fn matches_naive_loop_reference() {
        let mut rng = crate::rng::rng_from_seed(2);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 0)] {
            let d = ConvDims::compute(&[2, 3, 8, 8], &[4, 3, 3, 3], stride, padding).unwrap();
            let input = rand_buf(2 * 3 * 64, &mut rng);
            let weight = rand_buf(4 * 3 * 9, &mut rng);
            let bias = rand_buf(4, &mut rng);
            let fast = forward(&input, &weight, Some(&bias), &d);
            let slow = conv_reference(&input, &weight, Some(&bias), &d);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_arithmetic_rejects_too_small_input() {
        assert!(ConvDims::compute(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_none());
        assert!(ConvDims::compute(&[1, 2, 4, 4], &[1, 3, 3, 3], 1, 1).is_none());
    }
}

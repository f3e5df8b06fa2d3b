//! Raw numeric kernels behind the tape operations.
//!
//! Every kernel has a sequential implementation; with the `parallel` feature
//! the hot ones also have a rayon variant that splits work across disjoint
//! output rows. A parallel kernel computes each output element with the same
//! inner loop and accumulation order as the sequential one, so results are
//! bit-identical regardless of thread count. Dispatch picks the parallel
//! path only above a size threshold where the spawn overhead pays off.

use crate::tensor::Real;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work-size threshold (multiply-accumulate count) below which the
/// sequential path wins. Parallel overhead is on the order of microseconds.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 15;

// ── matmul ──────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n], accumulated over k in ascending order.
pub fn matmul_seq<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        matmul_row(row, b, k, n, out_row);
    }
}

#[inline]
fn matmul_row<F: Real>(row: &[F], b: &[F], k: usize, n: usize, out_row: &mut [F]) {
    for v in out_row.iter_mut() {
        *v = F::zero();
    }
    for (p, &av) in row.iter().enumerate().take(k) {
        let b_row = &b[p * n..(p + 1) * n];
        for j in 0..n {
            out_row[j] = out_row[j] + av * b_row[j];
        }
    }
}

pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            matmul_row(&a[i * k..(i + 1) * k], b, k, n, out_row);
        });
        return;
    }
    matmul_seq(a, b, m, k, n, out);
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ.
pub fn matmul_nt_seq<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for p in 0..k {
                acc = acc + row[p] * b_row[p];
            }
            out[i * n + j] = acc;
        }
    }
}

pub fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            let row = &a[i * k..(i + 1) * k];
            for (j, slot) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                let mut acc = F::zero();
                for p in 0..k {
                    acc = acc + row[p] * b_row[p];
                }
                *slot = acc;
            }
        });
        return;
    }
    matmul_nt_seq(a, b, m, k, n, out);
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]. Used by matmul backward for the rhs gradient.
pub fn matmul_tn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for v in out.iter_mut() {
        *v = F::zero();
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + av * b_row[j];
            }
        }
    }
}

// ── conv2d ──────────────────────────────────────────────────────────

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Full convolution: x[ci,h,w] * k[co,ci,kh,kw] → out[co,oh,ow].
/// Taps accumulate in (ci, kh, kw) ascending order.
pub fn conv2d_seq<F: Real>(
    x: &[F],
    kernel: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
    out: &mut [F],
) {
    let oh = conv_out_extent(h, ksize, stride, padding);
    let ow = conv_out_extent(w, ksize, stride, padding);
    for co in 0..c_out {
        conv2d_channel(
            x, kernel, c_in, h, w, co, ksize, stride, padding, oh, ow,
            &mut out[co * oh * ow..(co + 1) * oh * ow],
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_channel<F: Real>(
    x: &[F],
    kernel: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    co: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out_plane: &mut [F],
) {
    let kbase = co * c_in * ksize * ksize;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = F::zero();
            for ci in 0..c_in {
                let xplane = &x[ci * h * w..(ci + 1) * h * w];
                let kplane = &kernel[kbase + ci * ksize * ksize..kbase + (ci + 1) * ksize * ksize];
                for ky in 0..ksize {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..ksize {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc = acc + xplane[iy as usize * w + ix as usize] * kplane[ky * ksize + kx];
                    }
                }
            }
            out_plane[oy * ow + ox] = acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d<F: Real>(
    x: &[F],
    kernel: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
    out: &mut [F],
) {
    let oh = conv_out_extent(h, ksize, stride, padding);
    let ow = conv_out_extent(w, ksize, stride, padding);
    #[cfg(feature = "parallel")]
    if c_out * oh * ow * c_in * ksize * ksize >= PAR_THRESHOLD && c_out > 1 {
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(co, plane)| {
                conv2d_channel(
                    x, kernel, c_in, h, w, co, ksize, stride, padding, oh, ow, plane,
                );
            });
        return;
    }
    conv2d_seq(x, kernel, c_in, h, w, c_out, ksize, stride, padding, out);
}

/// Gradients of conv2d w.r.t. input and kernel. Sequential scatter;
/// backward cost is dominated by sample-level parallelism upstream.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Real>(
    x: &[F],
    kernel: &[F],
    dy: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
    dx: &mut [F],
    dk: &mut [F],
) {
    let oh = conv_out_extent(h, ksize, stride, padding);
    let ow = conv_out_extent(w, ksize, stride, padding);
    for co in 0..c_out {
        let dplane = &dy[co * oh * ow..(co + 1) * oh * ow];
        let kbase = co * c_in * ksize * ksize;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dplane[oy * ow + ox];
                if g == F::zero() {
                    continue;
                }
                for ci in 0..c_in {
                    for ky in 0..ksize {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..ksize {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = ci * h * w + iy as usize * w + ix as usize;
                            let kidx = kbase + ci * ksize * ksize + ky * ksize + kx;
                            dx[xi] = dx[xi] + g * kernel[kidx];
                            dk[kidx] = dk[kidx] + g * x[xi];
                        }
                    }
                }
            }
        }
    }
}

// ── depthwise conv (square kernel, stride 1, same padding) ─────────

pub fn depthwise_conv2d<F: Real>(
    x: &[F],
    kernel: &[F],
    c: usize,
    h: usize,
    w: usize,
    ksize: usize,
    out: &mut [F],
) {
    let pad = ksize / 2;
    for ch in 0..c {
        let xplane = &x[ch * h * w..(ch + 1) * h * w];
        let kplane = &kernel[ch * ksize * ksize..(ch + 1) * ksize * ksize];
        let oplane = &mut out[ch * h * w..(ch + 1) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = F::zero();
                for ky in 0..ksize {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..ksize {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc = acc + xplane[iy as usize * w + ix as usize] * kplane[ky * ksize + kx];
                    }
                }
                oplane[oy * w + ox] = acc;
            }
        }
    }
}

pub fn depthwise_conv2d_backward<F: Real>(
    x: &[F],
    kernel: &[F],
    dy: &[F],
    c: usize,
    h: usize,
    w: usize,
    ksize: usize,
    dx: &mut [F],
    dk: &mut [F],
) {
    let pad = ksize / 2;
    for ch in 0..c {
        let xplane = &x[ch * h * w..(ch + 1) * h * w];
        let kplane = &kernel[ch * ksize * ksize..(ch + 1) * ksize * ksize];
        let dplane = &dy[ch * h * w..(ch + 1) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let g = dplane[oy * w + ox];
                for ky in 0..ksize {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..ksize {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xi = ch * h * w + iy as usize * w + ix as usize;
                        let kidx = ch * ksize * ksize + ky * ksize + kx;
                        dx[xi] = dx[xi] + g * kplane[ky * ksize + kx];
                        dk[kidx] = dk[kidx] + g * xplane[iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
}

// ── 3×3 pooling, stride 1, same padding ────────────────────────────

/// Average over the valid taps only, so constant maps stay constant at
/// the borders.
pub fn avg_pool3<F: Real>(x: &[F], c: usize, h: usize, w: usize, out: &mut [F]) {
    for ch in 0..c {
        let xplane = &x[ch * h * w..(ch + 1) * h * w];
        let oplane = &mut out[ch * h * w..(ch + 1) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = F::zero();
                let mut count = 0usize;
                for dy in -1i32..=1 {
                    let iy = oy as i32 + dy;
                    if iy < 0 || iy >= h as i32 {
                        continue;
                    }
                    for dx in -1i32..=1 {
                        let ix = ox as i32 + dx;
                        if ix < 0 || ix >= w as i32 {
                            continue;
                        }
                        acc = acc + xplane[iy as usize * w + ix as usize];
                        count += 1;
                    }
                }
                oplane[oy * w + ox] = acc / F::from_f64(count as f64);
            }
        }
    }
}

pub fn avg_pool3_backward<F: Real>(dy: &[F], c: usize, h: usize, w: usize, dx: &mut [F]) {
    for ch in 0..c {
        let dplane = &dy[ch * h * w..(ch + 1) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let mut count = 0usize;
                for dyy in -1i32..=1 {
                    let iy = oy as i32 + dyy;
                    if iy < 0 || iy >= h as i32 {
                        continue;
                    }
                    for dxx in -1i32..=1 {
                        let ix = ox as i32 + dxx;
                        if ix >= 0 && ix < w as i32 {
                            count += 1;
                        }
                    }
                }
                let g = dplane[oy * w + ox] / F::from_f64(count as f64);
                for dyy in -1i32..=1 {
                    let iy = oy as i32 + dyy;
                    if iy < 0 || iy >= h as i32 {
                        continue;
                    }
                    for dxx in -1i32..=1 {
                        let ix = ox as i32 + dxx;
                        if ix < 0 || ix >= w as i32 {
                            continue;
                        }
                        let xi = ch * h * w + iy as usize * w + ix as usize;
                        dx[xi] = dx[xi] + g;
                    }
                }
            }
        }
    }
}

/// Max over valid taps; records the winning flat index for the backward
/// pass. Ties resolve to the first tap in scan order.
pub fn max_pool3<F: Real>(x: &[F], c: usize, h: usize, w: usize, out: &mut [F], argmax: &mut [u32]) {
    for ch in 0..c {
        let xplane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let mut best = F::neg_infinity();
                let mut best_idx = 0u32;
                for dy in -1i32..=1 {
                    let iy = oy as i32 + dy;
                    if iy < 0 || iy >= h as i32 {
                        continue;
                    }
                    for dx in -1i32..=1 {
                        let ix = ox as i32 + dx;
                        if ix < 0 || ix >= w as i32 {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = xplane[idx];
                        if v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                let o = ch * h * w + oy * w + ox;
                out[o] = best;
                argmax[o] = ch as u32 * (h * w) as u32 + best_idx;
            }
        }
    }
}

pub fn max_pool3_backward<F: Real>(dy: &[F], argmax: &[u32], dx: &mut [F]) {
    for (g, &src) in dy.iter().zip(argmax) {
        dx[src as usize] = dx[src as usize] + *g;
    }
}

// ── bilinear upsample (align_corners = false) ──────────────────────

/// Source coordinate and lerp weights for one output index.
#[inline]
pub fn bilinear_coord(dst: usize, in_extent: usize, out_extent: usize) -> (usize, usize, f64) {
    let scale = in_extent as f64 / out_extent as f64;
    let src = (dst as f64 + 0.5) * scale - 0.5;
    let src = src.max(0.0);
    let i0 = (src.floor() as usize).min(in_extent - 1);
    let i1 = (i0 + 1).min(in_extent - 1);
    let frac = (src - i0 as f64).min(1.0);
    (i0, i1, frac)
}

pub fn bilinear_upsample<F: Real>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [F],
) {
    for ch in 0..c {
        let xplane = &x[ch * h * w..(ch + 1) * h * w];
        let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_coord(oy, h, oh);
            let fy = F::from_f64(fy);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_coord(ox, w, ow);
                let fx = F::from_f64(fx);
                let one = F::one();
                let top = xplane[y0 * w + x0] * (one - fx) + xplane[y0 * w + x1] * fx;
                let bot = xplane[y1 * w + x0] * (one - fx) + xplane[y1 * w + x1] * fx;
                oplane[oy * ow + ox] = top * (one - fy) + bot * fy;
            }
        }
    }
}

pub fn bilinear_upsample_backward<F: Real>(
    dy: &[F],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [F],
) {
    for ch in 0..c {
        let dplane = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let xgrad = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_coord(oy, h, oh);
            let fy = F::from_f64(fy);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_coord(ox, w, ow);
                let fx = F::from_f64(fx);
                let one = F::one();
                let g = dplane[oy * ow + ox];
                xgrad[y0 * w + x0] = xgrad[y0 * w + x0] + g * (one - fy) * (one - fx);
                xgrad[y0 * w + x1] = xgrad[y0 * w + x1] + g * (one - fy) * fx;
                xgrad[y1 * w + x0] = xgrad[y1 * w + x0] + g * fy * (one - fx);
                xgrad[y1 * w + x1] = xgrad[y1 * w + x1] + g * fy * fx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..8).map(|v| v as f64 * 0.25 + 0.1).collect();
        let mut c1 = vec![0.0; 3 * 4];
        let mut c2 = vec![0.0; 3 * 4];
        matmul_seq(&a, &b, 3, 2, 4, &mut c1);
        matmul(&a, &b, 3, 2, 4, &mut c2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        // B is [2,2]; B^T columns become rows.
        let bt = vec![5.0, 7.0, 6.0, 8.0];
        let mut c1 = vec![0.0; 4];
        let mut c2 = vec![0.0; 4];
        matmul_nt_seq(&a, &b, 2, 2, 2, &mut c1);
        matmul_seq(&a, &bt, 2, 2, 2, &mut c2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn conv_extent_formula() {
        assert_eq!(conv_out_extent(64, 7, 4, 3), 16);
        assert_eq!(conv_out_extent(16, 3, 2, 1), 8);
        assert_eq!(conv_out_extent(5, 3, 1, 0), 3);
    }

    #[test]
    fn avg_pool_keeps_constants_constant() {
        let x = vec![2.5f64; 5 * 5];
        let mut out = vec![0.0; 25];
        avg_pool3(&x, 1, 5, 5, &mut out);
        for v in out {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_ties_take_first_in_scan_order() {
        let x = vec![1.0f64; 9];
        let mut out = vec![0.0; 9];
        let mut arg = vec![0u32; 9];
        max_pool3(&x, 1, 3, 3, &mut out, &mut arg);
        // Output (1,1) scans from (0,0); first tap wins the tie.
        assert_eq!(arg[4], 0);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut out = vec![0.0; 12];
        bilinear_upsample(&x, 1, 3, 4, 3, 4, &mut out);
        assert_eq!(x, out);
    }
}

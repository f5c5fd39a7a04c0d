//! Low-level layer kernels on `[C, s0, s1, s2]` feature maps (f64, standard
//! layout, s2 contiguous).
//!
//! 3x3x3 convolutions run as blocked im2col + GEMM with voxels as the long
//! GEMM dimension; the backward input pass is the same machinery with flipped
//! kernel offsets, so no transposed-convolution scatter buffer is needed.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array4, ArrayView2, ArrayViewMut2};

/// Voxels per im2col block (rounded down to whole s2-rows).
const TARGET_BLOCK_VOX: usize = 2048;

/// Reusable buffers for conv GEMMs.
#[derive(Default)]
pub(crate) struct ConvScratch {
    col: Vec<f64>,
    wbuf: Vec<f64>,
    dwt: Vec<f64>,
}

#[inline]
fn spatial(x: &Array4<f64>) -> (usize, usize, usize, usize) {
    let sh = x.shape();
    (sh[0], sh[1], sh[2], sh[3])
}

/// Fill `col` (shape `[k_rows, block_len]`) for voxel rows `[r0, r1)` of the
/// source map. A "row" is one contiguous s2-run; `flip` selects mirrored
/// kernel offsets (used by the backward-input pass).
#[allow(clippy::too_many_arguments)]
fn fill_col(
    col: &mut [f64],
    src: &[f64],
    channels: usize,
    s0: usize,
    s1: usize,
    s2: usize,
    r0: usize,
    r1: usize,
    flip: bool,
) {
    let block_len = (r1 - r0) * s2;
    let plane = s0 * s1 * s2;
    for ci in 0..channels {
        for k0 in 0..3usize {
            for k1 in 0..3usize {
                for k2 in 0..3usize {
                    let krow = ((ci * 3 + k0) * 3 + k1) * 3 + k2;
                    let dst = &mut col[krow * block_len..(krow + 1) * block_len];
                    let (o0, o1, o2) = if flip {
                        (1 - k0 as isize, 1 - k1 as isize, 1 - k2 as isize)
                    } else {
                        (k0 as isize - 1, k1 as isize - 1, k2 as isize - 1)
                    };
                    for r in r0..r1 {
                        let i0 = (r / s1) as isize + o0;
                        let i1 = (r % s1) as isize + o1;
                        let drow = &mut dst[(r - r0) * s2..(r - r0 + 1) * s2];
                        if i0 < 0 || i0 >= s0 as isize || i1 < 0 || i1 >= s1 as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src_row = ci * plane + (i0 as usize * s1 + i1 as usize) * s2;
                        // valid destination i2 range given source shift o2
                        let lo = (-o2).max(0) as usize;
                        let hi = ((s2 as isize - o2).min(s2 as isize)).max(0) as usize;
                        drow[..lo].fill(0.0);
                        drow[hi..].fill(0.0);
                        if hi > lo {
                            let src_lo = (lo as isize + o2) as usize;
                            drow[lo..hi]
                                .copy_from_slice(&src[src_row + src_lo..src_row + src_lo + (hi - lo)]);
                        }
                    }
                }
            }
        }
    }
}

fn rows_per_block(s2: usize) -> usize {
    (TARGET_BLOCK_VOX / s2).max(1)
}

/// 3x3x3 convolution, padding 1, stride 1. `weight` is `[out_c, in_c, 3,3,3]`
/// flat, `bias` `[out_c]`. Overwrites `out`; applies ReLU when `relu` is set.
pub(crate) fn conv3(
    input: &Array4<f64>,
    weight: &[f64],
    bias: &[f64],
    out: &mut Array4<f64>,
    relu: bool,
    scratch: &mut ConvScratch,
) {
    let (cin, s0, s1, s2) = spatial(input);
    let cout = out.shape()[0];
    debug_assert_eq!(out.shape()[1..], input.shape()[1..]);
    debug_assert_eq!(weight.len(), cout * cin * 27);
    let vol = s0 * s1 * s2;
    let k = cin * 27;
    let src = input.as_slice().expect("standard layout");

    let w2 = ArrayView2::from_shape((cout, k), weight).unwrap();
    let rpb = rows_per_block(s2);
    let rows = s0 * s1;
    scratch.col.resize(k * rpb * s2, 0.0);

    {
        let out_flat: &mut [f64] = out.as_slice_mut().expect("standard layout");
        let mut out2 = ArrayViewMut2::from_shape((cout, vol), out_flat).unwrap();
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + rpb).min(rows);
            let block_len = (r1 - r0) * s2;
            fill_col(&mut scratch.col, src, cin, s0, s1, s2, r0, r1, false);
            let col = ArrayView2::from_shape((k, block_len), &scratch.col[..k * block_len]).unwrap();
            let mut cblk = out2
                .slice_mut(s![.., r0 * s2..r0 * s2 + block_len])
                .reversed_axes();
            general_mat_mul(1.0, &col.t(), &w2.t(), 0.0, &mut cblk);
            r0 = r1;
        }
        // bias (+ optional relu), channel rows are contiguous
        for co in 0..cout {
            let b = bias[co];
            let row = &mut out_flat[co * vol..(co + 1) * vol];
            if relu {
                for v in row.iter_mut() {
                    *v = (*v + b).max(0.0);
                }
            } else {
                for v in row.iter_mut() {
                    *v += b;
                }
            }
        }
    }
}

/// Backward of [`conv3`] w.r.t. input, weights and bias.
///
/// `grad_out` must already exclude any activation derivative. `grad_in` is
/// overwritten; `grad_w`/`grad_b` are accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3_backward(
    input: &Array4<f64>,
    weight: &[f64],
    grad_out: &Array4<f64>,
    grad_in: Option<&mut Array4<f64>>,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    scratch: &mut ConvScratch,
) {
    let (cin, s0, s1, s2) = spatial(input);
    let cout = grad_out.shape()[0];
    let vol = s0 * s1 * s2;
    let k = cin * 27;
    let rows = s0 * s1;
    let rpb = rows_per_block(s2);
    let src = input.as_slice().expect("standard layout");
    let gout = grad_out.as_slice().expect("standard layout");
    let gout2 = ArrayView2::from_shape((cout, vol), gout).unwrap();

    // bias gradient
    for co in 0..cout {
        grad_b[co] += gout[co * vol..(co + 1) * vol].iter().sum::<f64>();
    }

    // weight gradient: dwt[k, co] += col[k, b] . goutT[b, co]
    scratch.col.resize(k * rpb * s2, 0.0);
    scratch.dwt.clear();
    scratch.dwt.resize(k * cout, 0.0);
    {
        let mut dwt = ArrayViewMut2::from_shape((k, cout), &mut scratch.dwt).unwrap();
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + rpb).min(rows);
            let block_len = (r1 - r0) * s2;
            fill_col(&mut scratch.col, src, cin, s0, s1, s2, r0, r1, false);
            let col = ArrayView2::from_shape((k, block_len), &scratch.col[..k * block_len]).unwrap();
            let gblk = gout2.slice(s![.., r0 * s2..r0 * s2 + block_len]).reversed_axes();
            general_mat_mul(1.0, &col, &gblk, 1.0, &mut dwt);
            r0 = r1;
        }
    }
    for co in 0..cout {
        for kk in 0..k {
            grad_w[co * k + kk] += scratch.dwt[kk * cout + co];
        }
    }

    // input gradient: full correlation of grad_out with flipped kernels
    if let Some(gin) = grad_in {
        let k2 = cout * 27;
        // wr[(co, kk), ci] = weight[co, ci, kk]
        scratch.wbuf.clear();
        scratch.wbuf.resize(k2 * cin, 0.0);
        for co in 0..cout {
            for ci in 0..cin {
                for kk in 0..27 {
                    scratch.wbuf[(co * 27 + kk) * cin + ci] = weight[(co * cin + ci) * 27 + kk];
                }
            }
        }
        let wr = ArrayView2::from_shape((k2, cin), &scratch.wbuf).unwrap();
        scratch.col.resize(k2 * rpb * s2, 0.0);
        let gin_flat = gin.as_slice_mut().expect("standard layout");
        let mut gin2 = ArrayViewMut2::from_shape((cin, vol), gin_flat).unwrap();
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + rpb).min(rows);
            let block_len = (r1 - r0) * s2;
            fill_col(&mut scratch.col, gout, cout, s0, s1, s2, r0, r1, true);
            let col = ArrayView2::from_shape((k2, block_len), &scratch.col[..k2 * block_len]).unwrap();
            let mut cblk = gin2
                .slice_mut(s![.., r0 * s2..r0 * s2 + block_len])
                .reversed_axes();
            general_mat_mul(1.0, &col.t(), &wr, 0.0, &mut cblk);
            r0 = r1;
        }
    }
}

/// 1x1x1 convolution (classification head).
pub(crate) fn conv1(input: &Array4<f64>, weight: &[f64], bias: &[f64], out: &mut Array4<f64>) {
    let (cin, s0, s1, s2) = spatial(input);
    let cout = out.shape()[0];
    let vol = s0 * s1 * s2;
    let in2 = ArrayView2::from_shape((cin, vol), input.as_slice().unwrap()).unwrap();
    let w2 = ArrayView2::from_shape((cout, cin), weight).unwrap();
    {
        let out_flat = out.as_slice_mut().unwrap();
        let mut out2 = ArrayViewMut2::from_shape((cout, vol), out_flat).unwrap();
        let mut outt = out2.view_mut().reversed_axes();
        general_mat_mul(1.0, &in2.t(), &w2.t(), 0.0, &mut outt);
        for co in 0..cout {
            let b = bias[co];
            for v in out_flat[co * vol..(co + 1) * vol].iter_mut() {
                *v += b;
            }
        }
    }
}

pub(crate) fn conv1_backward(
    input: &Array4<f64>,
    weight: &[f64],
    grad_out: &Array4<f64>,
    grad_in: &mut Array4<f64>,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let (cin, s0, s1, s2) = spatial(input);
    let cout = grad_out.shape()[0];
    let vol = s0 * s1 * s2;
    let gout = grad_out.as_slice().unwrap();
    for co in 0..cout {
        grad_b[co] += gout[co * vol..(co + 1) * vol].iter().sum::<f64>();
    }
    let in2 = ArrayView2::from_shape((cin, vol), input.as_slice().unwrap()).unwrap();
    let gout2 = ArrayView2::from_shape((cout, vol), gout).unwrap();
    {
        // grad_w[co, ci] += gout[co, :] . in[ci, :]
        let mut gw = ArrayViewMut2::from_shape((cout, cin), grad_w).unwrap();
        general_mat_mul(1.0, &gout2, &in2.t(), 1.0, &mut gw);
    }
    let w2 = ArrayView2::from_shape((cout, cin), weight).unwrap();
    let mut gin2 =
        ArrayViewMut2::from_shape((cin, vol), grad_in.as_slice_mut().unwrap()).unwrap();
    let mut gint = gin2.view_mut().reversed_axes();
    general_mat_mul(1.0, &gout2.t(), &w2, 0.0, &mut gint);
}

/// 2x max-pool. Returns pooled map and flat argmax indices (into `[C * vol]`).
pub(crate) fn maxpool2(input: &Array4<f64>) -> (Array4<f64>, Vec<u32>) {
    let (c, s0, s1, s2) = spatial(input);
    let (t0, t1, t2) = (s0 / 2, s1 / 2, s2 / 2);
    let src = input.as_slice().unwrap();
    let mut out = Array4::zeros((c, t0, t1, t2));
    let mut arg = vec![0u32; c * t0 * t1 * t2];
    {
        let dst = out.as_slice_mut().unwrap();
        let mut w = 0usize;
        for ch in 0..c {
            let base_c = ch * s0 * s1 * s2;
            for o0 in 0..t0 {
                for o1 in 0..t1 {
                    for o2 in 0..t2 {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for d0 in 0..2 {
                            for d1 in 0..2 {
                                let row = base_c
                                    + ((o0 * 2 + d0) * s1 + (o1 * 2 + d1)) * s2
                                    + o2 * 2;
                                for d2 in 0..2 {
                                    let v = src[row + d2];
                                    if v > best {
                                        best = v;
                                        best_idx = (row + d2) as u32;
                                    }
                                }
                            }
                        }
                        dst[w] = best;
                        arg[w] = best_idx;
                        w += 1;
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(
    grad_out: &Array4<f64>,
    arg: &[u32],
    grad_in: &mut Array4<f64>,
) {
    grad_in.fill(0.0);
    let dst = grad_in.as_slice_mut().unwrap();
    let src = grad_out.as_slice().unwrap();
    for (g, &idx) in src.iter().zip(arg) {
        dst[idx as usize] += g;
    }
}

/// Nearest-neighbor 2x upsample.
pub(crate) fn upsample2(input: &Array4<f64>) -> Array4<f64> {
    let (c, s0, s1, s2) = spatial(input);
    let mut out = Array4::zeros((c, s0 * 2, s1 * 2, s2 * 2));
    let src = input.as_slice().unwrap();
    {
        let dst = out.as_slice_mut().unwrap();
        let (t1, t2) = (s1 * 2, s2 * 2);
        for ch in 0..c {
            for i0 in 0..s0 * 2 {
                for i1 in 0..t1 {
                    let srow = ((ch * s0 + i0 / 2) * s1 + i1 / 2) * s2;
                    let drow = ((ch * s0 * 2 + i0) * t1 + i1) * t2;
                    for i2 in 0..t2 {
                        dst[drow + i2] = src[srow + i2 / 2];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad_out: &Array4<f64>, grad_in: &mut Array4<f64>) {
    grad_in.fill(0.0);
    let (c, s0, s1, s2) = spatial(grad_in);
    let src = grad_out.as_slice().unwrap();
    let dst = grad_in.as_slice_mut().unwrap();
    let (t1, t2) = (s1 * 2, s2 * 2);
    for ch in 0..c {
        for i0 in 0..s0 * 2 {
            for i1 in 0..t1 {
                let srow = ((ch * s0 * 2 + i0) * t1 + i1) * t2;
                let drow = ((ch * s0 + i0 / 2) * s1 + i1 / 2) * s2;
                for i2 in 0..t2 {
                    dst[drow + i2 / 2] += src[srow + i2];
                }
            }
        }
    }
}

/// Inverted-scale dropout mask: entries are 0 or 1/(1-rate).
pub(crate) fn dropout_mask(len: usize, rate: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect()
}

pub(crate) fn apply_mask(x: &mut Array4<f64>, mask: &[f64]) {
    for (v, m) in x.as_slice_mut().unwrap().iter_mut().zip(mask) {
        *v *= m;
    }
}

/// ReLU derivative gate: zero the gradient where the forward output was zero.
pub(crate) fn relu_backward_inplace(grad: &mut Array4<f64>, output: &Array4<f64>) {
    for (g, o) in grad
        .as_slice_mut()
        .unwrap()
        .iter_mut()
        .zip(output.as_slice().unwrap())
    {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub(crate) fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (ca, s0, s1, s2) = spatial(a);
    let cb = b.shape()[0];
    let mut out = Array4::zeros((ca + cb, s0, s1, s2));
    let plane = s0 * s1 * s2;
    let dst = out.as_slice_mut().unwrap();
    dst[..ca * plane].copy_from_slice(a.as_slice().unwrap());
    dst[ca * plane..].copy_from_slice(b.as_slice().unwrap());
    out
}

pub(crate) fn split_channels(x: &Array4<f64>, ca: usize) -> (Array4<f64>, Array4<f64>) {
    let (c, s0, s1, s2) = spatial(x);
    let plane = s0 * s1 * s2;
    let src = x.as_slice().unwrap();
    let a = Array4::from_shape_vec((ca, s0, s1, s2), src[..ca * plane].to_vec()).unwrap();
    let b =
        Array4::from_shape_vec((c - ca, s0, s1, s2), src[ca * plane..].to_vec()).unwrap();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn rand_map(c: usize, s0: usize, s1: usize, s2: usize, seed: u64) -> Array4<f64> {
        let mut rng = crate::rng::derive_rng(seed, &[0xfe]);
        Array4::from_shape_fn((c, s0, s1, s2), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct six-loop reference convolution.
    fn conv3_naive(input: &Array4<f64>, weight: &[f64], bias: &[f64], cout: usize) -> Array4<f64> {
        let sh = input.shape();
        let (cin, s0, s1, s2) = (sh[0], sh[1], sh[2], sh[3]);
        let mut out = Array4::zeros((cout, s0, s1, s2));
        for co in 0..cout {
            for i0 in 0..s0 {
                for i1 in 0..s1 {
                    for i2 in 0..s2 {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for k0 in 0..3isize {
                                for k1 in 0..3isize {
                                    for k2 in 0..3isize {
                                        let j0 = i0 as isize + k0 - 1;
                                        let j1 = i1 as isize + k1 - 1;
                                        let j2 = i2 as isize + k2 - 1;
                                        if j0 < 0
                                            || j1 < 0
                                            || j2 < 0
                                            || j0 >= s0 as isize
                                            || j1 >= s1 as isize
                                            || j2 >= s2 as isize
                                        {
                                            continue;
                                        }
                                        let w = weight[(((co * cin + ci) * 3 + k0 as usize) * 3
                                            + k1 as usize)
                                            * 3
                                            + k2 as usize];
                                        acc += w
                                            * input[[ci, j0 as usize, j1 as usize, j2 as usize]];
                                    }
                                }
                            }
                        }
                        out[[co, i0, i1, i2]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3_matches_naive() {
        let (cin, cout) = (3, 5);
        let input = rand_map(cin, 4, 6, 5, 1);
        let mut rng = crate::rng::derive_rng(2, &[0xaa]);
        let weight: Vec<f64> = (0..cout * cin * 27).map(|_| rng.random_range(-0.5..0.5)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut out = Array4::zeros((cout, 4, 6, 5));
        let mut scratch = ConvScratch::default();
        conv3(&input, &weight, &bias, &mut out, false, &mut scratch);
        let want = conv3_naive(&input, &weight, &bias, cout);
        for (a, b) in out.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv3_backward_is_adjoint() {
        // <conv(x), g> == <x, conv_bwd_in(g)> for the linear (bias-free) map,
        // and <conv_w(x), g> == sum(grad_w * w) for the weight direction.
        let (cin, cout) = (2, 3);
        let dims = (cin, 4, 4, 6);
        let input = rand_map(dims.0, dims.1, dims.2, dims.3, 3);
        let g = rand_map(cout, dims.1, dims.2, dims.3, 4);
        let mut rng = crate::rng::derive_rng(5, &[0xbb]);
        let weight: Vec<f64> = (0..cout * cin * 27).map(|_| rng.random_range(-0.5..0.5)).collect();
        let bias = vec![0.0; cout];
        let mut scratch = ConvScratch::default();

        let mut out = Array4::zeros((cout, dims.1, dims.2, dims.3));
        conv3(&input, &weight, &bias, &mut out, false, &mut scratch);
        let lhs: f64 = out.iter().zip(g.iter()).map(|(a, b)| a * b).sum();

        let mut gin = Array4::zeros(input.raw_dim());
        let mut gw = vec![0.0; weight.len()];
        let mut gb = vec![0.0; cout];
        conv3_backward(&input, &weight, &g, Some(&mut gin), &mut gw, &mut gb, &mut scratch);

        let rhs: f64 = gin.iter().zip(input.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");

        let via_w: f64 = gw.iter().zip(&weight).map(|(a, b)| a * b).sum();
        assert!((lhs - via_w).abs() < 1e-9, "{lhs} vs {via_w}");

        // bias gradient equals per-channel sums of g
        for co in 0..cout {
            let want: f64 = g.slice(s![co, .., .., ..]).sum();
            assert!((gb[co] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn pool_upsample_roundtrip_shapes() {
        let x = rand_map(2, 4, 6, 8, 7);
        let (p, arg) = maxpool2(&x);
        assert_eq!(p.shape(), &[2, 2, 3, 4]);
        let mut gin = Array4::zeros(x.raw_dim());
        maxpool2_backward(&p, &arg, &mut gin);
        // every pooled gradient lands on the argmax voxel
        let total_in: f64 = gin.sum();
        let total_out: f64 = p.sum();
        assert!((total_in - total_out).abs() < 1e-12);

        let u = upsample2(&p);
        assert_eq!(u.shape(), x.shape());
        let mut gdown = Array4::zeros(p.raw_dim());
        upsample2_backward(&u, &mut gdown);
        // adjoint of upsample is 8-child sum
        let lhs: f64 = u.iter().map(|v| v * v).sum();
        let rhs: f64 = gdown.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn maxpool_tie_breaks_first_in_scan_order() {
        let mut x = Array4::zeros((1, 2, 2, 2));
        x.fill(1.0);
        let (_, arg) = maxpool2(&x);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn concat_split_inverse() {
        let a = rand_map(2, 2, 2, 2, 9);
        let b = rand_map(3, 2, 2, 2, 10);
        let c = concat_channels(&a, &b);
        let (a2, b2) = split_channels(&c, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn dropout_mask_statistics() {
        let mut rng = crate::rng::derive_rng(1, &[0xcc]);
        let mask = dropout_mask(100_000, 0.1, &mut rng);
        let zeros = mask.iter().filter(|m| **m == 0.0).count();
        let frac = zeros as f64 / mask.len() as f64;
        assert!((frac - 0.1).abs() < 0.01);
        for m in &mask {
            assert!(*m == 0.0 || (*m - 1.0 / 0.9).abs() < 1e-12);
        }
    }
}

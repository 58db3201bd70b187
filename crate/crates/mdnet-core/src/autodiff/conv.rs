//! Direct 2D convolution kernels (cross-correlation convention) shared by the
//! tape op and the teacher network.
//!
//! Channel blocking: each task owns a block of output planes and streams the
//! input once per block, keeping the hot planes cache-resident. Parallelism
//! is over disjoint output blocks only and the per-element accumulation
//! order is fixed, so results are bitwise identical for any thread count.

use rayon::prelude::*;

use super::tensor::{Tensor, TensorError};

/// Planes processed per task; bounds the working set to a few L1-sized
/// buffers.
const BLOCK: usize = 8;

/// Output range [lo, hi) of `o` such that `o * stride + k_off` lands in
/// `[0, in_len)`.
#[inline]
fn valid_out_range(out_len: usize, in_len: usize, k_off: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if k_off >= 0 {
        0
    } else {
        ((-k_off + s - 1) / s) as usize
    };
    let top = in_len as isize - 1 - k_off;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top / s) as usize + 1).min(out_len);
    (lo.min(hi), hi)
}

pub(crate) fn conv_out_dim(in_dim: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = in_dim + 2 * padding;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvDims, TensorError> {
    let (n, cin, h, w) = input.dims4("conv2d input")?;
    let (cout, kc, kh, kw) = kernel.dims4("conv2d kernel")?;
    if kc != cin {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d: kernel channels must match input channels".into(),
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if bias.shape() != [cout] {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d: bias must have one entry per output channel".into(),
            lhs: vec![cout],
            rhs: bias.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(TensorError::Invalid("conv2d: stride must be >= 1".into()));
    }
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
        }),
        _ => Err(TensorError::Invalid(format!(
            "conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        ))),
    }
}

/// Whether the fused 3x3 stencil applies (stride 1, padding 1, output
/// size equals input size).
#[inline]
fn is_fast3x3(d: &ConvDims, stride: usize, padding: usize) -> bool {
    d.kh == 3 && d.kw == 3 && stride == 1 && padding == 1 && d.h >= 3 && d.w >= 3
}

/// Small planes go through an im2col + GEMM path instead: per-cell stencil
/// overhead dwarfs the arithmetic once the interior shrinks to a few dozen
/// cells.
const GEMM_MAX_CELLS: usize = 256;

#[inline]
fn is_gemm_case(d: &ConvDims, stride: usize, padding: usize) -> bool {
    d.oh * d.ow <= GEMM_MAX_CELLS
        && (is_fast3x3(d, stride, padding)
            || (d.kh == 1 && d.kw == 1 && stride == 1 && padding == 0))
}

/// Patch matrix P[(c * kh * kw + t)][cell] for the stride-1 cases handled
/// by the GEMM path; out-of-image taps are zero.
fn build_patches(img: &[f64], d: &ConvDims) -> Vec<f64> {
    let cells = d.h * d.w;
    if d.kh == 1 {
        return img[..d.cin * cells].to_vec();
    }
    let k_dim = d.cin * 9;
    let mut p = vec![0.0; k_dim * cells];
    for c in 0..d.cin {
        let plane = &img[c * cells..][..cells];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &mut p[(c * 9 + ky * 3 + kx) * cells..][..cells];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for oy in 0..d.h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let (x_lo, x_hi) = if dx < 0 { (1, d.w) } else if dx > 0 { (0, d.w - 1) } else { (0, d.w) };
                    let src = &plane[iy as usize * d.w..][..d.w];
                    let dst = &mut row[oy * d.w..][..d.w];
                    for ox in x_lo..x_hi {
                        dst[ox] = src[(ox as isize + dx) as usize];
                    }
                }
            }
        }
    }
    p
}

/// C[f][cell] += sum_k W[f][k] * P[k][cell], four output rows per pass.
fn gemm_rows(c_rows: &mut [f64], w_rows: &[f64], p: &[f64], k_dim: usize, cells: usize) {
    let nf = c_rows.len() / cells;
    let mut f = 0;
    while f + 4 <= nf {
        let (c0, rest) = c_rows[f * cells..].split_at_mut(cells);
        let (c1, rest) = rest.split_at_mut(cells);
        let (c2, rest) = rest.split_at_mut(cells);
        let c3 = &mut rest[..cells];
        for k in 0..k_dim {
            let pk = &p[k * cells..][..cells];
            let w0 = w_rows[f * k_dim + k];
            let w1 = w_rows[(f + 1) * k_dim + k];
            let w2 = w_rows[(f + 2) * k_dim + k];
            let w3 = w_rows[(f + 3) * k_dim + k];
            for i in 0..cells {
                let v = pk[i];
                c0[i] += w0 * v;
                c1[i] += w1 * v;
                c2[i] += w2 * v;
                c3[i] += w3 * v;
            }
        }
        f += 4;
    }
    while f < nf {
        let row = &mut c_rows[f * cells..][..cells];
        for k in 0..k_dim {
            let pk = &p[k * cells..][..cells];
            let wv = w_rows[f * k_dim + k];
            for i in 0..cells {
                row[i] += wv * pk[i];
            }
        }
        f += 1;
    }
}

/// Scatter patch-space gradients back to the input image (transpose of
/// `build_patches`).
fn col2im_add(di_img: &mut [f64], dp: &[f64], d: &ConvDims) {
    let cells = d.h * d.w;
    if d.kh == 1 {
        for (o, s) in di_img[..d.cin * cells].iter_mut().zip(dp) {
            *o += s;
        }
        return;
    }
    for c in 0..d.cin {
        let plane = &mut di_img[c * cells..][..cells];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &dp[(c * 9 + ky * 3 + kx) * cells..][..cells];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for oy in 0..d.h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let (x_lo, x_hi) = if dx < 0 { (1, d.w) } else if dx > 0 { (0, d.w - 1) } else { (0, d.w) };
                    for ox in x_lo..x_hi {
                        plane[iy as usize * d.w + (ox as isize + dx) as usize] += row[oy * d.w + ox];
                    }
                }
            }
        }
    }
}

/// Fused 3x3 correlation into four output planes at once: the nine input
/// loads per cell feed 4 x 9 multiply-adds, which keeps small planes from
/// being bandwidth/overhead bound.
fn stencil3x3_x4(
    outs: &mut [f64],
    o_plane: usize,
    inp: &[f64],
    kks: &[[f64; 9]; 4],
    h: usize,
    w: usize,
) {
    let (o0, rest) = outs.split_at_mut(o_plane);
    let (o1, rest) = rest.split_at_mut(o_plane);
    let (o2, o3) = rest.split_at_mut(o_plane);
    for oy in 1..h - 1 {
        let r0 = &inp[(oy - 1) * w..][..w];
        let r1 = &inp[oy * w..][..w];
        let r2 = &inp[(oy + 1) * w..][..w];
        let row0 = &mut o0[oy * w..][..w];
        let row1 = &mut o1[oy * w..][..w];
        let row2 = &mut o2[oy * w..][..w];
        let row3 = &mut o3[oy * w..][..w];
        for ox in 1..w - 1 {
            let v = [
                r0[ox - 1],
                r0[ox],
                r0[ox + 1],
                r1[ox - 1],
                r1[ox],
                r1[ox + 1],
                r2[ox - 1],
                r2[ox],
                r2[ox + 1],
            ];
            row0[ox] += tap9(&kks[0], &v);
            row1[ox] += tap9(&kks[1], &v);
            row2[ox] += tap9(&kks[2], &v);
            row3[ox] += tap9(&kks[3], &v);
        }
    }
    for (oi, out) in [o0, o1, o2, o3].into_iter().enumerate() {
        stencil3x3_borders(out, inp, &kks[oi], h, w);
    }
}

#[inline(always)]
fn tap9(k: &[f64; 9], v: &[f64; 9]) -> f64 {
    k[0] * v[0]
        + k[1] * v[1]
        + k[2] * v[2]
        + k[3] * v[3]
        + k[4] * v[4]
        + k[5] * v[5]
        + k[6] * v[6]
        + k[7] * v[7]
        + k[8] * v[8]
}

/// Tap-wise accumulation of the border cells only.
fn stencil3x3_borders(out: &mut [f64], inp: &[f64], kk: &[f64], h: usize, w: usize) {
    let mut border_cell = |oy: usize, ox: usize| {
        let mut acc = 0.0;
        for ky in 0..3usize {
            let iy = oy as isize + ky as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..3usize {
                let ix = ox as isize + kx as isize - 1;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                acc += kk[ky * 3 + kx] * inp[iy as usize * w + ix as usize];
            }
        }
        out[oy * w + ox] += acc;
    };
    for ox in 0..w {
        border_cell(0, ox);
        if h > 1 {
            border_cell(h - 1, ox);
        }
    }
    for oy in 1..h.saturating_sub(1) {
        border_cell(oy, 0);
        if w > 1 {
            border_cell(oy, w - 1);
        }
    }
}

/// Single-plane variant of the fused 3x3 correlation, for channel-count
/// remainders.
fn stencil3x3_accumulate(out: &mut [f64], inp: &[f64], kk: &[f64], h: usize, w: usize) {
    for oy in 1..h - 1 {
        let r0 = &inp[(oy - 1) * w..][..w];
        let r1 = &inp[oy * w..][..w];
        let r2 = &inp[(oy + 1) * w..][..w];
        let orow = &mut out[oy * w..][..w];
        for ox in 1..w - 1 {
            let acc = kk[0] * r0[ox - 1]
                + kk[1] * r0[ox]
                + kk[2] * r0[ox + 1]
                + kk[3] * r1[ox - 1]
                + kk[4] * r1[ox]
                + kk[5] * r1[ox + 1]
                + kk[6] * r2[ox - 1]
                + kk[7] * r2[ox]
                + kk[8] * r2[ox + 1];
            orow[ox] += acc;
        }
    }
    stencil3x3_borders(out, inp, kk, h, w);
}

/// Fused kernel gradient for the 3x3 stride-1 pad-1 case: nine running
/// sums over one pass of the interior, borders tap-wise.
fn stencil3x3_dkernel(dk: &mut [f64], g: &[f64], inp: &[f64], h: usize, w: usize) {
    let mut acc = [0.0f64; 9];
    for oy in 1..h - 1 {
        let r0 = &inp[(oy - 1) * w..][..w];
        let r1 = &inp[oy * w..][..w];
        let r2 = &inp[(oy + 1) * w..][..w];
        let grow = &g[oy * w..][..w];
        let mut a = [0.0f64; 9];
        for ox in 1..w - 1 {
            let gv = grow[ox];
            a[0] += gv * r0[ox - 1];
            a[1] += gv * r0[ox];
            a[2] += gv * r0[ox + 1];
            a[3] += gv * r1[ox - 1];
            a[4] += gv * r1[ox];
            a[5] += gv * r1[ox + 1];
            a[6] += gv * r2[ox - 1];
            a[7] += gv * r2[ox];
            a[8] += gv * r2[ox + 1];
        }
        for t in 0..9 {
            acc[t] += a[t];
        }
    }
    dkernel_borders(&mut acc, g, inp, h, w);
    for t in 0..9 {
        dk[t] += acc[t];
    }
}

/// Same, for two output channels sharing one pass over the input.
fn stencil3x3_dkernel_x2(
    dk0: &mut [f64],
    dk1: &mut [f64],
    g0: &[f64],
    g1: &[f64],
    inp: &[f64],
    h: usize,
    w: usize,
) {
    let mut acc0 = [0.0f64; 9];
    let mut acc1 = [0.0f64; 9];
    for oy in 1..h - 1 {
        let r0 = &inp[(oy - 1) * w..][..w];
        let r1 = &inp[oy * w..][..w];
        let r2 = &inp[(oy + 1) * w..][..w];
        let g0row = &g0[oy * w..][..w];
        let g1row = &g1[oy * w..][..w];
        let mut a0 = [0.0f64; 9];
        let mut a1 = [0.0f64; 9];
        for ox in 1..w - 1 {
            let v = [
                r0[ox - 1],
                r0[ox],
                r0[ox + 1],
                r1[ox - 1],
                r1[ox],
                r1[ox + 1],
                r2[ox - 1],
                r2[ox],
                r2[ox + 1],
            ];
            let gv0 = g0row[ox];
            let gv1 = g1row[ox];
            for t in 0..9 {
                a0[t] += gv0 * v[t];
                a1[t] += gv1 * v[t];
            }
        }
        for t in 0..9 {
            acc0[t] += a0[t];
            acc1[t] += a1[t];
        }
    }
    dkernel_borders(&mut acc0, g0, inp, h, w);
    dkernel_borders(&mut acc1, g1, inp, h, w);
    for t in 0..9 {
        dk0[t] += acc0[t];
        dk1[t] += acc1[t];
    }
}

fn dkernel_borders(acc: &mut [f64; 9], g: &[f64], inp: &[f64], h: usize, w: usize) {
    let border_cell = |oy: usize, ox: usize, acc: &mut [f64; 9]| {
        let gv = g[oy * w + ox];
        for ky in 0..3usize {
            let iy = oy as isize + ky as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..3usize {
                let ix = ox as isize + kx as isize - 1;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                acc[ky * 3 + kx] += gv * inp[iy as usize * w + ix as usize];
            }
        }
    };
    for ox in 0..w {
        border_cell(0, ox, acc);
        if h > 1 {
            border_cell(h - 1, ox, acc);
        }
    }
    for oy in 1..h.saturating_sub(1) {
        border_cell(oy, 0, acc);
        if w > 1 {
            border_cell(oy, w - 1, acc);
        }
    }
}

/// out_row[ox] += wv * in_row[ox * stride + off] over the valid range.
#[inline]
fn axpy_row(
    out_row: &mut [f64],
    in_row: &[f64],
    wv: f64,
    ox_lo: usize,
    ox_hi: usize,
    xoff: isize,
    stride: usize,
) {
    if stride == 1 {
        let ix0 = (ox_lo as isize + xoff) as usize;
        let dst = &mut out_row[ox_lo..ox_hi];
        let src = &in_row[ix0..ix0 + (ox_hi - ox_lo)];
        for (o, i) in dst.iter_mut().zip(src) {
            *o += wv * i;
        }
    } else {
        for ox in ox_lo..ox_hi {
            let ix = ((ox * stride) as isize + xoff) as usize;
            out_row[ox] += wv * in_row[ix];
        }
    }
}

/// sum over the valid range of g_row[ox] * in_row[ox * stride + off].
#[inline]
fn row_dot(g_row: &[f64], in_row: &[f64], ox_lo: usize, ox_hi: usize, xoff: isize, stride: usize) -> f64 {
    if stride == 1 {
        let ix0 = (ox_lo as isize + xoff) as usize;
        dot(&g_row[ox_lo..ox_hi], &in_row[ix0..ix0 + (ox_hi - ox_lo)])
    } else {
        let mut acc = 0.0;
        for ox in ox_lo..ox_hi {
            let ix = ((ox * stride) as isize + xoff) as usize;
            acc += g_row[ox] * in_row[ix];
        }
        acc
    }
}

/// Forward convolution. Returns the output values for shape
/// [n, cout, oh, ow].
pub(crate) fn forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    d: &ConvDims,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let p = padding as isize;
    let o_plane = d.oh * d.ow;
    let i_plane = d.h * d.w;
    let ksz = d.kh * d.kw;
    let mut out = vec![0.0; d.n * d.cout * o_plane];

    if is_gemm_case(d, stride, padding) {
        let k_dim = d.cin * ksz;
        out.par_chunks_mut(d.cout * o_plane)
            .enumerate()
            .for_each(|(n, out_img)| {
                let patches = build_patches(&input[n * d.cin * i_plane..][..d.cin * i_plane], d);
                for (f, plane) in out_img.chunks_mut(o_plane).enumerate() {
                    plane.fill(bias[f]);
                }
                gemm_rows(out_img, kernel, &patches, k_dim, o_plane);
            });
        return out;
    }

    // one task per (image, block of output channels); chunking per image
    // first keeps blocks from straddling image boundaries
    out.par_chunks_mut(d.cout * o_plane)
        .enumerate()
        .flat_map(|(n, img_out)| {
            img_out
                .par_chunks_mut(BLOCK * o_plane)
                .enumerate()
                .map(move |(bi, blk)| (n, bi * BLOCK, blk))
        })
        .for_each(|(n, f0, out_block)| {
            let fast = is_fast3x3(d, stride, padding);
            let fb_count = out_block.len() / o_plane;
            for (fb, plane) in out_block.chunks_mut(o_plane).enumerate() {
                plane.fill(bias[f0 + fb]);
            }
            let k9 = |f: usize, c: usize| -> [f64; 9] {
                let base = (f * d.cin + c) * ksz;
                kernel[base..base + 9].try_into().expect("3x3 kernel")
            };
            for c in 0..d.cin {
                let in_plane = &input[(n * d.cin + c) * i_plane..][..i_plane];
                if fast {
                    let mut fb = 0;
                    while fb + 4 <= fb_count {
                        let kks = [
                            k9(f0 + fb, c),
                            k9(f0 + fb + 1, c),
                            k9(f0 + fb + 2, c),
                            k9(f0 + fb + 3, c),
                        ];
                        stencil3x3_x4(
                            &mut out_block[fb * o_plane..(fb + 4) * o_plane],
                            o_plane,
                            in_plane,
                            &kks,
                            d.h,
                            d.w,
                        );
                        fb += 4;
                    }
                    while fb < fb_count {
                        let kk = k9(f0 + fb, c);
                        stencil3x3_accumulate(
                            &mut out_block[fb * o_plane..][..o_plane],
                            in_plane,
                            &kk,
                            d.h,
                            d.w,
                        );
                        fb += 1;
                    }
                    continue;
                }
                for fb in 0..fb_count {
                    let f = f0 + fb;
                    let kbase = (f * d.cin + c) * ksz;
                    let out_plane = &mut out_block[fb * o_plane..][..o_plane];
                    for ky in 0..d.kh {
                        let yoff = ky as isize - p;
                        let (oy_lo, oy_hi) = valid_out_range(d.oh, d.h, yoff, stride);
                        for kx in 0..d.kw {
                            let xoff = kx as isize - p;
                            let (ox_lo, ox_hi) = valid_out_range(d.ow, d.w, xoff, stride);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let wv = kernel[kbase + ky * d.kw + kx];
                            for oy in oy_lo..oy_hi {
                                let iy = (oy * stride) as isize + yoff;
                                axpy_row(
                                    &mut out_plane[oy * d.ow..(oy + 1) * d.ow],
                                    &in_plane[iy as usize * d.w..(iy as usize + 1) * d.w],
                                    wv,
                                    ox_lo,
                                    ox_hi,
                                    xoff,
                                    stride,
                                );
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradients of the convolution w.r.t. input, kernel and bias.
/// `dinput` is skipped when `need_dinput` is false (leaf inputs).
pub(crate) fn backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    need_dinput: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = padding as isize;
    let o_plane = d.oh * d.ow;
    let i_plane = d.h * d.w;
    let ksz = d.kh * d.kw;

    // dbias[f] = sum over n, oy, ox of g
    let mut dbias = vec![0.0; d.cout];
    for n in 0..d.n {
        for f in 0..d.cout {
            let g = &grad_out[(n * d.cout + f) * o_plane..][..o_plane];
            dbias[f] += g.iter().sum::<f64>();
        }
    }

    if is_gemm_case(d, stride, padding) {
        let k_dim = d.cin * ksz;
        let patches: Vec<Vec<f64>> = (0..d.n)
            .map(|n| build_patches(&input[n * d.cin * i_plane..][..d.cin * i_plane], d))
            .collect();

        let mut dkernel = vec![0.0; d.cout * k_dim];
        dkernel
            .par_chunks_mut(BLOCK * k_dim)
            .enumerate()
            .for_each(|(bi, dk_block)| {
                let f0 = bi * BLOCK;
                for n in 0..d.n {
                    let p = &patches[n];
                    for (fb, dk_row) in dk_block.chunks_mut(k_dim).enumerate() {
                        let g = &grad_out[(n * d.cout + f0 + fb) * o_plane..][..o_plane];
                        for (k, slot) in dk_row.iter_mut().enumerate() {
                            *slot += dot(g, &p[k * o_plane..][..o_plane]);
                        }
                    }
                }
            });

        let dinput = if need_dinput {
            let mut di = vec![0.0; d.n * d.cin * i_plane];
            di.par_chunks_mut(d.cin * i_plane)
                .enumerate()
                .for_each(|(n, di_img)| {
                    // dP[k] = sum_f W[f][k] * G[f], four f rows per pass
                    let mut dp = vec![0.0; k_dim * o_plane];
                    let g_img = &grad_out[n * d.cout * o_plane..][..d.cout * o_plane];
                    let mut f = 0;
                    while f + 4 <= d.cout {
                        let g0 = &g_img[f * o_plane..][..o_plane];
                        let g1 = &g_img[(f + 1) * o_plane..][..o_plane];
                        let g2 = &g_img[(f + 2) * o_plane..][..o_plane];
                        let g3 = &g_img[(f + 3) * o_plane..][..o_plane];
                        for k in 0..k_dim {
                            let w0 = kernel[f * k_dim + k];
                            let w1 = kernel[(f + 1) * k_dim + k];
                            let w2 = kernel[(f + 2) * k_dim + k];
                            let w3 = kernel[(f + 3) * k_dim + k];
                            let row = &mut dp[k * o_plane..][..o_plane];
                            for i in 0..o_plane {
                                row[i] += w0 * g0[i] + w1 * g1[i] + w2 * g2[i] + w3 * g3[i];
                            }
                        }
                        f += 4;
                    }
                    while f < d.cout {
                        let g = &g_img[f * o_plane..][..o_plane];
                        for k in 0..k_dim {
                            let wv = kernel[f * k_dim + k];
                            let row = &mut dp[k * o_plane..][..o_plane];
                            for i in 0..o_plane {
                                row[i] += wv * g[i];
                            }
                        }
                        f += 1;
                    }
                    col2im_add(di_img, &dp, d);
                });
            Some(di)
        } else {
            None
        };
        return (dinput, dkernel, dbias);
    }

    // dkernel: one task per block of output channels; streams the input
    // once per block with the block's gradient planes hot
    let kslice = d.cin * ksz;
    let mut dkernel = vec![0.0; d.cout * kslice];
    dkernel
        .par_chunks_mut(BLOCK * kslice)
        .enumerate()
        .for_each(|(block_idx, dk_block)| {
            let fast = is_fast3x3(d, stride, padding);
            let f0 = block_idx * BLOCK;
            let fb_count = dk_block.len() / kslice;
            for n in 0..d.n {
                for c in 0..d.cin {
                    let in_plane = &input[(n * d.cin + c) * i_plane..][..i_plane];
                    if fast {
                        let gplane = |fb: usize| {
                            &grad_out[(n * d.cout + f0 + fb) * o_plane..][..o_plane]
                        };
                        let mut fb = 0;
                        while fb + 2 <= fb_count {
                            let (left, right) = dk_block.split_at_mut((fb + 1) * kslice);
                            stencil3x3_dkernel_x2(
                                &mut left[fb * kslice + c * ksz..][..ksz],
                                &mut right[c * ksz..][..ksz],
                                gplane(fb),
                                gplane(fb + 1),
                                in_plane,
                                d.h,
                                d.w,
                            );
                            fb += 2;
                        }
                        while fb < fb_count {
                            stencil3x3_dkernel(
                                &mut dk_block[fb * kslice + c * ksz..][..ksz],
                                gplane(fb),
                                in_plane,
                                d.h,
                                d.w,
                            );
                            fb += 1;
                        }
                        continue;
                    }
                    for fb in 0..fb_count {
                        let f = f0 + fb;
                        let g = &grad_out[(n * d.cout + f) * o_plane..][..o_plane];
                        let dk = &mut dk_block[fb * kslice + c * ksz..][..ksz];
                        for ky in 0..d.kh {
                            let yoff = ky as isize - p;
                            let (oy_lo, oy_hi) = valid_out_range(d.oh, d.h, yoff, stride);
                            for kx in 0..d.kw {
                                let xoff = kx as isize - p;
                                let (ox_lo, ox_hi) = valid_out_range(d.ow, d.w, xoff, stride);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let mut acc = 0.0;
                                for oy in oy_lo..oy_hi {
                                    let iy = (oy * stride) as isize + yoff;
                                    acc += row_dot(
                                        &g[oy * d.ow..(oy + 1) * d.ow],
                                        &in_plane[iy as usize * d.w..(iy as usize + 1) * d.w],
                                        ox_lo,
                                        ox_hi,
                                        xoff,
                                        stride,
                                    );
                                }
                                dk[ky * d.kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        });

    // dinput: one task per (image, block of input channels); streams the
    // gradient once per block
    let dinput = if need_dinput {
        let mut di = vec![0.0; d.n * d.cin * i_plane];
        di.par_chunks_mut(d.cin * i_plane)
            .enumerate()
            .flat_map(|(n, img_di)| {
                img_di
                    .par_chunks_mut(BLOCK * i_plane)
                    .enumerate()
                    .map(move |(bi, blk)| (n, bi * BLOCK, blk))
            })
            .for_each(|(n, c0, di_block)| {
                let fast = is_fast3x3(d, stride, padding);
                let cb_count = di_block.len() / i_plane;
                // input gradient is a correlation with the flipped kernel
                let kflip = |f: usize, c: usize| -> [f64; 9] {
                    let base = (f * d.cin + c) * ksz;
                    let k = &kernel[base..base + 9];
                    [k[8], k[7], k[6], k[5], k[4], k[3], k[2], k[1], k[0]]
                };
                for f in 0..d.cout {
                    let g = &grad_out[(n * d.cout + f) * o_plane..][..o_plane];
                    if fast {
                        let mut cb = 0;
                        while cb + 4 <= cb_count {
                            let kks = [
                                kflip(f, c0 + cb),
                                kflip(f, c0 + cb + 1),
                                kflip(f, c0 + cb + 2),
                                kflip(f, c0 + cb + 3),
                            ];
                            stencil3x3_x4(
                                &mut di_block[cb * i_plane..(cb + 4) * i_plane],
                                i_plane,
                                g,
                                &kks,
                                d.h,
                                d.w,
                            );
                            cb += 4;
                        }
                        while cb < cb_count {
                            let kf = kflip(f, c0 + cb);
                            stencil3x3_accumulate(
                                &mut di_block[cb * i_plane..][..i_plane],
                                g,
                                &kf,
                                d.h,
                                d.w,
                            );
                            cb += 1;
                        }
                        continue;
                    }
                    for cb in 0..cb_count {
                        let c = c0 + cb;
                        let kbase = (f * d.cin + c) * ksz;
                        let di_plane = &mut di_block[cb * i_plane..][..i_plane];
                        for ky in 0..d.kh {
                            let yoff = ky as isize - p;
                            let (oy_lo, oy_hi) = valid_out_range(d.oh, d.h, yoff, stride);
                            for kx in 0..d.kw {
                                let xoff = kx as isize - p;
                                let (ox_lo, ox_hi) = valid_out_range(d.ow, d.w, xoff, stride);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let wv = kernel[kbase + ky * d.kw + kx];
                                for oy in oy_lo..oy_hi {
                                    let iy = (oy * stride) as isize + yoff;
                                    scatter_row(
                                        &mut di_plane[iy as usize * d.w..(iy as usize + 1) * d.w],
                                        &g[oy * d.ow..(oy + 1) * d.ow],
                                        wv,
                                        ox_lo,
                                        ox_hi,
                                        xoff,
                                        stride,
                                    );
                                }
                            }
                        }
                    }
                }
            });
        Some(di)
    } else {
        None
    };

    (dinput, dkernel, dbias)
}

/// in_row[ox * stride + off] += wv * g_row[ox] over the valid range.
#[inline]
fn scatter_row(
    in_row: &mut [f64],
    g_row: &[f64],
    wv: f64,
    ox_lo: usize,
    ox_hi: usize,
    xoff: isize,
    stride: usize,
) {
    if stride == 1 {
        let ix0 = (ox_lo as isize + xoff) as usize;
        let dst = &mut in_row[ix0..ix0 + (ox_hi - ox_lo)];
        let src = &g_row[ox_lo..ox_hi];
        for (o, g) in dst.iter_mut().zip(src) {
            *o += wv * g;
        }
    } else {
        for ox in ox_lo..ox_hi {
            let ix = ((ox * stride) as isize + xoff) as usize;
            in_row[ix] += wv * g_row[ox];
        }
    }
}

/// Dot product with four running sums so the reduction pipelines well.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        s[0] += a[j] * b[j];
        s[1] += a[j + 1] * b[j + 1];
        s[2] += a[j + 2] * b[j + 2];
        s[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    s[0] + s[1] + s[2] + s[3] + tail
}

/// Plain (non-tape) convolution for inference-only paths.
pub(crate) fn conv2d_raw(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let d = conv_dims(input, kernel, bias, stride, padding)?;
    let out = forward(input.values(), kernel.values(), bias.values(), &d, stride, padding);
    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_clips_to_borders() {
        // kernel offset -1 (padding 1) on a length-4 input, stride 1, out 4
        assert_eq!(valid_out_range(4, 4, -1, 1), (1, 4));
        assert_eq!(valid_out_range(4, 4, 1, 1), (0, 3));
        assert_eq!(valid_out_range(4, 4, 0, 1), (0, 4));
        // stride 2
        assert_eq!(valid_out_range(2, 4, -1, 2), (1, 2));
        assert_eq!(valid_out_range(2, 4, 1, 2), (0, 2));
    }

    #[test]
    fn all_ones_3x3_padded() {
        let input = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let kernel = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(vec![1]);
        let out = conv2d_raw(&input, &kernel, &bias, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        // corners see 4 ones, edges 6, center 9
        assert_eq!(out.values(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn one_by_one_identity() {
        let input = Tensor::new(vec![1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.0, 0.5, -0.25]).unwrap();
        let kernel = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let bias = Tensor::zeros(vec![1]);
        let out = conv2d_raw(&input, &kernel, &bias, 1, 0).unwrap();
        assert_eq!(out.values(), input.values());
    }

    #[test]
    fn same_padding_preserves_dims_for_odd_kernels() {
        for k in [1usize, 3, 5] {
            let input = Tensor::full(vec![1, 1, 6, 7], 0.5);
            let kernel = Tensor::full(vec![2, 1, k, k], 0.1);
            let bias = Tensor::zeros(vec![2]);
            let out = conv2d_raw(&input, &kernel, &bias, 1, (k - 1) / 2).unwrap();
            assert_eq!(out.shape(), &[1, 2, 6, 7], "kernel {k}");
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let input = Tensor::zeros(vec![1, 2, 4, 4]);
        let kernel = Tensor::zeros(vec![1, 3, 3, 3]);
        let bias = Tensor::zeros(vec![1]);
        let err = conv2d_raw(&input, &kernel, &bias, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    /// Reference convolution with naive loops, for cross-checking the
    /// blocked kernels on unaligned channel counts.
    fn reference_forward(
        input: &[f64],
        kernel: &[f64],
        bias: &[f64],
        d: &ConvDims,
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; d.n * d.cout * d.oh * d.ow];
        for n in 0..d.n {
            for f in 0..d.cout {
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        let mut acc = bias[f];
                        for c in 0..d.cin {
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    acc += kernel[((f * d.cin + c) * d.kh + ky) * d.kw + kx]
                                        * input[((n * d.cin + c) * d.h + iy as usize) * d.w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((n * d.cout + f) * d.oh + oy) * d.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn blocked_kernel_matches_reference_on_odd_channel_counts() {
        // cout = 11 exercises the ragged final block
        for (cin, cout, stride, padding) in [(3usize, 11usize, 1usize, 1usize), (5, 9, 2, 1)] {
            let d = ConvDims {
                n: 2,
                cin,
                h: 6,
                w: 7,
                cout,
                kh: 3,
                kw: 3,
                oh: conv_out_dim(6, 3, stride, padding).unwrap(),
                ow: conv_out_dim(7, 3, stride, padding).unwrap(),
            };
            let input: Vec<f64> = (0..d.n * cin * 42).map(|i| ((i * 17 % 13) as f64) - 6.0).collect();
            let kernel: Vec<f64> = (0..cout * cin * 9).map(|i| ((i * 7 % 11) as f64) * 0.25 - 1.0).collect();
            let bias: Vec<f64> = (0..cout).map(|i| i as f64 * 0.1).collect();
            let got = forward(&input, &kernel, &bias, &d, stride, padding);
            let want = reference_forward(&input, &kernel, &bias, &d, stride, padding);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }
}

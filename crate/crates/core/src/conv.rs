//! 2-D convolution forward/backward.
//!
//! Stride-1 convolutions (the entire U-Net trunk) run as direct row-slice
//! kernels: for every (c_out, c_in, ky, kx) the inner loop is a contiguous
//! axpy over an image row, which vectorizes well even for very narrow
//! layers where im2col+GEMM wastes its packing. Strided convolutions (the
//! feature extractor) fall back to im2col+GEMM.
//!
//! All parallel loops split over batch samples with disjoint outputs; kernel
//! gradients are reduced in sample order afterwards, so results are
//! independent of the number of worker threads.

use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Elem, Tensor};
use rayon::prelude::*;

/// Row-slice kernels beat im2col+GEMM only while rows are long enough to
/// amortize the per-(channel, tap) loop overhead.
const DIRECT_MIN_WIDTH: usize = 33;

fn use_direct(g: &Geom) -> bool {
    g.stride == 1 && (g.w_out >= DIRECT_MIN_WIDTH || g.k == 1)
}

/// Shapes involved in one conv application.
#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

fn geometry<T: Elem>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Geom> {
    if x.shape().len() != 4 || kernel.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "expected NCHW input and OIKK kernel, got {:?} and {:?}",
                x.shape(),
                kernel.shape()
            ),
        });
    }
    let (n, c_in, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (c_out, ci_k, kh, kw) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
    if kh != kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("only square kernels supported, got {}x{}", kh, kw),
        });
    }
    if ci_k != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {} channels, kernel expects {}", c_in, ci_k),
        });
    }
    if stride < 1 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "kernel {} exceeds padded input {}x{}",
                kh,
                h + 2 * pad,
                w + 2 * pad
            ),
        });
    }
    Ok(Geom {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        stride,
        pad,
        h_out: conv_out_extent(h, kh, stride, pad),
        w_out: conv_out_extent(w, kw, stride, pad),
    })
}

// --------------------------------------------------------------------------
// direct stride-1 kernels

/// One sample forward: out[co] += sum_ci,k w * shifted input rows.
fn direct_fwd<T: Elem>(x: &[T], wd: &[T], bias: Option<&[T]>, g: &Geom, out: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad);
    let (h_out, w_out) = (g.h_out, g.w_out);
    for co in 0..g.c_out {
        let out_plane = &mut out[co * h_out * w_out..(co + 1) * h_out * w_out];
        match bias {
            Some(b) => out_plane.fill(b[co]),
            None => out_plane.fill(T::ZERO),
        }
        for ci in 0..g.c_in {
            let x_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((co * g.c_in + ci) * k + ky) * k + kx];
                    let x0 = pad.saturating_sub(kx);
                    let x1 = w_out.min((w + pad).saturating_sub(kx));
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in 0..h_out {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src =
                            &x_plane[iy as usize * w + x0 + kx - pad..iy as usize * w + x1 + kx - pad];
                        let dst = &mut out_plane[oy * w_out + x0..oy * w_out + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
}

/// One sample input gradient: dx[ci] += w * shifted dy rows.
fn direct_bwd_input<T: Elem>(dy: &[T], wd: &[T], g: &Geom, dx: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad);
    let (h_out, w_out) = (g.h_out, g.w_out);
    for co in 0..g.c_out {
        let dy_plane = &dy[co * h_out * w_out..(co + 1) * h_out * w_out];
        for ci in 0..g.c_in {
            let dx_plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((co * g.c_in + ci) * k + ky) * k + kx];
                    let x0 = pad.saturating_sub(kx);
                    let x1 = w_out.min((w + pad).saturating_sub(kx));
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in 0..h_out {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &dy_plane[oy * w_out + x0..oy * w_out + x1];
                        let dst = &mut dx_plane
                            [iy as usize * w + x0 + kx - pad..iy as usize * w + x1 + kx - pad];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with sixteen accumulator lanes: enough independent chains to
/// hide FMA latency, and the reduction vectorizes.
#[inline]
fn dot16<T: Elem>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 16];
    for (ca, cb) in a.chunks_exact(16).zip(b.chunks_exact(16)) {
        for l in 0..16 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::ZERO;
    for (x, y) in a
        .chunks_exact(16)
        .remainder()
        .iter()
        .zip(b.chunks_exact(16).remainder())
    {
        tail += *x * *y;
    }
    let mut total = T::ZERO;
    for pair in acc.chunks_exact(2) {
        total += pair[0] + pair[1];
    }
    total + tail
}

/// One sample kernel gradient: dw[co][ci][ky][kx] += <dy rows, shifted x rows>.
fn direct_bwd_kernel<T: Elem>(x: &[T], dy: &[T], g: &Geom, dw: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad);
    let (h_out, w_out) = (g.h_out, g.w_out);
    for co in 0..g.c_out {
        let dy_plane = &dy[co * h_out * w_out..(co + 1) * h_out * w_out];
        for ci in 0..g.c_in {
            let x_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let x0 = pad.saturating_sub(kx);
                    let x1 = w_out.min((w + pad).saturating_sub(kx));
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = T::ZERO;
                    for oy in 0..h_out {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let a = &dy_plane[oy * w_out + x0..oy * w_out + x1];
                        let b = &x_plane
                            [iy as usize * w + x0 + kx - pad..iy as usize * w + x1 + kx - pad];
                        acc += dot16(a, b);
                    }
                    dw[((co * g.c_in + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

// --------------------------------------------------------------------------
// im2col + GEMM fallback for strided convolutions

/// Unfold one sample (C×H×W) into a (C*K*K) × (H_out*W_out) matrix.
fn im2col<T: Elem>(x: &[T], g: &Geom, cols: &mut [T]) {
    let hw_out = g.h_out * g.w_out;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[(c * g.k * g.k + ky * g.k + kx) * hw_out
                    ..(c * g.k * g.k + ky * g.k + kx + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a (C*K*K) × (H_out*W_out) matrix back onto a C×H×W sample.
fn col2im_add<T: Elem>(cols: &[T], g: &Geom, x: &mut [T]) {
    let hw_out = g.h_out * g.w_out;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[(c * g.k * g.k + ky * g.k + kx) * hw_out
                    ..(c * g.k * g.k + ky * g.k + kx + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dst_row[ix as usize] += row[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

/// Samples per im2col+GEMM chunk: merging samples into one GEMM amortizes
/// panel packing, which dominates at small spatial extents.
const GEMM_CHUNK: usize = 8;

/// Unfold `samples` into one (ckk) × (samples·hw) matrix, sample-major
/// columns.
fn im2col_chunk<T: Elem>(xs: &[T], base: usize, count: usize, in_stride: usize, g: &Geom, cols: &mut [T]) {
    let hw_out = g.h_out * g.w_out;
    let big_n = count * hw_out;
    let mut single = vec![T::ZERO; g.c_in * g.k * g.k * hw_out];
    for s in 0..count {
        let x_i = &xs[(base + s) * in_stride..(base + s + 1) * in_stride];
        im2col(x_i, g, &mut single);
        for r in 0..g.c_in * g.k * g.k {
            cols[r * big_n + s * hw_out..r * big_n + (s + 1) * hw_out]
                .copy_from_slice(&single[r * hw_out..(r + 1) * hw_out]);
        }
    }
}

/// Forward convolution. `bias`, when given, must have shape [c_out].
pub fn conv2d_forward<T: Elem>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x, kernel, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?}, expected [{}]", b.shape(), g.c_out),
            });
        }
    }
    let hw_out = g.h_out * g.w_out;
    let ckk = g.c_in * g.k * g.k;
    let mut out = Tensor::zeros(&[g.n, g.c_out, g.h_out, g.w_out]);
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * hw_out;
    let xd = x.data();
    let wd = kernel.data();
    let bd = bias.map(|b| b.data());

    if use_direct(&g) {
        out.data_mut()
            .par_chunks_mut(out_stride)
            .enumerate()
            .for_each(|(i, out_i)| {
                let x_i = &xd[i * in_stride..(i + 1) * in_stride];
                direct_fwd(x_i, wd, bd, &g, out_i);
            });
    } else {
        out.data_mut()
            .par_chunks_mut(out_stride * GEMM_CHUNK)
            .enumerate()
            .for_each(|(chunk, out_chunk)| {
                let base = chunk * GEMM_CHUNK;
                let count = out_chunk.len() / out_stride;
                let big_n = count * hw_out;
                let mut cols = vec![T::ZERO; ckk * big_n];
                im2col_chunk(xd, base, count, in_stride, &g, &mut cols);
                let mut merged = vec![T::ZERO; g.c_out * big_n];
                unsafe {
                    // merged (c_out x count*hw) = W (c_out x ckk) * cols
                    T::gemm(
                        g.c_out,
                        ckk,
                        big_n,
                        T::ONE,
                        wd.as_ptr(),
                        ckk as isize,
                        1,
                        cols.as_ptr(),
                        big_n as isize,
                        1,
                        T::ZERO,
                        merged.as_mut_ptr(),
                    );
                }
                for s in 0..count {
                    let out_i = &mut out_chunk[s * out_stride..(s + 1) * out_stride];
                    for co in 0..g.c_out {
                        let row = &merged[co * big_n + s * hw_out..co * big_n + (s + 1) * hw_out];
                        let dst = &mut out_i[co * hw_out..(co + 1) * hw_out];
                        match bd {
                            Some(b) => {
                                let bv = b[co];
                                for (d, v) in dst.iter_mut().zip(row) {
                                    *d = *v + bv;
                                }
                            }
                            None => dst.copy_from_slice(row),
                        }
                    }
                }
            });
    }
    Ok(out)
}

/// Gradients from one conv application. Entries are `None` when not requested.
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dkernel: Option<Tensor<T>>,
    pub dbias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Elem>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dkernel: bool,
    need_dbias: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(x, kernel, stride, pad)?;
    let hw_out = g.h_out * g.w_out;
    let ckk = g.c_in * g.k * g.k;
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * hw_out;
    debug_assert_eq!(dy.shape(), [g.n, g.c_out, g.h_out, g.w_out]);
    let xd = x.data();
    let wd = kernel.data();
    let dyd = dy.data();

    // gather dY rows of one chunk into sample-major columns (c_out x count*hw)
    let gather_dy_chunk = |base: usize, count: usize, buf: &mut [T]| {
        let big_n = count * hw_out;
        for s in 0..count {
            let dy_i = &dyd[(base + s) * out_stride..(base + s + 1) * out_stride];
            for co in 0..g.c_out {
                buf[co * big_n + s * hw_out..co * big_n + (s + 1) * hw_out]
                    .copy_from_slice(&dy_i[co * hw_out..(co + 1) * hw_out]);
            }
        }
    };

    let dx = if need_dx {
        let mut dx = Tensor::zeros(x.shape());
        if use_direct(&g) {
            dx.data_mut()
                .par_chunks_mut(in_stride)
                .enumerate()
                .for_each(|(i, dx_i)| {
                    let dy_i = &dyd[i * out_stride..(i + 1) * out_stride];
                    direct_bwd_input(dy_i, wd, &g, dx_i);
                });
        } else {
            dx.data_mut()
                .par_chunks_mut(in_stride * GEMM_CHUNK)
                .enumerate()
                .for_each(|(chunk, dx_chunk)| {
                    let base = chunk * GEMM_CHUNK;
                    let count = dx_chunk.len() / in_stride;
                    let big_n = count * hw_out;
                    let mut dy_big = vec![T::ZERO; g.c_out * big_n];
                    gather_dy_chunk(base, count, &mut dy_big);
                    let mut dcols = vec![T::ZERO; ckk * big_n];
                    unsafe {
                        // dcols (ckk x count*hw) = W^T (ckk x c_out) * dY
                        T::gemm(
                            ckk,
                            g.c_out,
                            big_n,
                            T::ONE,
                            wd.as_ptr(),
                            1,
                            ckk as isize,
                            dy_big.as_ptr(),
                            big_n as isize,
                            1,
                            T::ZERO,
                            dcols.as_mut_ptr(),
                        );
                    }
                    let mut single = vec![T::ZERO; ckk * hw_out];
                    for s in 0..count {
                        for r in 0..ckk {
                            single[r * hw_out..(r + 1) * hw_out].copy_from_slice(
                                &dcols[r * big_n + s * hw_out..r * big_n + (s + 1) * hw_out],
                            );
                        }
                        col2im_add(&single, &g, &mut dx_chunk[s * in_stride..(s + 1) * in_stride]);
                    }
                });
        }
        Some(dx)
    } else {
        None
    };

    let dkernel = if need_dkernel {
        // per-chunk partials, then an ordered reduction
        let chunk_count = g.n.div_ceil(GEMM_CHUNK);
        let partials: Vec<Vec<T>> = (0..chunk_count)
            .into_par_iter()
            .map(|chunk| {
                let base = chunk * GEMM_CHUNK;
                let count = GEMM_CHUNK.min(g.n - base);
                let mut dw_c = vec![T::ZERO; g.c_out * ckk];
                if use_direct(&g) {
                    for s in 0..count {
                        let x_i = &xd[(base + s) * in_stride..(base + s + 1) * in_stride];
                        let dy_i = &dyd[(base + s) * out_stride..(base + s + 1) * out_stride];
                        direct_bwd_kernel(x_i, dy_i, &g, &mut dw_c);
                    }
                } else {
                    let big_n = count * hw_out;
                    let mut cols = vec![T::ZERO; ckk * big_n];
                    im2col_chunk(xd, base, count, in_stride, &g, &mut cols);
                    let mut dy_big = vec![T::ZERO; g.c_out * big_n];
                    gather_dy_chunk(base, count, &mut dy_big);
                    unsafe {
                        // dW (c_out x ckk) = dY (c_out x count*hw) * cols^T
                        T::gemm(
                            g.c_out,
                            big_n,
                            ckk,
                            T::ONE,
                            dy_big.as_ptr(),
                            big_n as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            big_n as isize,
                            T::ZERO,
                            dw_c.as_mut_ptr(),
                        );
                    }
                }
                dw_c
            })
            .collect();
        let mut dw = Tensor::zeros(kernel.shape());
        for part in &partials {
            for (d, p) in dw.data_mut().iter_mut().zip(part) {
                *d += *p;
            }
        }
        Some(dw)
    } else {
        None
    };

    let dbias = if need_dbias {
        let mut db = Tensor::zeros(&[g.c_out]);
        for i in 0..g.n {
            for co in 0..g.c_out {
                let mut s = T::ZERO;
                for v in &dyd[i * out_stride + co * hw_out..i * out_stride + (co + 1) * hw_out] {
                    s += *v;
                }
                db.data_mut()[co] += s;
            }
        }
        Some(db)
    } else {
        None
    };

    Ok(ConvGrads { dx, dkernel, dbias })
}

/// Plain nested-loop convolution, kept as an independent reference for tests.
#[doc(hidden)]
pub fn conv2d_reference<T: Elem>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x, kernel, stride, pad)?;
    let mut out = Tensor::zeros(&[g.n, g.c_out, g.h_out, g.w_out]);
    let xd = x.data();
    let wd = kernel.data();
    for i in 0..g.n {
        for co in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = bias.map_or(T::ZERO, |b| b.data()[co]);
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || iy >= g.h as isize || ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = xd
                                    [((i * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = wd[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((i * g.c_out + co) * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

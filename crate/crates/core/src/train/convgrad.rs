//! Backward passes for the direct group convolution.
//!
//! Both gradients operate in the real domain; binary layers call them on
//! unpacked ±1 tensors, full-precision layers directly. Internally the input
//! is lowered to a patch matrix (one row per filter tap component, one
//! column per output position), which turns the late layers' tiny spatial
//! extents into long contiguous dot products instead of per-position loops.

use rayon::prelude::*;

use crate::binary::ConvGeometry;
use crate::num::Scalar;
use crate::tensor::{Shape4, Tensor4};

const LANES: usize = 8;

#[inline]
fn fold_lanes<T: Scalar>(lanes: &[T; LANES]) -> T {
    let mut width = LANES;
    let mut acc = *lanes;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] = acc[l] + acc[l + width];
        }
    }
    acc[0]
}

/// Dot product with sixteen independent accumulators folded in a fixed
/// order. Vectorizes well and is deterministic run to run.
#[inline]
pub(crate) fn dot8<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let (xa, xb) = (&a[i * LANES..(i + 1) * LANES], &b[i * LANES..(i + 1) * LANES]);
        for l in 0..LANES {
            lanes[l] = lanes[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    fold_lanes(&lanes) + tail
}

/// Four dot products of one left-hand row against four right-hand rows,
/// sharing the left-hand loads. Each result equals `dot8(a, b_q)` exactly.
#[inline]
fn dot8_quad<T: Scalar>(a: &[T], b: [&[T]; 4]) -> [T; 4] {
    let mut lanes = [[T::zero(); LANES]; 4];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let xa = &a[i * LANES..(i + 1) * LANES];
        for (q, lq) in lanes.iter_mut().enumerate() {
            let xb = &b[q][i * LANES..(i + 1) * LANES];
            for l in 0..LANES {
                lq[l] = lq[l] + xa[l] * xb[l];
            }
        }
    }
    let mut out = [T::zero(); 4];
    for q in 0..4 {
        let mut tail = T::zero();
        for i in chunks * LANES..a.len() {
            tail += a[i] * b[q][i];
        }
        out[q] = fold_lanes(&lanes[q]) + tail;
    }
    out
}

/// `acc[i] += w · x[i]`, the vectorizable update shared by the lowering.
#[inline]
fn axpy<T: Scalar>(acc: &mut [T], w: T, x: &[T]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + w * v;
    }
}

/// Geometry of the patch-matrix lowering.
struct Lowering {
    rows_per_group: usize,
    ncols: usize,
    oh: usize,
    ow: usize,
}

impl Lowering {
    fn of(geom: &ConvGeometry, xs: Shape4) -> Self {
        let (oh, ow) = geom.out_hw(xs.h, xs.w);
        Lowering {
            rows_per_group: geom.in_per_group() * geom.kernel.0 * geom.kernel.1,
            ncols: xs.n * oh * ow,
            oh,
            ow,
        }
    }
}

/// Walks the valid (input row ↔ patch column) spans of one tap row.
/// Calls `f(col_start, x_start, len, stride)` per output row.
#[inline]
fn tap_spans(
    xs: Shape4,
    low: &Lowering,
    geom: &ConvGeometry,
    n: usize,
    ic: usize,
    r: usize,
    t: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let ow_lo = if t >= pw { 0 } else { (pw - t).div_ceil(sw) };
    if xs.w + pw <= t {
        return;
    }
    let ow_hi = (((xs.w - 1 + pw - t) / sw) + 1).min(low.ow);
    if ow_lo >= ow_hi {
        return;
    }
    let x_plane = (n * xs.c + ic) * xs.h * xs.w;
    for ohi in 0..low.oh {
        let ih = ohi * sh + r;
        if ih < ph || ih - ph >= xs.h {
            continue;
        }
        let ih = ih - ph;
        let col = (n * low.oh + ohi) * low.ow + ow_lo;
        let x_at = x_plane + ih * xs.w + ow_lo * sw + t - pw;
        f(col, x_at, ow_hi - ow_lo, sw);
    }
}

/// Patch matrix of one group: row `(icg, r, t)`, column `(n, oh, ow)`.
/// Padded positions stay zero.
fn im2col_group<T: Scalar>(
    x: &Tensor4<T>,
    geom: &ConvGeometry,
    low: &Lowering,
    group: usize,
) -> Vec<T> {
    let xs = x.shape();
    let (kh, kw) = geom.kernel;
    let cpg = geom.in_per_group();
    let xd = x.data();
    let mut cols = vec![T::zero(); low.rows_per_group * low.ncols];
    for icg in 0..cpg {
        let ic = group * cpg + icg;
        for r in 0..kh {
            for t in 0..kw {
                let row = (icg * kh + r) * kw + t;
                let out = &mut cols[row * low.ncols..(row + 1) * low.ncols];
                for n in 0..xs.n {
                    tap_spans(xs, low, geom, n, ic, r, t, |col, x_at, len, sw| {
                        if sw == 1 {
                            out[col..col + len].copy_from_slice(&xd[x_at..x_at + len]);
                        } else {
                            for j in 0..len {
                                out[col + j] = xd[x_at + j * sw];
                            }
                        }
                    });
                }
            }
        }
    }
    cols
}

/// All output-gradient channels transposed to contiguous `ncols` rows.
fn dy_rows<T: Scalar>(dy: &Tensor4<T>, low: &Lowering) -> Vec<T> {
    let s = dy.shape();
    let plane = s.h * s.w;
    let mut rows = vec![T::zero(); s.c * low.ncols];
    for n in 0..s.n {
        for o in 0..s.c {
            let base = (n * s.c + o) * plane;
            rows[o * low.ncols + n * plane..o * low.ncols + (n + 1) * plane]
                .copy_from_slice(&dy.data()[base..base + plane]);
        }
    }
    rows
}

/// Output-channel tile size: keeps a tile of dy rows cache-resident while a
/// patch row streams through.
const OC_TILE: usize = 16;

/// Forward convolution through the same lowering; numerically identical to
/// the direct reference up to float summation order. The training layers use
/// it because the late blocks' 1×1 spatial extents starve the direct loops.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    geom: &ConvGeometry,
) -> Tensor4<T> {
    geom.assert_valid();
    let xs = x.shape();
    assert_eq!(xs.c, geom.in_channels, "input channel mismatch");
    assert_eq!(w.shape(), geom.weight_shape(), "weight shape mismatch");

    let low = Lowering::of(geom, xs);
    let opg = geom.out_per_group();
    let wd = w.data();
    let groups: Vec<Vec<T>> = (0..geom.groups)
        .into_par_iter()
        .map(|b| im2col_group(x, geom, &low, b))
        .collect();

    // y rows live in (o, n·p) space; scatter back to (n, o, p) at the end.
    let mut rows = vec![T::zero(); geom.out_channels * low.ncols];
    rows.par_chunks_mut(low.ncols).enumerate().for_each(|(o, yrow)| {
        let cols = &groups[o / opg];
        let filter = &wd[o * low.rows_per_group..(o + 1) * low.rows_per_group];
        for (row, &wv) in filter.iter().enumerate() {
            if wv != T::zero() {
                axpy(yrow, wv, &cols[row * low.ncols..(row + 1) * low.ncols]);
            }
        }
    });

    let plane = low.oh * low.ow;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, geom.out_channels, low.oh, low.ow));
    let od = out.data_mut();
    for o in 0..geom.out_channels {
        let yrow = &rows[o * low.ncols..(o + 1) * low.ncols];
        for n in 0..xs.n {
            od[(n * geom.out_channels + o) * plane..][..plane]
                .copy_from_slice(&yrow[n * plane..(n + 1) * plane]);
        }
    }
    out
}

/// Both gradients in one call, sharing the transposed output gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    dy: &Tensor4<T>,
    w: &Tensor4<T>,
    geom: &ConvGeometry,
) -> (Tensor4<T>, Tensor4<T>) {
    geom.assert_valid();
    assert_eq!(x.shape().c, geom.in_channels, "input channel mismatch");
    assert_eq!(x.shape().n, dy.shape().n, "batch mismatch");
    let low = Lowering::of(geom, x.shape());
    let dyt = dy_rows(dy, &low);
    let dw = weight_grad_inner(x, geom, &low, &dyt);
    let dx = input_grad_inner(dy, w, geom, (x.shape().h, x.shape().w), &low, &dyt);
    (dw, dx)
}

/// Gradient with respect to the convolution weights.
pub fn conv2d_weight_grad<T: Scalar>(
    x: &Tensor4<T>,
    dy: &Tensor4<T>,
    geom: &ConvGeometry,
) -> Tensor4<T> {
    geom.assert_valid();
    let xs = x.shape();
    let dys = dy.shape();
    assert_eq!(xs.c, geom.in_channels, "input channel mismatch");
    assert_eq!(dys.c, geom.out_channels, "output channel mismatch");
    assert_eq!(geom.out_hw(xs.h, xs.w), (dys.h, dys.w), "output size mismatch");
    assert_eq!(xs.n, dys.n, "batch mismatch");

    let low = Lowering::of(geom, xs);
    let dyt = dy_rows(dy, &low);
    weight_grad_inner(x, geom, &low, &dyt)
}

fn weight_grad_inner<T: Scalar>(
    x: &Tensor4<T>,
    geom: &ConvGeometry,
    low: &Lowering,
    dyt: &[T],
) -> Tensor4<T> {
    let opg = geom.out_per_group();
    let mut dw = Tensor4::zeros(geom.weight_shape());

    let groups: Vec<Vec<T>> = (0..geom.groups)
        .into_par_iter()
        .map(|b| im2col_group(x, geom, low, b))
        .collect();

    // Tiles of output channels walk the patch matrix together so every
    // patch row is streamed once per tile rather than once per channel, and
    // four channels at a time share each patch-row load.
    dw.data_mut()
        .par_chunks_mut(low.rows_per_group * OC_TILE)
        .enumerate()
        .for_each(|(tile, filters)| {
            let o0 = tile * OC_TILE;
            let tile_len = filters.len() / low.rows_per_group;
            for row in 0..low.rows_per_group {
                let mut i = 0usize;
                while i < tile_len {
                    let o = o0 + i;
                    // A quad must stay inside one group: it shares the
                    // group's patch row.
                    let run_end = tile_len.min((o / opg + 1) * opg - o0);
                    let cols = &groups[o / opg];
                    let a = &cols[row * low.ncols..(row + 1) * low.ncols];
                    while i + 4 <= run_end {
                        let dyr = |k: usize| {
                            &dyt[(o0 + i + k) * low.ncols..(o0 + i + k + 1) * low.ncols]
                        };
                        let quad = dot8_quad(a, [dyr(0), dyr(1), dyr(2), dyr(3)]);
                        for (k, &v) in quad.iter().enumerate() {
                            filters[(i + k) * low.rows_per_group + row] = v;
                        }
                        i += 4;
                    }
                    while i < run_end {
                        filters[i * low.rows_per_group + row] = dot8(
                            a,
                            &dyt[(o0 + i) * low.ncols..(o0 + i + 1) * low.ncols],
                        );
                        i += 1;
                    }
                }
            }
        });
    dw
}

/// Gradient with respect to the convolution input (transposed convolution).
pub fn conv2d_input_grad<T: Scalar>(
    dy: &Tensor4<T>,
    w: &Tensor4<T>,
    geom: &ConvGeometry,
    in_hw: (usize, usize),
) -> Tensor4<T> {
    let xs = Shape4::new(dy.shape().n, geom.in_channels, in_hw.0, in_hw.1);
    let low = Lowering::of(geom, xs);
    let dyt = dy_rows(dy, &low);
    input_grad_inner(dy, w, geom, in_hw, &low, &dyt)
}

fn input_grad_inner<T: Scalar>(
    dy: &Tensor4<T>,
    w: &Tensor4<T>,
    geom: &ConvGeometry,
    in_hw: (usize, usize),
    low: &Lowering,
    dyt: &[T],
) -> Tensor4<T> {
    geom.assert_valid();
    assert_eq!(w.shape(), geom.weight_shape(), "weight shape mismatch");
    let dys = dy.shape();
    assert_eq!(dys.c, geom.out_channels, "output channel mismatch");
    let xs = Shape4::new(dys.n, geom.in_channels, in_hw.0, in_hw.1);
    assert_eq!(geom.out_hw(xs.h, xs.w), (dys.h, dys.w), "output size mismatch");

    let (kh, kw) = geom.kernel;
    let cpg = geom.in_per_group();
    let opg = geom.out_per_group();
    let wd = w.data();

    // Per group: dcols = Wᵀ · dy, rows in patch space. Output channels are
    // tiled so the dy rows of a tile stay cache-resident while the patch
    // rows stream through.
    let dcols_groups: Vec<Vec<T>> = (0..geom.groups)
        .into_par_iter()
        .map(|b| {
            let mut dcols = vec![T::zero(); low.rows_per_group * low.ncols];
            for tile in (0..opg).step_by(OC_TILE) {
                let tile_end = (tile + OC_TILE).min(opg);
                for row in 0..low.rows_per_group {
                    let drow = &mut dcols[row * low.ncols..(row + 1) * low.ncols];
                    for og in tile..tile_end {
                        let o = b * opg + og;
                        let wv = wd[o * low.rows_per_group + row];
                        if wv != T::zero() {
                            axpy(drow, wv, &dyt[o * low.ncols..(o + 1) * low.ncols]);
                        }
                    }
                }
            }
            dcols
        })
        .collect();

    // Scatter patch-space gradients back to input coordinates. Parallel over
    // input channels: distinct channels never alias.
    let mut dx = Tensor4::zeros(xs);
    let plane = xs.h * xs.w;
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(p, dxp)| {
            let n = p / xs.c;
            let ic = p % xs.c;
            let b = ic / cpg;
            let icg = ic % cpg;
            let dcols = &dcols_groups[b];
            let x_plane_base = (n * xs.c + ic) * plane;
            for r in 0..kh {
                for t in 0..kw {
                    let row = (icg * kh + r) * kw + t;
                    let drow = &dcols[row * low.ncols..(row + 1) * low.ncols];
                    tap_spans(xs, low, geom, n, ic, r, t, |col, x_at, len, sw| {
                        let local = x_at - x_plane_base;
                        if sw == 1 {
                            axpy(&mut dxp[local..local + len], T::one(), &drow[col..col + len]);
                        } else {
                            for j in 0..len {
                                dxp[local + j * sw] = dxp[local + j * sw] + drow[col + j];
                            }
                        }
                    });
                }
            }
        });
    dx
}

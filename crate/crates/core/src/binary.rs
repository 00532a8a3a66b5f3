//! XNOR-popcount group convolution, its float reference, and per-filter
//! scaling factors.
//!
//! The binary kernel computes the ±1 dot product of a window as
//! `n_valid − 2·popcount(a XOR b)` on bit-packed operands. Padded border
//! positions contribute zero: the popcount is restricted to valid taps, which
//! keeps the kernel exactly equivalent to the zero-padded float reference on
//! ±1 data. Accumulation is in 32-bit integers; scaling by α happens after.

use rayon::prelude::*;

use crate::num::Scalar;
use crate::tensor::{read_bits, BitTensor, Shape4, Tensor4, WORD_BITS};

/// Geometry of a (possibly grouped) 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Self {
        let g = ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        };
        g.assert_valid();
        g
    }

    pub fn assert_valid(&self) {
        assert!(self.in_channels > 0 && self.out_channels > 0);
        assert!(self.kernel.0 >= 1 && self.kernel.1 >= 1);
        assert!(self.stride.0 >= 1 && self.stride.1 >= 1);
        assert!(self.groups >= 1, "groups must be at least 1");
        assert_eq!(
            self.in_channels % self.groups,
            0,
            "groups {} must divide in_channels {}",
            self.groups,
            self.in_channels
        );
        assert_eq!(
            self.out_channels % self.groups,
            0,
            "groups {} must divide out_channels {}",
            self.groups,
            self.out_channels
        );
    }

    /// Input channels per group.
    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    /// Output channels per group.
    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Output spatial size for an input of `(h, w)`.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        assert!(
            h + 2 * ph >= kh && w + 2 * pw >= kw,
            "kernel {:?} larger than padded input {}x{}",
            self.kernel,
            h + 2 * ph,
            w + 2 * pw
        );
        ((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1)
    }

    /// Expected weight shape `(out, in/groups, kh, kw)`.
    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(self.out_channels, self.in_per_group(), self.kernel.0, self.kernel.1)
    }
}

/// One positive scale per output filter (α of the XNOR-Net weight
/// approximation `w ≈ α·sign(w)`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector<T> {
    pub alpha: Vec<T>,
}

impl<T: Scalar> ScaleVector<T> {
    /// Unit scales, handy for exactness tests.
    pub fn ones(out_channels: usize) -> Self {
        ScaleVector {
            alpha: vec![T::one(); out_channels],
        }
    }
}

/// Computes the optimal per-filter scale `α_o = mean |w[o, ·]|`, the
/// minimizer of `‖w_o − α·sign(w_o)‖²`.
pub fn scaling_factor<T: Scalar>(w: &Tensor4<T>) -> ScaleVector<T> {
    let s = w.shape();
    let per_filter = s.c * s.h * s.w;
    let norm = T::cast(1.0 / per_filter as f64);
    let alpha = w
        .data()
        .chunks(per_filter)
        .map(|f| f.iter().map(|&v| v.abs()).sum::<T>() * norm)
        .collect();
    ScaleVector { alpha }
}

/// ±1 dot product of two packed bit slices of `n` logical elements,
/// computed as `n − 2·popcount(a XOR b)`.
///
/// Both slices must span exactly `ceil(n/64)` words with padding bits zero.
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], n: usize) -> i64 {
    let words = n.div_ceil(WORD_BITS);
    assert_eq!(a.len(), words, "lhs word count mismatch for n={n}");
    assert_eq!(b.len(), words, "rhs word count mismatch for n={n}");
    let disagree: u32 = a.iter().zip(b).map(|(&x, &y)| (x ^ y).count_ones()).sum();
    n as i64 - 2 * i64::from(disagree)
}

/// XOR-popcount of `len` bits of `a` starting at bit `a_off` against the
/// word-aligned zero-padded run `b`.
#[inline]
fn xor_popcount_run(a: &[u64], a_off: usize, b: &[u64], len: usize) -> u32 {
    let mut pop = 0u32;
    let mut off = a_off;
    let mut rem = len;
    for &bw in b {
        if rem == 0 {
            break;
        }
        let take = rem.min(WORD_BITS);
        let chunk = read_bits(a, off, take);
        pop += (chunk ^ bw).count_ones();
        off += take;
        rem -= take;
    }
    pop
}

/// Repacks NCHW bits into channel-last order: bit `((n·H + h)·W + w)·C + c`.
fn repack_channel_last(x: &BitTensor) -> Vec<u64> {
    let s = x.shape();
    let mut out = vec![0u64; s.len().div_ceil(WORD_BITS)];
    let mut src = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    if x.get(src) {
                        let dst = ((n * s.h + h) * s.w + w) * s.c + c;
                        out[dst / WORD_BITS] |= 1u64 << (dst % WORD_BITS);
                    }
                    src += 1;
                }
            }
        }
    }
    out
}

/// Repacks filter bits so that each `(filter, tap)` pair owns a word-aligned
/// zero-padded run of its `in/g` channel bits. Returns `(words_per_run, runs)`.
fn repack_filter_runs(w: &BitTensor) -> (usize, Vec<u64>) {
    let s = w.shape(); // (out, in/g, kh, kw)
    let cpg = s.c;
    let wpr = cpg.div_ceil(WORD_BITS).max(1);
    let mut runs = vec![0u64; s.n * s.h * s.w * wpr];
    for o in 0..s.n {
        for c in 0..cpg {
            for r in 0..s.h {
                for t in 0..s.w {
                    let src = ((o * cpg + c) * s.h + r) * s.w + t;
                    if w.get(src) {
                        let run = (o * s.h + r) * s.w + t;
                        let dst = run * wpr * WORD_BITS + c;
                        runs[dst / WORD_BITS] |= 1u64 << (dst % WORD_BITS);
                    }
                }
            }
        }
    }
    (wpr, runs)
}

/// Sign-binarized activations packed channel-last (bit
/// `((n·H + h)·W + w)·C + c`), the layout the conv kernel consumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedActs {
    pub shape: Shape4,
    words: Vec<u64>,
}

/// Sign-binarized filters packed one word-aligned zero-padded channel run
/// per `(filter, tap)`, with the per-filter scales.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights<T> {
    pub scale: ScaleVector<T>,
    words_per_run: usize,
    runs: Vec<u64>,
    shape: Shape4,
}

/// Fuses sign binarization with the channel-last repack.
pub fn pack_acts<T: Scalar>(x: &Tensor4<T>) -> PackedActs {
    let s = x.shape();
    let xd = x.data();
    let plane = s.h * s.w;
    let mut words = vec![0u64; s.len().div_ceil(WORD_BITS)];
    let zero = T::zero();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &xd[(n * s.c + c) * plane..][..plane];
            let mut dst = (n * plane) * s.c + c;
            for &v in src {
                if v >= zero {
                    words[dst / WORD_BITS] |= 1u64 << (dst % WORD_BITS);
                }
                dst += s.c;
            }
        }
    }
    PackedActs { shape: s, words }
}

/// Binarizes the block-diagonal crop of a full `(out, in, kh, kw)` latent
/// tensor for `g` groups directly into run-packed form, computing the
/// per-filter scales in the same pass.
pub fn pack_weights_block_diagonal<T: Scalar>(master: &Tensor4<T>, g: usize) -> PackedWeights<T> {
    let ms = master.shape();
    assert!(ms.n % g == 0 && ms.c % g == 0, "groups {g} must divide {ms:?}");
    let cpg = ms.c / g;
    let opg = ms.n / g;
    let (kh, kw) = (ms.h, ms.w);
    let taps = kh * kw;
    let wpr = cpg.div_ceil(WORD_BITS).max(1);
    let mut runs = vec![0u64; ms.n * taps * wpr];
    let mut alpha = Vec::with_capacity(ms.n);
    let md = master.data();
    let norm = T::cast(1.0 / (cpg * taps) as f64);
    let zero = T::zero();
    // Walk the master contiguously; per 64-channel chunk, collect the tap
    // words in a local buffer before flushing them into the run layout.
    let mut tap_words = vec![0u64; taps];
    for o in 0..ms.n {
        let base_in = (o / opg) * cpg;
        let mut abs_sum = T::zero();
        for chunk in 0..wpr {
            let c_lo = chunk * WORD_BITS;
            let c_hi = ((chunk + 1) * WORD_BITS).min(cpg);
            tap_words.fill(0);
            for icg in c_lo..c_hi {
                let row = &md[((o * ms.c + base_in + icg) * kh) * kw..][..taps];
                let bit = 1u64 << (icg - c_lo);
                for (tap, &v) in row.iter().enumerate() {
                    abs_sum += v.abs();
                    if v >= zero {
                        tap_words[tap] |= bit;
                    }
                }
            }
            for (tap, &w) in tap_words.iter().enumerate() {
                runs[(o * taps + tap) * wpr + chunk] = w;
            }
        }
        alpha.push(abs_sum * norm);
    }
    PackedWeights {
        scale: ScaleVector { alpha },
        words_per_run: wpr,
        runs,
        shape: Shape4::new(ms.n, cpg, kh, kw),
    }
}

fn conv_core(
    x_words: &[u64],
    xs: Shape4,
    runs: &[u64],
    wpr: usize,
    geom: &ConvGeometry,
) -> (Shape4, Vec<i32>) {
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (oh, ow) = geom.out_hw(xs.h, xs.w);
    let cpg = geom.in_per_group();
    let opg = geom.out_per_group();
    let out_shape = Shape4::new(xs.n, geom.out_channels, oh, ow);

    // Valid tap ranges per output row/column, hoisted out of the hot loop.
    let r_range = |ohi: usize| -> (usize, usize) {
        let lo = if ohi * sh >= ph { 0 } else { ph - ohi * sh };
        let hi = (xs.h + ph - ohi * sh).min(kh);
        (lo, hi.max(lo))
    };
    let t_ranges: Vec<(usize, usize)> = (0..ow)
        .map(|owi| {
            let lo = if owi * sw >= pw { 0 } else { pw - owi * sw };
            let hi = (xs.w + pw - owi * sw).min(kw);
            (lo, hi.max(lo))
        })
        .collect();

    let mut out = vec![0i32; out_shape.len()];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, plane)| {
        let n = p / geom.out_channels;
        let o = p % geom.out_channels;
        let c0 = (o / opg) * cpg;
        for ohi in 0..oh {
            let (r_lo, r_hi) = r_range(ohi);
            for owi in 0..ow {
                let (t_lo, t_hi) = t_ranges[owi];
                let mut pop = 0u32;
                for r in r_lo..r_hi {
                    let ih = ohi * sh + r - ph;
                    let row_base = (n * xs.h + ih) * xs.w * xs.c + c0;
                    for t in t_lo..t_hi {
                        let iw = owi * sw + t - pw;
                        let run = (o * kh + r) * kw + t;
                        pop += xor_popcount_run(
                            x_words,
                            row_base + iw * xs.c,
                            &runs[run * wpr..(run + 1) * wpr],
                            cpg,
                        );
                    }
                }
                let valid = (r_hi - r_lo) * (t_hi - t_lo) * cpg;
                plane[ohi * ow + owi] = valid as i32 - 2 * pop as i32;
            }
        }
    });
    (out_shape, out)
}

/// XNOR-popcount convolution on pre-packed operands, scaled per filter.
pub fn binary_conv_packed<T: Scalar>(
    x: &PackedActs,
    w: &PackedWeights<T>,
    geom: &ConvGeometry,
) -> Tensor4<T> {
    geom.assert_valid();
    assert_eq!(x.shape.c, geom.in_channels, "input channel mismatch");
    assert_eq!(w.shape, geom.weight_shape(), "weight shape mismatch");
    let (shape, raw) = conv_core(&x.words, x.shape, &w.runs, w.words_per_run, geom);
    scale_raw(shape, raw, &w.scale, geom.out_channels)
}

fn scale_raw<T: Scalar>(
    shape: Shape4,
    raw: Vec<i32>,
    scale: &ScaleVector<T>,
    out_channels: usize,
) -> Tensor4<T> {
    let plane = shape.h * shape.w;
    let mut data = Vec::with_capacity(raw.len());
    for (p, chunk) in raw.chunks(plane).enumerate() {
        let alpha = scale.alpha[p % out_channels];
        data.extend(chunk.iter().map(|&v| alpha * T::cast(f64::from(v))));
    }
    Tensor4::from_vec(shape, data)
}

/// XNOR-popcount group convolution, pre-scaling: returns the raw integer
/// agreement sums. Padded taps are excluded from the sum (they contribute 0).
pub fn binary_group_conv2d_raw(
    x: &BitTensor,
    w: &BitTensor,
    geom: &ConvGeometry,
) -> (Shape4, Vec<i32>) {
    geom.assert_valid();
    let xs = x.shape();
    assert_eq!(xs.c, geom.in_channels, "input channel mismatch");
    assert_eq!(w.shape(), geom.weight_shape(), "weight shape mismatch");
    let xcl = repack_channel_last(x);
    let (wpr, runs) = repack_filter_runs(w);
    conv_core(&xcl, xs, &runs, wpr, geom)
}

/// XNOR-popcount group convolution with per-filter scaling:
/// `out[o] = α_o · (integer agreement sum)`.
pub fn binary_group_conv2d<T: Scalar>(
    x: &BitTensor,
    w: &BitTensor,
    geom: &ConvGeometry,
    scale: &ScaleVector<T>,
) -> Tensor4<T> {
    assert_eq!(scale.alpha.len(), geom.out_channels, "scale length mismatch");
    let (shape, raw) = binary_group_conv2d_raw(x, w, geom);
    scale_raw(shape, raw, scale, geom.out_channels)
}

/// Direct zero-padded group convolution over real tensors. Group `b` of the
/// output channels reads only group `b` of the input channels.
pub fn float_group_conv2d<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    geom: &ConvGeometry,
) -> Tensor4<T> {
    geom.assert_valid();
    let xs = x.shape();
    assert_eq!(xs.c, geom.in_channels, "input channel mismatch");
    assert_eq!(w.shape(), geom.weight_shape(), "weight shape mismatch");

    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (oh, ow) = geom.out_hw(xs.h, xs.w);
    let cpg = geom.in_per_group();
    let opg = geom.out_per_group();
    let out_shape = Shape4::new(xs.n, geom.out_channels, oh, ow);

    let xd = x.data();
    let wd = w.data();
    let mut out = Tensor4::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(p, plane)| {
            let n = p / geom.out_channels;
            let o = p % geom.out_channels;
            let c0 = (o / opg) * cpg;
            for cg in 0..cpg {
                let ic = c0 + cg;
                for r in 0..kh {
                    for t in 0..kw {
                        let wv = wd[((o * cpg + cg) * kh + r) * kw + t];
                        conv_tap_axpy(
                            plane,
                            &xd[((n * xs.c + ic) * xs.h) * xs.w..][..xs.h * xs.w],
                            wv,
                            (xs.h, xs.w),
                            (oh, ow),
                            (sh, sw),
                            (ph, pw),
                            (r, t),
                        );
                    }
                }
            }
        });
    out
}

/// Accumulates a single filter tap over one input plane into one output
/// plane: `out[oh, ow] += wv · x[oh·sh + r − ph, ow·sw + t − pw]` for valid
/// input coordinates.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn conv_tap_axpy<T: Scalar>(
    out: &mut [T],
    x: &[T],
    wv: T,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (r, t): (usize, usize),
) {
    if wv == T::zero() {
        return;
    }
    // Valid output column range: 0 ≤ ow·sw + t − pw < w.
    let ow_lo = if t >= pw { 0 } else { (pw - t).div_ceil(sw) };
    if w + pw <= t {
        return;
    }
    let ow_hi = (((w - 1 + pw - t) / sw) + 1).min(ow);
    if ow_lo >= ow_hi {
        return;
    }
    for ohi in 0..oh {
        let ih = ohi * sh + r;
        if ih < ph || ih - ph >= h {
            continue;
        }
        let ih = ih - ph;
        let orow = &mut out[ohi * ow + ow_lo..ohi * ow + ow_hi];
        let x_base = ih * w + ow_lo * sw + t - pw;
        if sw == 1 {
            let xrow = &x[x_base..x_base + (ow_hi - ow_lo)];
            for (acc, &xv) in orow.iter_mut().zip(xrow) {
                *acc = *acc + wv * xv;
            }
        } else {
            for (j, acc) in orow.iter_mut().enumerate() {
                *acc = *acc + wv * x[x_base + j * sw];
            }
        }
    }
}

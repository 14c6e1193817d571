//! Slice-level convolution and pooling kernels.
//!
//! Strided convolutions are evaluated on a phase-split copy of the input:
//! plane `(ry, rx)` of a channel holds pixels `(ry + a*s, rx + b*s)`. Every
//! kernel tap then reads (or writes) a contiguous run of a phase plane, so
//! the inner loops are plain `axpy`/`dot` over slices for any stride. For
//! stride 1 the split is the identity and no copy is made.
//!
//! Ungrouped convolutions are lowered to im2col + GEMM; grouped (depthwise)
//! ones run the direct tap loops above, which are cheap at one input channel
//! per group.
//!
//! Work is split into fixed blocks of output channels (forward, weight
//! gradient) or input channels (input gradient), so each element is reduced
//! in the same order whatever the thread count.

use std::borrow::Cow;

use crate::error::{DenetError, Result};
use crate::par;

/// Fully resolved geometry of a (grouped) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        (h, w): (usize, usize),
        c_out: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        dilation: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if [c_in, h, w, c_out, kh, kw, stride, dilation, groups].contains(&0) {
            return Err(DenetError::InvalidSpec("extents, kernel, stride, dilation and groups must be positive".into()));
        }
        if !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(DenetError::InvalidSpec(format!("{c_in} -> {c_out} channels cannot be split into {groups} groups")));
        }
        let extent = |n: usize, k: usize| super::ConvSpec::out_extent(n, k, stride, dilation, pad);
        match (extent(h, kh), extent(w, kw)) {
            (Some(oh), Some(ow)) => Ok(ConvGeom { c_in, h, w, c_out, kh, kw, stride, dilation, pad, groups, oh, ow }),
            _ => Err(DenetError::InvalidSpec(format!(
                "{kh}x{kw} kernel with dilation {dilation} and padding {pad} does not fit a {h}x{w} input"
            ))),
        }
    }

    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.cin_per_group() * self.kh * self.kw
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }
}

/// One kernel tap along one axis: output index `o` reads phase `r`,
/// position `o + q`, for `o` in `lo..hi`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    r: usize,
    q: isize,
    lo: usize,
    hi: usize,
}

impl Tap {
    fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }

    fn src(&self, o: usize) -> usize {
        (o as isize + self.q) as usize
    }
}

fn phase_count(n: usize, r: usize, s: usize) -> usize {
    if r < n {
        (n - r).div_ceil(s)
    } else {
        0
    }
}

fn taps(kernel: usize, n_in: usize, n_out: usize, g: &ConvGeom) -> Vec<Tap> {
    let s = g.stride as isize;
    (0..kernel)
        .map(|k| {
            let off = (k * g.dilation) as isize - g.pad as isize;
            let r = off.rem_euclid(s) as usize;
            let q = off.div_euclid(s);
            let cnt = phase_count(n_in, r, g.stride) as isize;
            let lo = (-q).max(0);
            let hi = (cnt - q).min(n_out as isize);
            Tap { r, q, lo: lo as usize, hi: hi.max(lo) as usize }
        })
        .collect()
}

/// Phase-split view of a `[C, H, W]` buffer.
struct Phases<'a> {
    data: Cow<'a, [f64]>,
    s: usize,
    ph: usize,
    pw: usize,
}

impl<'a> Phases<'a> {
    fn plane_len(&self) -> usize {
        self.ph * self.pw
    }

    fn channel_len(&self) -> usize {
        self.s * self.s * self.plane_len()
    }

    fn plane(&self, c: usize, ry: usize, rx: usize) -> &[f64] {
        let start = c * self.channel_len() + (ry * self.s + rx) * self.plane_len();
        &self.data[start..start + self.plane_len()]
    }

    fn split(src: &'a [f64], c: usize, h: usize, w: usize, s: usize) -> Self {
        if s == 1 {
            return Phases { data: Cow::Borrowed(src), s, ph: h, pw: w };
        }
        let (ph, pw) = (h.div_ceil(s), w.div_ceil(s));
        let mut data = vec![0.0; c * s * s * ph * pw];
        for ch in 0..c {
            for y in 0..h {
                let (ry, a) = (y % s, y / s);
                for x in 0..w {
                    let (rx, b) = (x % s, x / s);
                    data[((ch * s + ry) * s + rx) * ph * pw + a * pw + b] = src[(ch * h + y) * w + x];
                }
            }
        }
        Phases { data: Cow::Owned(data), s, ph, pw }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed tree.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))) + tail
}

/// `out[co] = bias[co] + sum_{ci, ky, kx} w[co, ci, ky, kx] * in[ci, ...]`.
pub fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(weight.len(), g.weight_len());
    debug_assert_eq!(out.len(), g.output_len());
    if g.groups == 1 {
        gemm_forward(g, input, weight, bias, out);
    } else {
        direct_forward(g, input, weight, bias, out);
    }
}

fn direct_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let phases = Phases::split(input, g.c_in, g.h, g.w, g.stride);
    let ytaps = taps(g.kh, g.h, g.oh, g);
    let xtaps = taps(g.kw, g.w, g.ow, g);
    let (cin_pg, cout_pg) = (g.cin_per_group(), g.cout_per_group());
    let (ow, pw) = (g.ow, phases.pw);

    par::for_each_chunk_mut(out, g.oh * g.ow, |co, plane| {
        plane.fill(bias.map_or(0.0, |b| b[co]));
        let group = co / cout_pg;
        for cil in 0..cin_pg {
            let ci = group * cin_pg + cil;
            for (ky, ty) in ytaps.iter().enumerate() {
                if ty.is_empty() {
                    continue;
                }
                for (kx, tx) in xtaps.iter().enumerate() {
                    if tx.is_empty() {
                        continue;
                    }
                    let wv = weight[((co * cin_pg + cil) * g.kh + ky) * g.kw + kx];
                    let src = phases.plane(ci, ty.r, tx.r);
                    if tx.lo == 0 && tx.hi == ow && tx.q == 0 && pw == ow {
                        let (a0, a1) = (ty.src(ty.lo), ty.src(ty.hi));
                        axpy(wv, &src[a0 * pw..a1 * pw], &mut plane[ty.lo * ow..ty.hi * ow]);
                        continue;
                    }
                    let n = tx.hi - tx.lo;
                    let b0 = tx.src(tx.lo);
                    for oy in ty.lo..ty.hi {
                        let a = ty.src(oy);
                        axpy(wv, &src[a * pw + b0..a * pw + b0 + n], &mut plane[oy * ow + tx.lo..oy * ow + tx.hi]);
                    }
                }
            }
        }
    });
}

/// Adjoint of [`conv_forward`] with respect to its input (bias excluded):
/// `grad_in = W^T gout`. Overwrites `grad_in`.
pub fn conv_backward_input(g: &ConvGeom, gout: &[f64], weight: &[f64], grad_in: &mut [f64]) {
    debug_assert_eq!(gout.len(), g.output_len());
    debug_assert_eq!(weight.len(), g.weight_len());
    debug_assert_eq!(grad_in.len(), g.input_len());
    if g.groups == 1 {
        gemm_backward_input(g, gout, weight, grad_in);
    } else {
        direct_backward_input(g, gout, weight, grad_in);
    }
}

fn direct_backward_input(g: &ConvGeom, gout: &[f64], weight: &[f64], grad_in: &mut [f64]) {
    let s = g.stride;
    let (ph, pw) = (g.h.div_ceil(s), g.w.div_ceil(s));
    let plane_len = ph * pw;
    let ytaps = taps(g.kh, g.h, g.oh, g);
    let xtaps = taps(g.kw, g.w, g.ow, g);
    let (cin_pg, cout_pg) = (g.cin_per_group(), g.cout_per_group());
    let ow = g.ow;

    let scatter = |ci: usize, phase_buf: &mut [f64]| {
        phase_buf.fill(0.0);
        let group = ci / cin_pg;
        let cil = ci - group * cin_pg;
        for co in group * cout_pg..(group + 1) * cout_pg {
            let gplane = &gout[co * g.oh * ow..(co + 1) * g.oh * ow];
            for (ky, ty) in ytaps.iter().enumerate() {
                if ty.is_empty() {
                    continue;
                }
                for (kx, tx) in xtaps.iter().enumerate() {
                    if tx.is_empty() {
                        continue;
                    }
                    let wv = weight[((co * cin_pg + cil) * g.kh + ky) * g.kw + kx];
                    let start = (ty.r * s + tx.r) * plane_len;
                    let dst = &mut phase_buf[start..start + plane_len];
                    if tx.lo == 0 && tx.hi == ow && tx.q == 0 && pw == ow {
                        let (a0, a1) = (ty.src(ty.lo), ty.src(ty.hi));
                        axpy(wv, &gplane[ty.lo * ow..ty.hi * ow], &mut dst[a0 * pw..a1 * pw]);
                        continue;
                    }
                    let n = tx.hi - tx.lo;
                    let b0 = tx.src(tx.lo);
                    for oy in ty.lo..ty.hi {
                        let a = ty.src(oy);
                        axpy(wv, &gplane[oy * ow + tx.lo..oy * ow + tx.hi], &mut dst[a * pw + b0..a * pw + b0 + n]);
                    }
                }
            }
        }
    };

    if s == 1 {
        par::for_each_chunk_mut(grad_in, g.h * g.w, scatter);
        return;
    }
    let mut phases = vec![0.0; g.c_in * s * s * plane_len];
    par::for_each_chunk_mut(&mut phases, s * s * plane_len, scatter);
    unsplit(g, &phases, grad_in);
}

/// Inverse of [`Phases::split`] for a `[c_in, h, w]` buffer.
fn unsplit(g: &ConvGeom, phases: &[f64], out: &mut [f64]) {
    let s = g.stride;
    let (ph, pw) = (g.h.div_ceil(s), g.w.div_ceil(s));
    let plane_len = ph * pw;
    for ci in 0..g.c_in {
        for y in 0..g.h {
            let (ry, a) = (y % s, y / s);
            for x in 0..g.w {
                let (rx, b) = (x % s, x / s);
                out[(ci * g.h + y) * g.w + x] = phases[((ci * s + ry) * s + rx) * plane_len + a * pw + b];
            }
        }
    }
}

/// Weight gradient of [`conv_forward`]. Overwrites `grad_w`.
pub fn conv_backward_weight(g: &ConvGeom, input: &[f64], gout: &[f64], grad_w: &mut [f64]) {
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(gout.len(), g.output_len());
    debug_assert_eq!(grad_w.len(), g.weight_len());
    if g.groups == 1 {
        gemm_backward_weight(g, input, gout, grad_w);
    } else {
        direct_backward_weight(g, input, gout, grad_w);
    }
}

fn direct_backward_weight(g: &ConvGeom, input: &[f64], gout: &[f64], grad_w: &mut [f64]) {
    let phases = Phases::split(input, g.c_in, g.h, g.w, g.stride);
    let ytaps = taps(g.kh, g.h, g.oh, g);
    let xtaps = taps(g.kw, g.w, g.ow, g);
    let (cin_pg, cout_pg) = (g.cin_per_group(), g.cout_per_group());
    let (ow, pw) = (g.ow, phases.pw);

    par::for_each_chunk_mut(grad_w, cin_pg * g.kh * g.kw, |co, wchunk| {
        let group = co / cout_pg;
        let gplane = &gout[co * g.oh * ow..(co + 1) * g.oh * ow];
        for cil in 0..cin_pg {
            let ci = group * cin_pg + cil;
            for (ky, ty) in ytaps.iter().enumerate() {
                for (kx, tx) in xtaps.iter().enumerate() {
                    let slot = &mut wchunk[(cil * g.kh + ky) * g.kw + kx];
                    if ty.is_empty() || tx.is_empty() {
                        *slot = 0.0;
                        continue;
                    }
                    let src = phases.plane(ci, ty.r, tx.r);
                    if tx.lo == 0 && tx.hi == ow && tx.q == 0 && pw == ow {
                        let (a0, a1) = (ty.src(ty.lo), ty.src(ty.hi));
                        *slot = dot(&src[a0 * pw..a1 * pw], &gplane[ty.lo * ow..ty.hi * ow]);
                        continue;
                    }
                    let n = tx.hi - tx.lo;
                    let b0 = tx.src(tx.lo);
                    let mut acc = 0.0;
                    for oy in ty.lo..ty.hi {
                        let a = ty.src(oy);
                        acc += dot(&src[a * pw + b0..a * pw + b0 + n], &gplane[oy * ow + tx.lo..oy * ow + tx.hi]);
                    }
                    *slot = acc;
                }
            }
        }
    });
}

/// Output channels (or im2col rows) per parallel task in the GEMM paths.
const ROW_BLOCK: usize = 16;

/// Row-major `c[m x n] = a[m x k] * b[k x n]`, operands given by
/// `(data, row stride, column stride)`.
fn matmul(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize), c: &mut [f64]) {
    let span = |(d, rs, cs): (&[f64], usize, usize), r: usize, col: usize| {
        assert!(r == 0 || col == 0 || (r - 1) * rs + (col - 1) * cs < d.len());
    };
    span(a, m, k);
    span(b, k, n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertions above keep every index the routine touches
    // inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

/// `[c_in * kh * kw, oh * ow]` matrix of input taps (zero where padded).
fn im2col<'a>(g: &ConvGeom, input: &'a [f64]) -> Cow<'a, [f64]> {
    if is_pointwise(g) {
        return Cow::Borrowed(input);
    }
    let phases = Phases::split(input, g.c_in, g.h, g.w, g.stride);
    let ytaps = taps(g.kh, g.h, g.oh, g);
    let xtaps = taps(g.kw, g.w, g.ow, g);
    let (p, ow, pw) = (g.oh * g.ow, g.ow, phases.pw);
    let mut col = vec![0.0; g.c_in * g.kh * g.kw * p];
    par::for_each_chunk_mut(&mut col, g.kh * g.kw * p, |ci, rows| {
        for (ky, ty) in ytaps.iter().enumerate() {
            for (kx, tx) in xtaps.iter().enumerate() {
                if ty.is_empty() || tx.is_empty() {
                    continue;
                }
                let row = &mut rows[(ky * g.kw + kx) * p..][..p];
                let src = phases.plane(ci, ty.r, tx.r);
                let (n, b0) = (tx.hi - tx.lo, tx.src(tx.lo));
                for oy in ty.lo..ty.hi {
                    let a = ty.src(oy);
                    row[oy * ow + tx.lo..oy * ow + tx.hi].copy_from_slice(&src[a * pw + b0..a * pw + b0 + n]);
                }
            }
        }
    });
    Cow::Owned(col)
}

/// Adjoint of [`im2col`]: sums every column entry back onto its input pixel.
fn col2im(g: &ConvGeom, col: &[f64], grad_in: &mut [f64]) {
    let s = g.stride;
    let (ph, pw) = (g.h.div_ceil(s), g.w.div_ceil(s));
    let plane_len = ph * pw;
    let ytaps = taps(g.kh, g.h, g.oh, g);
    let xtaps = taps(g.kw, g.w, g.ow, g);
    let (p, ow) = (g.oh * g.ow, g.ow);
    let gather = |ci: usize, buf: &mut [f64]| {
        buf.fill(0.0);
        let rows = &col[ci * g.kh * g.kw * p..(ci + 1) * g.kh * g.kw * p];
        for (ky, ty) in ytaps.iter().enumerate() {
            for (kx, tx) in xtaps.iter().enumerate() {
                if ty.is_empty() || tx.is_empty() {
                    continue;
                }
                let row = &rows[(ky * g.kw + kx) * p..][..p];
                let dst = &mut buf[(ty.r * s + tx.r) * plane_len..][..plane_len];
                let (n, b0) = (tx.hi - tx.lo, tx.src(tx.lo));
                for oy in ty.lo..ty.hi {
                    let a = ty.src(oy);
                    axpy(1.0, &row[oy * ow + tx.lo..oy * ow + tx.hi], &mut dst[a * pw + b0..a * pw + b0 + n]);
                }
            }
        }
    };
    if s == 1 {
        par::for_each_chunk_mut(grad_in, g.h * g.w, gather);
        return;
    }
    let mut phases = vec![0.0; g.c_in * s * s * plane_len];
    par::for_each_chunk_mut(&mut phases, s * s * plane_len, gather);
    unsplit(g, &phases, grad_in);
}

fn gemm_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let col = im2col(g, input);
    let (k, p) = (g.c_in * g.kh * g.kw, g.oh * g.ow);
    par::for_each_chunk_mut(out, ROW_BLOCK * p, |blk, chunk| {
        let (r0, m) = (blk * ROW_BLOCK, chunk.len() / p);
        matmul(m, k, p, (&weight[r0 * k..(r0 + m) * k], k, 1), (&col, p, 1), chunk);
        if let Some(b) = bias {
            for (plane, &bv) in chunk.chunks_mut(p).zip(&b[r0..r0 + m]) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
}

fn gemm_backward_weight(g: &ConvGeom, input: &[f64], gout: &[f64], grad_w: &mut [f64]) {
    let col = im2col(g, input);
    let (k, p) = (g.c_in * g.kh * g.kw, g.oh * g.ow);
    par::for_each_chunk_mut(grad_w, ROW_BLOCK * k, |blk, chunk| {
        let (r0, m) = (blk * ROW_BLOCK, chunk.len() / k);
        matmul(m, p, k, (&gout[r0 * p..(r0 + m) * p], p, 1), (&col, 1, p), chunk);
    });
}

fn gemm_backward_input(g: &ConvGeom, gout: &[f64], weight: &[f64], grad_in: &mut [f64]) {
    let (k, p) = (g.c_in * g.kh * g.kw, g.oh * g.ow);
    let transposed_product = |dst: &mut [f64]| {
        par::for_each_chunk_mut(dst, ROW_BLOCK * p, |blk, chunk| {
            let (r0, m) = (blk * ROW_BLOCK, chunk.len() / p);
            matmul(m, g.c_out, p, (&weight[r0..], 1, k), (gout, p, 1), chunk);
        });
    };
    if is_pointwise(g) {
        transposed_product(grad_in);
        return;
    }
    let mut col = vec![0.0; k * p];
    transposed_product(&mut col);
    col2im(g, &col, grad_in);
}

/// Per-channel sums of a `[C, plane]` buffer (bias gradient).
pub fn channel_sums(data: &[f64], channels: usize) -> Vec<f64> {
    let plane = data.len() / channels;
    (0..channels).map(|c| data[c * plane..(c + 1) * plane].iter().sum()).collect()
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn add_channel_bias(data: &mut [f64], bias: &[f64]) {
    let plane = data.len() / bias.len();
    par::for_each_chunk_mut(data, plane, |c, p| p.iter_mut().for_each(|v| *v += bias[c]));
}

/// Max pooling without padding. Returns the output and, for every output
/// element, the flat input index of the (first) maximum.
pub fn max_pool_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
) -> Result<(Vec<f64>, Vec<usize>, usize, usize)> {
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(DenetError::InvalidSpec(format!("{k}x{k} pool with stride {stride} on a {h}x{w} input")));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((out, arg, oh, ow))
}

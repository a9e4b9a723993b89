//! 3D convolution over `N×C×T×H×W` tensors.
//!
//! [`conv3d_reference`] is the direct seven-deep loop. [`conv3d`] gathers
//! input windows into column tiles and runs a register-blocked kernel, but
//! every output element still accumulates its `C×kt×kh×kw` products one at a
//! time in kernel-layout order, starting from zero, with the bias added last.
//! The two paths therefore round identically and agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LANES: usize = 16;
const TILE_POSITIONS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dParams {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dParams {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dParams { stride, padding }
    }

    /// Unit stride, zero padding.
    pub fn valid() -> Self {
        Conv3dParams::new([1; 3], [0; 3])
    }

    /// Unit stride with `(k-1)/2` padding, which keeps extents for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Conv3dParams::new([1; 3], kernel.map(|k| (k - 1) / 2))
    }
}

/// Output extent of one axis, or `None` when the window does not fit.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub ot: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvDims {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: Option<&[usize]>,
        p: Conv3dParams,
    ) -> Result<Self> {
        if input.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("input must be N×C×T×H×W, got {:?}", input),
            ));
        }
        if kernel.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("kernel must be K×C×kt×kh×kw, got {:?}", kernel),
            ));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "input has {} channels but kernel expects {}",
                    input[1], kernel[1]
                ),
            ));
        }
        if let Some(b) = bias {
            if b != [kernel[0]] {
                return Err(Error::shape(
                    "conv3d",
                    format!("bias shape {:?} does not match {} filters", b, kernel[0]),
                ));
            }
        }
        let mut out = [0usize; 3];
        for axis in 0..3 {
            out[axis] = out_extent(
                input[2 + axis],
                kernel[2 + axis],
                p.stride[axis],
                p.padding[axis],
            )
            .filter(|&e| e > 0)
            .ok_or_else(|| {
                Error::shape(
                    "conv3d",
                    format!(
                        "non-positive output extent on axis {} (input {}, kernel {}, stride {}, pad {})",
                        axis,
                        input[2 + axis],
                        kernel[2 + axis],
                        p.stride[axis],
                        p.padding[axis]
                    ),
                )
            })?;
        }
        Ok(ConvDims {
            n: input[0],
            c: input[1],
            t: input[2],
            h: input[3],
            w: input[4],
            k: kernel[0],
            kt: kernel[2],
            kh: kernel[3],
            kw: kernel[4],
            ot: out[0],
            oh: out[1],
            ow: out[2],
            stride: p.stride,
            pad: p.padding,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.k, self.ot, self.oh, self.ow]
    }

    /// Length of one unrolled receptive field.
    pub fn ckk(&self) -> usize {
        self.c * self.kt * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.ot * self.oh * self.ow
    }

    fn sample_len(&self) -> usize {
        self.c * self.t * self.h * self.w
    }

    fn rows_per_tile(&self) -> usize {
        (TILE_POSITIONS / self.ow).max(1)
    }
}

/// Direct-loop convolution. Padding reads as zero.
pub fn conv3d_reference<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    p: Conv3dParams,
) -> Result<Tensor<S>> {
    let d = ConvDims::new(input.shape(), kernel.shape(), bias.map(|b| b.shape()), p)?;
    let x = input.data();
    let wt = kernel.data();
    let mut out = Vec::with_capacity(d.n * d.k * d.positions());
    for n in 0..d.n {
        for k in 0..d.k {
            for ot in 0..d.ot {
                for oh in 0..d.oh {
                    for ow in 0..d.ow {
                        let mut acc = S::zero();
                        for c in 0..d.c {
                            for a in 0..d.kt {
                                for b in 0..d.kh {
                                    for e in 0..d.kw {
                                        let it =
                                            (ot * d.stride[0] + a) as isize - d.pad[0] as isize;
                                        let ih =
                                            (oh * d.stride[1] + b) as isize - d.pad[1] as isize;
                                        let iw =
                                            (ow * d.stride[2] + e) as isize - d.pad[2] as isize;
                                        let inside = it >= 0
                                            && ih >= 0
                                            && iw >= 0
                                            && (it as usize) < d.t
                                            && (ih as usize) < d.h
                                            && (iw as usize) < d.w;
                                        let xv = if inside {
                                            x[(((n * d.c + c) * d.t + it as usize) * d.h
                                                + ih as usize)
                                                * d.w
                                                + iw as usize]
                                        } else {
                                            S::zero()
                                        };
                                        let wv =
                                            wt[(((k * d.c + c) * d.kt + a) * d.kh + b) * d.kw + e];
                                        acc = wv.mul_add(xv, acc);
                                    }
                                }
                            }
                        }
                        if let Some(bias) = bias {
                            acc += bias.data()[k];
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    Tensor::new(d.out_shape(), out)
}

/// Fast convolution, bitwise equal to [`conv3d_reference`].
///
/// Wide outputs stream each receptive-field row straight out of a padded,
/// stride-deinterleaved copy of the input; narrow outputs go through
/// unrolled column tiles so the register block stays full.
pub fn conv3d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    p: Conv3dParams,
) -> Result<Tensor<S>> {
    let d = ConvDims::new(input.shape(), kernel.shape(), bias.map(|b| b.shape()), p)?;
    let positions = d.positions();
    let mut out = vec![S::zero(); d.n * d.k * positions];
    let bias = bias.map(|b| b.data());
    let ckk = d.ckk();
    let packed = Packed::new(kernel.data(), d.k, ckk);
    if d.ow >= LANES {
        let mut plan = RowPlan::new(&d);
        let max_tap = plan.offsets.iter().copied().max().unwrap_or(0);
        for n in 0..d.n {
            let x_n = &input.data()[n * d.sample_len()..(n + 1) * d.sample_len()];
            let out_n = &mut out[n * d.k * positions..(n + 1) * d.k * positions];
            plan.load(&d, x_n);
            for ot in 0..d.ot {
                for oh in 0..d.oh {
                    let base = (ot * d.stride[0] * plan.hp + oh * d.stride[1]) * plan.row_len;
                    let src = TileSrc {
                        window: &plan.buf[base..],
                        taps: &plan.offsets,
                        max_tap,
                        np: d.ow,
                    };
                    let mut dst = TileDst {
                        out: &mut *out_n,
                        offset: (ot * d.oh + oh) * d.ow,
                        stride: positions,
                        bias,
                    };
                    conv_tile(&packed, &src, &mut dst);
                }
            }
        }
    } else {
        let rows = d.ot * d.oh;
        let rpt = d.rows_per_tile();
        let mut col = vec![S::zero(); ckk * round_up(rpt * d.ow, LANES) + 2 * LANES];
        let mut taps = vec![0; ckk];
        for n in 0..d.n {
            let x_n = &input.data()[n * d.sample_len()..(n + 1) * d.sample_len()];
            let out_n = &mut out[n * d.k * positions..(n + 1) * d.k * positions];
            for r0 in (0..rows).step_by(rpt) {
                let r1 = (r0 + rpt).min(rows);
                let np = (r1 - r0) * d.ow;
                let ld = round_up(np, LANES);
                fill_columns(&d, x_n, r0, r1, &mut col[..ckk * ld], ld);
                for (q, t) in taps.iter_mut().enumerate() {
                    *t = q * ld;
                }
                let src = TileSrc {
                    window: &col,
                    taps: &taps,
                    max_tap: (ckk - 1) * ld,
                    np,
                };
                let mut dst = TileDst {
                    out: &mut *out_n,
                    offset: r0 * d.ow,
                    stride: positions,
                    bias,
                };
                conv_tile(&packed, &src, &mut dst);
            }
        }
    }
    Tensor::new(d.out_shape(), out)
}

/// Zero-padded input with the width axis split into `stride` phases, so the
/// inputs one kernel tap sees along an output row are contiguous.
struct RowPlan<S> {
    buf: Vec<S>,
    hp: usize,
    tp: usize,
    phase_len: usize,
    row_len: usize,
    /// Offset of each receptive-field tap relative to the window origin.
    offsets: Vec<usize>,
}

impl<S: Scalar> RowPlan<S> {
    fn new(d: &ConvDims) -> Self {
        let sw = d.stride[2];
        let tp = d.t + 2 * d.pad[0];
        let hp = d.h + 2 * d.pad[1];
        let phase_len = (d.w + 2 * d.pad[2]).div_ceil(sw) + 2 * LANES;
        let row_len = sw * phase_len;
        let mut offsets = Vec::with_capacity(d.ckk());
        for c in 0..d.c {
            for a in 0..d.kt {
                for b in 0..d.kh {
                    for e in 0..d.kw {
                        offsets.push(
                            ((c * tp + a) * hp + b) * row_len + (e % sw) * phase_len + e / sw,
                        );
                    }
                }
            }
        }
        RowPlan {
            buf: vec![S::zero(); d.c * tp * hp * row_len + 2 * LANES],
            hp,
            tp,
            phase_len,
            row_len,
            offsets,
        }
    }

    fn load(&mut self, d: &ConvDims, x_n: &[S]) {
        let sw = d.stride[2];
        for c in 0..d.c {
            for t in 0..d.t {
                for h in 0..d.h {
                    let src = &x_n[((c * d.t + t) * d.h + h) * d.w..][..d.w];
                    let row =
                        ((c * self.tp + t + d.pad[0]) * self.hp + h + d.pad[1]) * self.row_len;
                    for phase in 0..sw {
                        let iw0 = (phase + sw - d.pad[2] % sw) % sw;
                        if iw0 >= d.w {
                            continue;
                        }
                        let start = row + phase * self.phase_len + (iw0 + d.pad[2]) / sw;
                        for (dst, &v) in self.buf[start..]
                            .iter_mut()
                            .zip(src[iw0..].iter().step_by(sw))
                        {
                            *dst = v;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Conv3dGrads<S> {
    pub input: Option<Tensor<S>>,
    pub kernel: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

/// Vector-Jacobian products of [`conv3d`]; each gradient is computed only
/// when requested.
///
/// Both gradients are themselves correlations, so they are rewritten as
/// forward convolutions and run through the fast kernel: the input gradient
/// correlates the dilated, padded output gradient with the flipped,
/// transposed kernel; the kernel gradient correlates the padded input
/// (batch and channel axes swapped) with the dilated output gradient.
pub fn conv3d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
    p: Conv3dParams,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> Result<Conv3dGrads<S>> {
    let d = ConvDims::new(input.shape(), kernel.shape(), None, p)?;
    let ks = [d.kt, d.kh, d.kw];
    if (0..3).any(|i| d.pad[i] >= ks[i]) {
        return conv3d_backward_direct(
            input,
            kernel,
            grad_out,
            p,
            need_input,
            need_kernel,
            need_bias,
        );
    }
    let mut grads = conv3d_backward_direct(input, kernel, grad_out, p, false, false, need_bias)?;
    let ins = [d.t, d.h, d.w];
    let outs = [d.ot, d.oh, d.ow];
    let dil: [usize; 3] = std::array::from_fn(|i| (outs[i] - 1) * d.stride[i] + 1);

    if need_input {
        // Leading pad k-1-p, trailing pad plus whatever the strided forward
        // window never reached.
        let lo: [usize; 3] = std::array::from_fn(|i| ks[i] - 1 - d.pad[i]);
        let ext: [usize; 3] = std::array::from_fn(|i| ins[i] + ks[i] - 1);
        let mut gpad = vec![S::zero(); d.n * d.k * ext[0] * ext[1] * ext[2]];
        let g = grad_out.data();
        for nk in 0..d.n * d.k {
            for ot in 0..d.ot {
                for oh in 0..d.oh {
                    let src = &g[((nk * d.ot + ot) * d.oh + oh) * d.ow..][..d.ow];
                    let row = ((nk * ext[0] + lo[0] + ot * d.stride[0]) * ext[1]
                        + lo[1]
                        + oh * d.stride[1])
                        * ext[2]
                        + lo[2];
                    for (ow, &v) in src.iter().enumerate() {
                        gpad[row + ow * d.stride[2]] = v;
                    }
                }
            }
        }
        let gpad = Tensor::new(vec![d.n, d.k, ext[0], ext[1], ext[2]], gpad)?;
        let w = kernel.data();
        let flipped = Tensor::from_fn(vec![d.c, d.k, d.kt, d.kh, d.kw], |i| {
            let e = i % d.kw;
            let b = (i / d.kw) % d.kh;
            let a = (i / (d.kw * d.kh)) % d.kt;
            let k = (i / (d.kw * d.kh * d.kt)) % d.k;
            let c = i / (d.kw * d.kh * d.kt * d.k);
            w[(((k * d.c + c) * d.kt + (d.kt - 1 - a)) * d.kh + (d.kh - 1 - b)) * d.kw
                + (d.kw - 1 - e)]
        });
        grads.input = Some(conv3d(&gpad, &flipped, None, Conv3dParams::valid())?);
    }

    if need_kernel {
        let pe: [usize; 3] = std::array::from_fn(|i| ins[i] + 2 * d.pad[i]);
        let x = input.data();
        let mut xt = vec![S::zero(); d.c * d.n * pe[0] * pe[1] * pe[2]];
        for c in 0..d.c {
            for n in 0..d.n {
                for t in 0..d.t {
                    for h in 0..d.h {
                        let src = &x[(((n * d.c + c) * d.t + t) * d.h + h) * d.w..][..d.w];
                        let row = (((c * d.n + n) * pe[0] + t + d.pad[0]) * pe[1] + h + d.pad[1])
                            * pe[2]
                            + d.pad[2];
                        xt[row..row + d.w].copy_from_slice(src);
                    }
                }
            }
        }
        let xt = Tensor::new(vec![d.c, d.n, pe[0], pe[1], pe[2]], xt)?;
        let g = grad_out.data();
        let mut gt = vec![S::zero(); d.k * d.n * dil[0] * dil[1] * dil[2]];
        for k in 0..d.k {
            for n in 0..d.n {
                for ot in 0..d.ot {
                    for oh in 0..d.oh {
                        let src = &g[(((n * d.k + k) * d.ot + ot) * d.oh + oh) * d.ow..][..d.ow];
                        let row = (((k * d.n + n) * dil[0] + ot * d.stride[0]) * dil[1]
                            + oh * d.stride[1])
                            * dil[2];
                        for (ow, &v) in src.iter().enumerate() {
                            gt[row + ow * d.stride[2]] = v;
                        }
                    }
                }
            }
        }
        let gt = Tensor::new(vec![d.k, d.n, dil[0], dil[1], dil[2]], gt)?;
        // [C, K, r_t, r_h, r_w] with r >= kernel extent; crop and transpose.
        let r = conv3d(&xt, &gt, None, Conv3dParams::valid())?;
        let rs = r.shape().to_vec();
        let rd = r.data();
        grads.kernel = Some(Tensor::from_fn(vec![d.k, d.c, d.kt, d.kh, d.kw], |i| {
            let e = i % d.kw;
            let b = (i / d.kw) % d.kh;
            let a = (i / (d.kw * d.kh)) % d.kt;
            let c = (i / (d.kw * d.kh * d.kt)) % d.c;
            let k = i / (d.kw * d.kh * d.kt * d.c);
            rd[(((c * d.k + k) * rs[2] + a) * rs[3] + b) * rs[4] + e]
        }));
    }
    Ok(grads)
}

/// Column-gradient formulation of [`conv3d_backward`]; slower, kept as an
/// independent check.
pub fn conv3d_backward_direct<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
    p: Conv3dParams,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> Result<Conv3dGrads<S>> {
    let d = ConvDims::new(input.shape(), kernel.shape(), None, p)?;
    if grad_out.shape() != d.out_shape().as_slice() {
        return Err(Error::shape(
            "conv3d_backward",
            format!(
                "gradient shape {:?} does not match output {:?}",
                grad_out.shape(),
                d.out_shape()
            ),
        ));
    }
    let positions = d.positions();
    let ckk = d.ckk();
    let g = grad_out.data();
    let w = kernel.data();

    let grad_bias = need_bias.then(|| {
        let mut gb = vec![S::zero(); d.k];
        for n in 0..d.n {
            for (k, acc) in gb.iter_mut().enumerate() {
                let row = &g[(n * d.k + k) * positions..(n * d.k + k + 1) * positions];
                *acc += lane_sum(row);
            }
        }
        gb
    });

    let mut grad_kernel = need_kernel.then(|| vec![S::zero(); d.k * ckk]);
    let mut grad_input = need_input.then(|| vec![S::zero(); input.numel()]);
    if need_kernel || need_input {
        let rows = d.ot * d.oh;
        let rpt = d.rows_per_tile();
        let cap = ckk * round_up(rpt * d.ow, LANES);
        let mut col = vec![S::zero(); if need_kernel { cap } else { 0 }];
        let mut col_grad = vec![S::zero(); if need_input { cap } else { 0 }];
        for n in 0..d.n {
            let x_n = &input.data()[n * d.sample_len()..(n + 1) * d.sample_len()];
            let g_n = &g[n * d.k * positions..(n + 1) * d.k * positions];
            for r0 in (0..rows).step_by(rpt) {
                let r1 = (r0 + rpt).min(rows);
                let np = (r1 - r0) * d.ow;
                let ld = round_up(np, LANES);
                let off = r0 * d.ow;
                if let Some(gk) = grad_kernel.as_mut() {
                    let col = &mut col[..ckk * ld];
                    fill_columns(&d, x_n, r0, r1, col, ld);
                    for k in 0..d.k {
                        let g_row = &g_n[k * positions + off..k * positions + off + np];
                        for q in 0..ckk {
                            gk[k * ckk + q] += lane_dot(g_row, &col[q * ld..q * ld + np]);
                        }
                    }
                }
                if let Some(gi) = grad_input.as_mut() {
                    let cg = &mut col_grad[..ckk * ld];
                    cg.fill(S::zero());
                    for k in 0..d.k {
                        let g_row = &g_n[k * positions + off..k * positions + off + np];
                        for q in 0..ckk {
                            let wv = w[k * ckk + q];
                            for (dst, &gv) in cg[q * ld..q * ld + np].iter_mut().zip(g_row) {
                                *dst += wv * gv;
                            }
                        }
                    }
                    let gi_n = &mut gi[n * d.sample_len()..(n + 1) * d.sample_len()];
                    scatter_columns(&d, gi_n, r0, r1, cg, ld);
                }
            }
        }
    }

    Ok(Conv3dGrads {
        input: grad_input
            .map(|v| Tensor::new(input.shape().to_vec(), v))
            .transpose()?,
        kernel: grad_kernel
            .map(|v| Tensor::new(kernel.shape().to_vec(), v))
            .transpose()?,
        bias: grad_bias.map(|v| Tensor::new(vec![d.k], v)).transpose()?,
    })
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Range of output columns `o` with `0 <= o*stride + e - pad < width`.
fn valid_cols(ow: usize, stride: usize, e: usize, pad: usize, width: usize) -> (usize, usize) {
    let lo = if pad > e {
        (pad - e).div_ceil(stride)
    } else {
        0
    };
    let hi = if width + pad > e {
        (width + pad - e).div_ceil(stride).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unrolls the receptive fields of output rows `r0..r1` into `col`
/// (`ckk` rows of stride `ld`). Columns past the tile are zeroed.
fn fill_columns<S: Scalar>(
    d: &ConvDims,
    x_n: &[S],
    r0: usize,
    r1: usize,
    col: &mut [S],
    ld: usize,
) {
    let mut q = 0;
    for c in 0..d.c {
        for a in 0..d.kt {
            for b in 0..d.kh {
                for e in 0..d.kw {
                    let row = &mut col[q * ld..(q + 1) * ld];
                    let (lo, hi) = valid_cols(d.ow, d.stride[2], e, d.pad[2], d.w);
                    let mut pos = 0;
                    for r in r0..r1 {
                        let (to, ho) = (r / d.oh, r % d.oh);
                        let it = (to * d.stride[0] + a) as isize - d.pad[0] as isize;
                        let ih = (ho * d.stride[1] + b) as isize - d.pad[1] as isize;
                        let dst = &mut row[pos..pos + d.ow];
                        if it < 0 || ih < 0 || it as usize >= d.t || ih as usize >= d.h {
                            dst.fill(S::zero());
                        } else {
                            let base = ((c * d.t + it as usize) * d.h + ih as usize) * d.w;
                            let src = &x_n[base..base + d.w];
                            dst[..lo].fill(S::zero());
                            dst[hi..].fill(S::zero());
                            if lo < hi {
                                let first = lo * d.stride[2] + e - d.pad[2];
                                let dst = &mut dst[lo..hi];
                                if d.stride[2] == 1 {
                                    dst.copy_from_slice(&src[first..first + dst.len()]);
                                } else {
                                    for (v, &s) in
                                        dst.iter_mut().zip(src[first..].iter().step_by(d.stride[2]))
                                    {
                                        *v = s;
                                    }
                                }
                            }
                        }
                        pos += d.ow;
                    }
                    row[pos..].fill(S::zero());
                    q += 1;
                }
            }
        }
    }
}

/// Adjoint of [`fill_columns`]: accumulates column gradients into the input.
fn scatter_columns<S: Scalar>(
    d: &ConvDims,
    gi_n: &mut [S],
    r0: usize,
    r1: usize,
    col: &[S],
    ld: usize,
) {
    let mut q = 0;
    for c in 0..d.c {
        for a in 0..d.kt {
            for b in 0..d.kh {
                for e in 0..d.kw {
                    let row = &col[q * ld..(q + 1) * ld];
                    let (lo, hi) = valid_cols(d.ow, d.stride[2], e, d.pad[2], d.w);
                    let mut pos = 0;
                    for r in r0..r1 {
                        let (to, ho) = (r / d.oh, r % d.oh);
                        let it = (to * d.stride[0] + a) as isize - d.pad[0] as isize;
                        let ih = (ho * d.stride[1] + b) as isize - d.pad[1] as isize;
                        if it >= 0 && ih >= 0 && (it as usize) < d.t && (ih as usize) < d.h {
                            let base = ((c * d.t + it as usize) * d.h + ih as usize) * d.w;
                            let dst = &mut gi_n[base..base + d.w];
                            for o in lo..hi {
                                dst[o * d.stride[2] + e - d.pad[2]] += row[pos + o];
                            }
                        }
                        pos += d.ow;
                    }
                    q += 1;
                }
            }
        }
    }
}

/// Fixed-order dot product with `LANES` partial sums.
pub(crate) fn lane_dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let (x, y) = (
            &a[i * LANES..(i + 1) * LANES],
            &b[i * LANES..(i + 1) * LANES],
        );
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    for i in chunks * LANES..a.len() {
        acc[i - chunks * LANES] += a[i] * b[i];
    }
    acc.iter().fold(S::zero(), |s, &v| s + v)
}

pub(crate) fn lane_sum<S: Scalar>(a: &[S]) -> S {
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        for l in 0..LANES {
            acc[l] += a[i * LANES + l];
        }
    }
    for i in chunks * LANES..a.len() {
        acc[i - chunks * LANES] += a[i];
    }
    acc.iter().fold(S::zero(), |s, &v| s + v)
}

/// Filter weights regrouped so the weights one register block needs at a
/// given tap are adjacent: group `(kb, mr, offset)` holds filters
/// `kb..kb + mr` as `ckk` runs of `mr` values.
struct Packed<S> {
    data: Vec<S>,
    groups: Vec<(usize, usize, usize)>,
    ckk: usize,
}

impl<S: Scalar> Packed<S> {
    fn new(w: &[S], k: usize, ckk: usize) -> Self {
        let mut data = Vec::with_capacity(k * ckk);
        let mut groups = Vec::new();
        let mut kb = 0;
        while kb < k {
            let mr = if k - kb >= 8 {
                8
            } else if k - kb >= 4 {
                4
            } else {
                1
            };
            groups.push((kb, mr, data.len()));
            for q in 0..ckk {
                for j in 0..mr {
                    data.push(w[(kb + j) * ckk + q]);
                }
            }
            kb += mr;
        }
        Packed { data, groups, ckk }
    }
}

/// Where one tile reads its taps: tap `q` for output lane `l` is
/// `window[taps[q] + l]`. Lanes at or past `np` read slack and are dropped.
struct TileSrc<'a, S> {
    window: &'a [S],
    taps: &'a [usize],
    max_tap: usize,
    np: usize,
}

/// Where one tile writes: filter `k`, lane `l` lands at
/// `out[k * stride + offset + l]`.
struct TileDst<'a, S> {
    out: &'a mut [S],
    offset: usize,
    stride: usize,
    bias: Option<&'a [S]>,
}

fn conv_tile<S: Scalar>(w: &Packed<S>, src: &TileSrc<'_, S>, dst: &mut TileDst<'_, S>) {
    assert_eq!(src.taps.len(), w.ckk);
    assert!(src.max_tap + src.np.div_ceil(2 * LANES) * 2 * LANES <= src.window.len());
    #[cfg(target_arch = "x86_64")]
    if std::any::TypeId::of::<S>() == std::any::TypeId::of::<f32>() {
        // SAFETY: S is f32, so these are the same types.
        let (w, src, dst) = unsafe {
            (
                &*(w as *const Packed<S> as *const Packed<f32>),
                &*(src as *const TileSrc<'_, S> as *const TileSrc<'_, f32>),
                &mut *(dst as *mut TileDst<'_, S> as *mut TileDst<'_, f32>),
            )
        };
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime; bounds asserted above.
            unsafe { simd::tile_avx512(w, src, dst) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            // SAFETY: as above.
            unsafe { simd::tile_avx2(w, src, dst) };
            return;
        }
    }
    for &(kb, mr, off) in &w.groups {
        let wp = &w.data[off..off + mr * w.ckk];
        match mr {
            8 => conv_block::<S, 8>(wp, kb, src, dst),
            4 => conv_block::<S, 4>(wp, kb, src, dst),
            _ => conv_block::<S, 1>(wp, kb, src, dst),
        }
    }
}

/// Portable kernel. Each lane accumulates its taps in order with fused
/// multiply-adds from zero, then adds the bias: the same sequence as the
/// reference loop, so results match it bit for bit.
fn conv_block<S: Scalar, const MR: usize>(
    wp: &[S],
    kb: usize,
    src: &TileSrc<'_, S>,
    dst: &mut TileDst<'_, S>,
) {
    let mut pc = 0;
    while pc < src.np {
        let mut acc = [[S::zero(); LANES]; MR];
        for (q, &tap) in src.taps.iter().enumerate() {
            let cv = &src.window[tap + pc..tap + pc + LANES];
            for (aj, &wv) in acc.iter_mut().zip(&wp[q * MR..(q + 1) * MR]) {
                for (a, &c) in aj.iter_mut().zip(cv) {
                    *a = wv.mul_add(c, *a);
                }
            }
        }
        store_block(&acc, kb, pc, src.np, dst);
        pc += LANES;
    }
}

fn store_block<S: Scalar, const MR: usize, const W: usize>(
    acc: &[[S; W]; MR],
    kb: usize,
    pc: usize,
    np: usize,
    dst: &mut TileDst<'_, S>,
) {
    let valid = W.min(np - pc);
    for (j, row) in acc.iter().enumerate() {
        let start = (kb + j) * dst.stride + dst.offset + pc;
        let out = &mut dst.out[start..start + valid];
        match dst.bias {
            Some(b) => {
                let bv = b[kb + j];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = v + bv;
                }
            }
            None => out.copy_from_slice(&row[..valid]),
        }
    }
}

/// Hand-vectorized `f32` kernels; lane arithmetic is identical to
/// [`conv_block`].
#[cfg(target_arch = "x86_64")]
mod simd {
    use super::{store_block, Packed, TileDst, TileSrc};
    use std::arch::x86_64::*;

    macro_rules! kernel {
        ($feat:literal, $tile:ident, $block:ident, $vec:ty, $width:literal, $zero:ident,
         $load:ident, $set1:ident, $fma:ident, $store:ident, $nv:literal) => {
            /// # Safety
            /// The CPU must support the enabled features, and every tap read
            /// `taps[q] + pc + lane` must lie inside `window`.
            #[target_feature(enable = $feat)]
            pub(super) unsafe fn $tile(
                w: &Packed<f32>,
                src: &TileSrc<'_, f32>,
                dst: &mut TileDst<'_, f32>,
            ) {
                for &(kb, mr, off) in &w.groups {
                    let wp = &w.data[off..off + mr * w.ckk];
                    match mr {
                        8 => $block::<8>(wp, kb, src, dst),
                        4 => $block::<4>(wp, kb, src, dst),
                        _ => $block::<1>(wp, kb, src, dst),
                    }
                }
            }

            #[target_feature(enable = $feat)]
            unsafe fn $block<const MR: usize>(
                wp: &[f32],
                kb: usize,
                src: &TileSrc<'_, f32>,
                dst: &mut TileDst<'_, f32>,
            ) {
                const W: usize = $width * $nv;
                let base = src.window.as_ptr();
                let mut pc = 0;
                while pc < src.np {
                    let mut acc: [[$vec; $nv]; MR] = [[$zero(); $nv]; MR];
                    for (q, &tap) in src.taps.iter().enumerate() {
                        let p = base.add(tap + pc);
                        let mut cv: [$vec; $nv] = [$zero(); $nv];
                        for (v, c) in cv.iter_mut().enumerate() {
                            *c = $load(p.add(v * $width));
                        }
                        let wq = wp.as_ptr().add(q * MR);
                        for (j, aj) in acc.iter_mut().enumerate() {
                            let wv = $set1(*wq.add(j));
                            for (a, &c) in aj.iter_mut().zip(&cv) {
                                *a = $fma(wv, c, *a);
                            }
                        }
                    }
                    let mut lanes = [[0.0f32; W]; MR];
                    for (l, a) in lanes.iter_mut().zip(&acc) {
                        for (v, &x) in a.iter().enumerate() {
                            $store(l.as_mut_ptr().add(v * $width), x);
                        }
                    }
                    store_block(&lanes, kb, pc, src.np, dst);
                    pc += W;
                }
            }
        };
    }

    kernel!(
        "avx512f",
        tile_avx512,
        block_avx512,
        __m512,
        16,
        _mm512_setzero_ps,
        _mm512_loadu_ps,
        _mm512_set1_ps,
        _mm512_fmadd_ps,
        _mm512_storeu_ps,
        2
    );
    kernel!(
        "avx2,fma",
        tile_avx2,
        block_avx2,
        __m256,
        8,
        _mm256_setzero_ps,
        _mm256_loadu_ps,
        _mm256_set1_ps,
        _mm256_fmadd_ps,
        _mm256_storeu_ps,
        2
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pointwise_kernel_scales_input() {
        let x = Tensor::new(vec![1, 1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1, 1], vec![2.0f32]).unwrap();
        let b = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        let y = conv3d(&x, &k, Some(&b), Conv3dParams::valid()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn full_window_of_ones_sums_to_27() {
        let x = Tensor::<f32>::ones(vec![1, 1, 3, 3, 3]);
        let k = Tensor::<f32>::ones(vec![1, 1, 3, 3, 3]);
        let y = conv3d(&x, &k, None, Conv3dParams::valid()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[27.0]);
    }

    #[test]
    fn zero_kernel_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 4, 5, 6], &mut rng);
        let k = Tensor::<f32>::zeros(vec![4, 3, 3, 3, 3]);
        let b = Tensor::<f32>::zeros(vec![4]);
        let y = conv3d(&x, &k, Some(&b), Conv3dParams::same([3, 3, 3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 2, 3, 4, 5], &mut rng);
        for ks in [[1, 1, 1], [3, 3, 3], [3, 5, 5]] {
            let mut k = Tensor::<f32>::zeros(vec![2, 2, ks[0], ks[1], ks[2]]);
            for c in 0..2 {
                k.set(&[c, c, ks[0] / 2, ks[1] / 2, ks[2] / 2], 1.0);
            }
            let y = conv3d(&x, &k, None, Conv3dParams::same(ks)).unwrap();
            assert!(y.bitwise_eq(&x), "kernel {:?}", ks);
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_output() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 3, 3, 3]);
        let k = Tensor::<f32>::zeros(vec![1, 3, 3, 3, 3]);
        assert!(matches!(
            conv3d(&x, &k, None, Conv3dParams::valid()),
            Err(Error::Shape { .. })
        ));
        let k = Tensor::<f32>::zeros(vec![1, 2, 5, 3, 3]);
        assert!(conv3d(&x, &k, None, Conv3dParams::valid()).is_err());
        assert!(conv3d_reference(&x, &k, None, Conv3dParams::valid()).is_err());
    }

    #[test]
    fn tiled_path_is_bitwise_equal_to_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases: &[([usize; 5], [usize; 5], Conv3dParams)] = &[
            (
                [2, 3, 4, 9, 11],
                [5, 3, 3, 3, 3],
                Conv3dParams::same([3, 3, 3]),
            ),
            (
                [1, 3, 5, 20, 17],
                [8, 3, 3, 7, 7],
                Conv3dParams::new([1, 2, 2], [1, 3, 3]),
            ),
            (
                [2, 4, 3, 7, 7],
                [6, 4, 3, 3, 3],
                Conv3dParams::new([2, 2, 2], [1, 1, 1]),
            ),
            (
                [1, 2, 2, 3, 40],
                [3, 2, 1, 1, 1],
                Conv3dParams::new([2, 2, 2], [0, 0, 0]),
            ),
            (
                [1, 1, 1, 70, 5],
                [1, 1, 1, 2, 2],
                Conv3dParams::new([1, 3, 1], [0, 2, 1]),
            ),
            (
                [1, 2, 2, 4, 120],
                [13, 2, 1, 3, 3],
                Conv3dParams::new([1, 3, 3], [0, 1, 1]),
            ),
            ([2, 3, 2, 3, 70], [12, 3, 1, 1, 1], Conv3dParams::valid()),
            (
                [1, 2, 3, 9, 60],
                [4, 2, 3, 3, 3],
                Conv3dParams::new([1, 1, 2], [1, 1, 1]),
            ),
        ];
        for (xs, ks, p) in cases {
            let x = random(xs, &mut rng);
            let k = random(ks, &mut rng);
            let b = random(&[ks[0]], &mut rng);
            for bias in [None, Some(&b)] {
                let fast = conv3d(&x, &k, bias, *p).unwrap();
                let slow = conv3d_reference(&x, &k, bias, *p).unwrap();
                assert!(fast.bitwise_eq(&slow), "case {:?} {:?}", xs, ks);
            }
        }
    }

    #[test]
    fn transposed_backward_agrees_with_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases: &[([usize; 5], [usize; 5], Conv3dParams)] = &[
            (
                [2, 3, 4, 6, 7],
                [4, 3, 3, 3, 3],
                Conv3dParams::new([2, 2, 2], [1, 1, 1]),
            ),
            (
                [1, 2, 5, 9, 20],
                [3, 2, 3, 3, 3],
                Conv3dParams::new([1, 3, 2], [0, 1, 2]),
            ),
            (
                [2, 3, 3, 17, 17],
                [5, 3, 3, 7, 7],
                Conv3dParams::new([1, 2, 2], [1, 3, 3]),
            ),
            (
                [3, 4, 1, 7, 7],
                [9, 4, 1, 1, 1],
                Conv3dParams::new([2, 2, 2], [0, 0, 0]),
            ),
            (
                [1, 2, 2, 3, 3],
                [2, 2, 1, 1, 1],
                Conv3dParams::new([1, 1, 1], [0, 1, 1]),
            ),
        ];
        for (xs, ks, p) in cases {
            let x = random(xs, &mut rng).cast::<f64>();
            let k = random(ks, &mut rng).cast::<f64>();
            let y = conv3d(&x, &k, None, *p).unwrap();
            let g = Tensor::<f64>::from_fn(y.shape().to_vec(), |_| rng.random_range(-1.0..1.0));
            let fast = conv3d_backward(&x, &k, &g, *p, true, true, true).unwrap();
            let slow = conv3d_backward_direct(&x, &k, &g, *p, true, true, true).unwrap();
            for (a, b) in [
                (&fast.input, &slow.input),
                (&fast.kernel, &slow.kernel),
                (&fast.bias, &slow.bias),
            ] {
                let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
                assert_eq!(a.shape(), b.shape());
                assert!(a.max_abs_diff(b).unwrap() < 1e-10, "case {xs:?} {ks:?}");
            }
        }
    }

    #[test]
    fn backward_matches_reference_adjoint() {
        // <conv(x), g> is bilinear, so its gradients are checked against
        // direct sums over the reference loop.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = Conv3dParams::new([1, 2, 2], [1, 1, 1]);
        let x = random(&[2, 2, 3, 5, 6], &mut rng).cast::<f64>();
        let k = random(&[3, 2, 3, 3, 3], &mut rng).cast::<f64>();
        let y = conv3d_reference(&x, &k, None, p).unwrap();
        let g = Tensor::<f64>::from_fn(y.shape().to_vec(), |_| rng.random_range(-1.0..1.0));
        let grads = conv3d_backward(&x, &k, &g, p, true, true, true).unwrap();

        let inner = |x: &Tensor<f64>, k: &Tensor<f64>| -> f64 {
            let y = conv3d_reference(x, k, None, p).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let gi = grads.input.unwrap();
        for idx in [0, 7, 45, 100, 179] {
            let mut e = Tensor::<f64>::zeros(x.shape().to_vec());
            e.data_mut()[idx] = 1.0;
            assert!((inner(&e, &k) - gi.data()[idx]).abs() < 1e-12);
        }
        let gk = grads.kernel.unwrap();
        for idx in [0, 13, 54, 161] {
            let mut e = Tensor::<f64>::zeros(k.shape().to_vec());
            e.data_mut()[idx] = 1.0;
            assert!((inner(&x, &e) - gk.data()[idx]).abs() < 1e-12);
        }
        let gb = grads.bias.unwrap();
        let per_filter = y.shape()[2] * y.shape()[3] * y.shape()[4];
        for k in 0..3 {
            let expected: f64 = (0..2)
                .flat_map(|n| {
                    let start = (n * 3 + k) * per_filter;
                    g.data()[start..start + per_filter].to_vec()
                })
                .sum();
            assert!((expected - gb.data()[k]).abs() < 1e-12);
        }
    }
}

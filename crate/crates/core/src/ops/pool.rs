use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::conv::out_extent;

/// Max pooling window; padded cells never win.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool3d {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl MaxPool3d {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        MaxPool3d {
            kernel,
            stride,
            padding,
        }
    }
}

/// Returns the pooled tensor and, per output cell, the flat offset of the
/// winning element within its `(n, c)` plane. Ties go to the first cell in
/// window order.
pub fn max_pool3d<S: Scalar>(x: &Tensor<S>, p: MaxPool3d) -> Result<(Tensor<S>, Vec<u32>)> {
    x.expect_rank("max_pool3d", 5)?;
    let s = x.shape();
    let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out_dims = [0; 3];
    for axis in 0..3 {
        if p.padding[axis] >= p.kernel[axis] {
            return Err(Error::Invalid(
                "max_pool3d padding must be smaller than the window".into(),
            ));
        }
        out_dims[axis] = out_extent(s[2 + axis], p.kernel[axis], p.stride[axis], p.padding[axis])
            .ok_or_else(|| {
            Error::shape("max_pool3d", format!("window does not fit {:?}", s))
        })?;
    }
    let [ot, oh, ow] = out_dims;
    // Clipped input range of every output coordinate along each axis.
    let ranges = |axis: usize, count: usize, len: usize| -> Vec<(usize, usize)> {
        (0..count)
            .map(|o| {
                let start = (o * p.stride[axis]) as isize - p.padding[axis] as isize;
                let end = start + p.kernel[axis] as isize;
                (start.max(0) as usize, (end.max(0) as usize).min(len))
            })
            .collect()
    };
    let (rt, rh, rw) = (ranges(0, ot, t), ranges(1, oh, h), ranges(2, ow, w));
    // Separable: reduce along W, then H, then T, keeping the first winner at
    // each stage, which selects the first maximum in (t, h, w) window order.
    let plane = t * h * w;
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * ot * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    let mut sw: Vec<(S, u32)> = Vec::with_capacity(t * h * ow);
    let mut sh: Vec<(S, u32)> = Vec::with_capacity(t * oh * ow);
    // `get(i)` yields the candidate at window position `i`.
    fn pick<S: Scalar>(lo: usize, hi: usize, get: impl Fn(usize) -> (S, u32)) -> (S, u32) {
        let mut best = get(lo);
        for i in lo + 1..hi {
            let c = get(i);
            // Written as selects so it compiles branch-free.
            let wins = c.0 > best.0;
            best.0 = if wins { c.0 } else { best.0 };
            best.1 = if wins { c.1 } else { best.1 };
        }
        best
    }
    for nc in 0..n * c {
        let src = &data[nc * plane..(nc + 1) * plane];
        sw.clear();
        for row in 0..t * h {
            let r = &src[row * w..(row + 1) * w];
            let base = (row * w) as u32;
            for &(w0, w1) in &rw {
                sw.push(pick(w0, w1, |iw| (r[iw], base + iw as u32)));
            }
        }
        sh.clear();
        for it in 0..t {
            let slab = &sw[it * h * ow..(it + 1) * h * ow];
            for &(h0, h1) in &rh {
                for e in 0..ow {
                    sh.push(pick(h0, h1, |ih| slab[ih * ow + e]));
                }
            }
        }
        for &(t0, t1) in &rt {
            for be in 0..oh * ow {
                let (v, at) = pick(t0, t1, |it| sh[it * oh * ow + be]);
                out.push(v);
                arg.push(at);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ot, oh, ow], out)?, arg))
}

pub fn max_pool3d_backward<S: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::shape(
            "max_pool3d_backward",
            "argmax/gradient length mismatch",
        ));
    }
    let planes = input_shape[0] * input_shape[1];
    let plane: usize = input_shape[2..].iter().product();
    let per_out = grad_out.numel() / planes.max(1);
    let mut gi = vec![S::zero(); planes * plane];
    for (idx, (&g, &a)) in grad_out.data().iter().zip(argmax).enumerate() {
        let nc = idx / per_out;
        gi[nc * plane + a as usize] += g;
    }
    Tensor::new(input_shape.to_vec(), gi)
}

/// Mean over every axis after the channel axis: `N×C×T×H×W -> N×C`.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() < 3 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expected N×C×…, got {:?}", x.shape()),
        ));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    if inner == 0 {
        return Err(Error::shape("global_avg_pool", "empty pooling region"));
    }
    let count = S::from_usize(inner).unwrap();
    let out = x
        .data()
        .chunks(inner)
        .map(|plane| super::conv::lane_sum(plane) / count)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<S: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let inner: usize = input_shape[2..].iter().product();
    if grad_out.shape() != &input_shape[..2] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            "gradient shape mismatch",
        ));
    }
    let count = S::from_usize(inner).unwrap();
    let mut gi = Vec::with_capacity(grad_out.numel() * inner);
    for &g in grad_out.data() {
        let v = g / count;
        gi.extend(std::iter::repeat_n(v, inner));
    }
    Tensor::new(input_shape.to_vec(), gi)
}

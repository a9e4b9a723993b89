//! Per-channel batch normalization for `N×C×…` tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistic update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNormForward<S> {
    pub output: Tensor<S>,
    /// Normalized input before scale/shift.
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
    /// Batch mean (train) or running mean (eval), per channel.
    pub mean: Vec<S>,
    /// Population variance of the batch (train) or running variance (eval).
    pub var: Vec<S>,
}

struct Layout {
    n: usize,
    c: usize,
    inner: usize,
}

fn layout<S: Scalar>(x: &Tensor<S>, scale: &Tensor<S>, shift: &Tensor<S>) -> Result<Layout> {
    if x.rank() < 2 {
        return Err(Error::shape(
            "batchnorm3d",
            format!("input needs a channel axis, got {:?}", x.shape()),
        ));
    }
    let c = x.shape()[1];
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "batchnorm3d",
            format!(
                "scale {:?} / shift {:?} must both be [{}]",
                scale.shape(),
                shift.shape(),
                c
            ),
        ));
    }
    Ok(Layout {
        n: x.shape()[0],
        c,
        inner: x.shape()[2..].iter().product(),
    })
}

/// Normalizes with batch statistics (population variance).
pub fn batchnorm3d_train<S: Scalar>(
    x: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    eps: S,
) -> Result<BatchNormForward<S>> {
    let l = layout(x, scale, shift)?;
    let count = l.n * l.inner;
    if count < 2 {
        return Err(Error::Invalid(format!(
            "batchnorm3d in train mode needs at least 2 values per channel, got {}",
            count
        )));
    }
    let m = S::from_usize(count).unwrap();
    let data = x.data();
    let mut mean = vec![S::zero(); l.c];
    let mut var = vec![S::zero(); l.c];
    for ch in 0..l.c {
        let mut s = S::zero();
        for n in 0..l.n {
            let start = (n * l.c + ch) * l.inner;
            s += super::conv::lane_sum(&data[start..start + l.inner]);
        }
        let mu = s / m;
        let mut ss = S::zero();
        for n in 0..l.n {
            let start = (n * l.c + ch) * l.inner;
            for &v in &data[start..start + l.inner] {
                let d = v - mu;
                ss += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    Ok(normalize(x, scale, shift, &l, mean, var, eps))
}

/// Normalizes with the supplied running statistics.
pub fn batchnorm3d_eval<S: Scalar>(
    x: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    eps: S,
) -> Result<BatchNormForward<S>> {
    let l = layout(x, scale, shift)?;
    if running_mean.shape() != [l.c] || running_var.shape() != [l.c] {
        return Err(Error::shape(
            "batchnorm3d",
            format!("running statistics must be [{}]", l.c),
        ));
    }
    Ok(normalize(
        x,
        scale,
        shift,
        &l,
        running_mean.data().to_vec(),
        running_var.data().to_vec(),
        eps,
    ))
}

fn normalize<S: Scalar>(
    x: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    l: &Layout,
    mean: Vec<S>,
    var: Vec<S>,
    eps: S,
) -> BatchNormForward<S> {
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let data = x.data();
    let mut xhat = vec![S::zero(); data.len()];
    let mut out = vec![S::zero(); data.len()];
    for n in 0..l.n {
        for ch in 0..l.c {
            let start = (n * l.c + ch) * l.inner;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], scale.data()[ch], shift.data()[ch]);
            for i in start..start + l.inner {
                let h = (data[i] - mu) * is;
                xhat[i] = h;
                out[i] = h * g + b;
            }
        }
    }
    BatchNormForward {
        output: Tensor::new(x.shape().to_vec(), out).unwrap(),
        xhat: Tensor::new(x.shape().to_vec(), xhat).unwrap(),
        inv_std,
        mean,
        var,
    }
}

/// Returns `(d input, d scale, d shift)`. In train mode the batch statistics
/// depend on the input and contribute to its gradient; in eval mode they are
/// constants.
pub fn batchnorm_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    xhat: &Tensor<S>,
    inv_std: &[S],
    scale: &Tensor<S>,
    train: bool,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    grad_out.expect_same_shape("batchnorm_backward", xhat)?;
    let l = layout(xhat, scale, scale)?;
    let g = grad_out.data();
    let h = xhat.data();
    let mut gscale = vec![S::zero(); l.c];
    let mut gshift = vec![S::zero(); l.c];
    for ch in 0..l.c {
        for n in 0..l.n {
            let start = (n * l.c + ch) * l.inner;
            for i in start..start + l.inner {
                gshift[ch] += g[i];
                gscale[ch] += g[i] * h[i];
            }
        }
    }
    let m = S::from_usize(l.n * l.inner).unwrap();
    let mut gx = vec![S::zero(); g.len()];
    for n in 0..l.n {
        for ch in 0..l.c {
            let start = (n * l.c + ch) * l.inner;
            let k = scale.data()[ch] * inv_std[ch];
            for i in start..start + l.inner {
                gx[i] = if train {
                    k / m * (m * g[i] - gshift[ch] - h[i] * gscale[ch])
                } else {
                    k * g[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(xhat.shape().to_vec(), gx)?,
        Tensor::new(vec![l.c], gscale)?,
        Tensor::new(vec![l.c], gshift)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_values_normalize_to_plus_minus_one() {
        let x = Tensor::new(vec![2, 1, 1, 1, 1], vec![1.0f64, 3.0]).unwrap();
        let y =
            batchnorm3d_train(&x, &Tensor::ones(vec![1]), &Tensor::zeros(vec![1]), 1e-12).unwrap();
        assert!((y.output.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.output.data()[1] - 1.0).abs() < 1e-9);
        assert_eq!(y.mean, vec![2.0]);
        assert_eq!(y.var, vec![1.0]);
    }

    #[test]
    fn constant_input_maps_to_zero() {
        let x = Tensor::full(vec![2, 3, 2, 2, 2], 4.5f32);
        let y =
            batchnorm3d_train(&x, &Tensor::ones(vec![3]), &Tensor::zeros(vec![3]), 1e-5).unwrap();
        assert!(y.output.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn zero_scale_leaves_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(vec![2, 2, 2, 3, 3], |_| rng.random_range(-2.0f32..2.0));
        let y = batchnorm3d_train(
            &x,
            &Tensor::zeros(vec![2]),
            &Tensor::full(vec![2], 5.0),
            1e-5,
        )
        .unwrap();
        assert!(y.output.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn single_value_per_channel_is_an_error() {
        let x = Tensor::<f32>::ones(vec![1, 2, 1, 1, 1]);
        let r = batchnorm3d_train(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![2]), 1e-5);
        assert!(matches!(r, Err(Error::Invalid(_))));
    }

    #[test]
    fn train_output_is_standardized_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(vec![3, 4, 2, 3, 5], |_| rng.random_range(-10.0f64..30.0));
        let y =
            batchnorm3d_train(&x, &Tensor::ones(vec![4]), &Tensor::zeros(vec![4]), 1e-5).unwrap();
        let inner = 2 * 3 * 5;
        for ch in 0..4 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| {
                    let s = (n * 4 + ch) * inner;
                    y.xhat.data()[s..s + inner].to_vec()
                })
                .collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mu.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

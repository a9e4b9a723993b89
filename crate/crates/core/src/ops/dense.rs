use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `input · weights + bias` for `input: N×d`, `weights: d×n`, `bias: n`.
pub fn linear<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let (rows, inner, cols) = linear_dims(input, weights, bias)?;
    let x = input.data();
    let w = weights.data();
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let dst = &mut out[r * cols..(r + 1) * cols];
        for i in 0..inner {
            let xv = x[r * inner + i];
            for (o, &wv) in dst.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                *o += xv * wv;
            }
        }
        if let Some(b) = bias {
            for (o, &bv) in dst.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::new(vec![rows, cols], out)
}

fn linear_dims<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<(usize, usize, usize)> {
    input.expect_rank("linear", 2)?;
    weights.expect_rank("linear", 2)?;
    let (rows, inner) = (input.shape()[0], input.shape()[1]);
    let cols = weights.shape()[1];
    if weights.shape()[0] != inner {
        return Err(Error::shape(
            "linear",
            format!(
                "input {:?} and weights {:?} disagree on the inner dimension",
                input.shape(),
                weights.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cols] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} does not match {} outputs", b.shape(), cols),
            ));
        }
    }
    Ok((rows, inner, cols))
}

/// Returns `(d input, d weights, d bias)`.
pub fn linear_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (rows, inner, cols) = linear_dims(input, weights, None)?;
    if grad_out.shape() != [rows, cols] {
        return Err(Error::shape(
            "linear_backward",
            format!(
                "gradient {:?} vs output {:?}",
                grad_out.shape(),
                [rows, cols]
            ),
        ));
    }
    let x = input.data();
    let w = weights.data();
    let g = grad_out.data();
    let mut gx = vec![S::zero(); rows * inner];
    let mut gw = vec![S::zero(); inner * cols];
    let mut gb = vec![S::zero(); cols];
    for r in 0..rows {
        let g_row = &g[r * cols..(r + 1) * cols];
        for i in 0..inner {
            let w_row = &w[i * cols..(i + 1) * cols];
            gx[r * inner + i] = g_row
                .iter()
                .zip(w_row)
                .fold(S::zero(), |acc, (&a, &b)| acc + a * b);
            let xv = x[r * inner + i];
            for (o, &gv) in gw[i * cols..(i + 1) * cols].iter_mut().zip(g_row) {
                *o += xv * gv;
            }
        }
        for (o, &gv) in gb.iter_mut().zip(g_row) {
            *o += gv;
        }
    }
    Ok((
        Tensor::new(vec![rows, inner], gx)?,
        Tensor::new(vec![inner, cols], gw)?,
        Tensor::new(vec![cols], gb)?,
    ))
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// The subgradient at exactly zero is zero.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    input.zip_map(grad_out, |x, g| if x > S::zero() { g } else { S::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let x = Tensor::new(vec![2, 3], vec![1.0f64, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(vec![3]);
        assert_eq!(linear(&x, &eye, Some(&b)).unwrap(), x);
    }

    #[test]
    fn scalar_affine() {
        let x = Tensor::new(vec![1, 1], vec![3.0f32]).unwrap();
        let w = Tensor::new(vec![1, 1], vec![2.0f32]).unwrap();
        let b = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[7.0]);
    }

    #[test]
    fn zero_weights_give_bias_rows() {
        let x = Tensor::from_fn(vec![4, 5], |i| i as f32);
        let w = Tensor::zeros(vec![5, 2]);
        let b = Tensor::new(vec![2], vec![0.25f32, -1.5]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.25, -1.5]);
        }
    }

    #[test]
    fn linear_rejects_inner_mismatch() {
        let x = Tensor::<f32>::zeros(vec![2, 3]);
        let w = Tensor::<f32>::zeros(vec![4, 2]);
        assert!(linear(&x, &w, None).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::new(vec![3], vec![0.0f32, 1.0, 5.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let neg = Tensor::new(vec![2], vec![-3.0f32, -0.1]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let g = relu_backward(&neg, &Tensor::ones(vec![2])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g0 = relu_backward(&x, &Tensor::ones(vec![3])).unwrap();
        assert_eq!(g0.data(), &[0.0, 0.0, 1.0]);
    }
}

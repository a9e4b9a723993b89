//! Softmax cross-entropy, center loss, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default weight of the center term.
pub const DEFAULT_LAMBDA: f64 = 0.001;
/// Default center update rate.
pub const DEFAULT_CENTER_ALPHA: f64 = 0.5;

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(
            "labels",
            format!("{} labels for {} rows", labels.len(), rows),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Label {
            label: bad,
            classes,
        });
    }
    Ok(())
}

/// Returns the batch-mean loss and the softmax probabilities.
pub(crate) fn softmax_cross_entropy_forward<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<(S, Tensor<S>)> {
    logits.expect_rank("softmax_cross_entropy", 2)?;
    let (rows, classes) = (logits.shape()[0], logits.shape()[1]);
    if rows == 0 || classes == 0 {
        return Err(Error::shape("softmax_cross_entropy", "empty logits"));
    }
    check_labels(labels, rows, classes)?;
    let mut probs = Vec::with_capacity(rows * classes);
    let mut total = S::zero();
    for (row, &y) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let sum_exp = row.iter().fold(S::zero(), |s, &v| s + (v - max).exp());
        let log_z = max + sum_exp.ln();
        total += log_z - row[y];
        probs.extend(row.iter().map(|&v| (v - log_z).exp()));
    }
    let loss = total / S::from_usize(rows).unwrap();
    Ok((loss, Tensor::new(vec![rows, classes], probs)?))
}

/// `upstream · (softmax − one_hot) / m`.
pub(crate) fn softmax_cross_entropy_backward<S: Scalar>(
    probs: &Tensor<S>,
    labels: &[usize],
    upstream: S,
) -> Tensor<S> {
    let (rows, classes) = (probs.shape()[0], probs.shape()[1]);
    let k = upstream / S::from_usize(rows).unwrap();
    let mut g = probs.data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        g[i * classes + y] -= S::one();
    }
    for v in &mut g {
        *v *= k;
    }
    Tensor::new(vec![rows, classes], g).unwrap()
}

/// Returns `½ Σ ‖x_i − c_{y_i}‖²` and the differences `x_i − c_{y_i}`.
pub(crate) fn center_loss_forward<S: Scalar>(
    embeddings: &Tensor<S>,
    labels: &[usize],
    centers: &Tensor<S>,
) -> Result<(S, Tensor<S>)> {
    embeddings.expect_rank("center_loss", 2)?;
    centers.expect_rank("center_loss", 2)?;
    let (rows, dim) = (embeddings.shape()[0], embeddings.shape()[1]);
    if centers.shape()[1] != dim {
        return Err(Error::shape(
            "center_loss",
            format!(
                "embedding width {} but centers are {:?}",
                dim,
                centers.shape()
            ),
        ));
    }
    check_labels(labels, rows, centers.shape()[0])?;
    let mut diff = Vec::with_capacity(rows * dim);
    let mut total = S::zero();
    for (x, &y) in embeddings.data().chunks(dim).zip(labels) {
        let c = &centers.data()[y * dim..(y + 1) * dim];
        for (&xv, &cv) in x.iter().zip(c) {
            let d = xv - cv;
            total += d * d;
            diff.push(d);
        }
    }
    Ok((total * S::lit(0.5), Tensor::new(vec![rows, dim], diff)?))
}

/// Batch-mean softmax cross-entropy, evaluated without recording gradients.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    softmax_cross_entropy_forward(logits, labels).map(|(l, _)| l)
}

/// Batch-summed center loss, evaluated without recording gradients.
pub fn center_loss<S: Scalar>(
    embeddings: &Tensor<S>,
    labels: &[usize],
    centers: &ClassCenters<S>,
) -> Result<S> {
    center_loss_forward(embeddings, labels, centers.centers()).map(|(l, _)| l)
}

/// One feature centroid per class, moved toward the class's embeddings by a
/// delta rule after every mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters<S = f32> {
    centers: Tensor<S>,
    alpha: S,
}

impl<S: Scalar> ClassCenters<S> {
    /// Zero-initialized centers.
    pub fn new(classes: usize, dim: usize, alpha: S) -> Result<Self> {
        Self::from_tensor(Tensor::zeros(vec![classes, dim]), alpha)
    }

    pub fn from_tensor(centers: Tensor<S>, alpha: S) -> Result<Self> {
        centers.expect_rank("class_centers", 2)?;
        if !(alpha > S::zero() && alpha <= S::one()) {
            return Err(Error::Invalid(format!(
                "center update rate must lie in (0, 1], got {}",
                alpha
            )));
        }
        if !centers.all_finite() {
            return Err(Error::Invalid("class centers must be finite".into()));
        }
        Ok(ClassCenters { centers, alpha })
    }

    pub fn centers(&self) -> &Tensor<S> {
        &self.centers
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    pub fn classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn center(&self, class: usize) -> &[S] {
        let d = self.dim();
        &self.centers.data()[class * d..(class + 1) * d]
    }

    /// For every class `j` in the batch:
    /// `c_j ← c_j − α · Σ_{y_i=j}(c_j − x_i) / (1 + n_j)`.
    /// Classes absent from the batch keep their exact bits.
    pub fn update(&mut self, embeddings: &Tensor<S>, labels: &[usize]) -> Result<()> {
        embeddings.expect_rank("update_centers", 2)?;
        let dim = self.dim();
        if embeddings.shape()[1] != dim {
            return Err(Error::shape(
                "update_centers",
                format!(
                    "embedding width {} vs center width {}",
                    embeddings.shape()[1],
                    dim
                ),
            ));
        }
        check_labels(labels, embeddings.shape()[0], self.classes())?;
        let classes = self.classes();
        let mut delta = vec![S::zero(); classes * dim];
        let mut counts = vec![0usize; classes];
        for (x, &y) in embeddings.data().chunks(dim).zip(labels) {
            counts[y] += 1;
            let c = &self.centers.data()[y * dim..(y + 1) * dim];
            for ((dv, &cv), &xv) in delta[y * dim..(y + 1) * dim].iter_mut().zip(c).zip(x) {
                *dv += cv - xv;
            }
        }
        let alpha = self.alpha;
        let data = self.centers.data_mut();
        for (j, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let denom = S::from_usize(1 + count).unwrap();
            for i in j * dim..(j + 1) * dim {
                data[i] -= alpha * (delta[i] / denom);
            }
        }
        Ok(())
    }
}

/// The three loss values of one step. `total` is always
/// `softmax_loss + lambda * center_loss`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub softmax_loss: f64,
    pub center_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn total_loss(softmax_loss: f64, center_loss: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!(
            "center-loss weight must be nonnegative, got {}",
            lambda
        )));
    }
    Ok(LossBreakdown {
        softmax_loss,
        center_loss,
        total: softmax_loss + lambda * center_loss,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_fixtures() {
        let l = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = softmax_cross_entropy(&t(&[1, 2], &[20.0, -20.0]), &[0]).unwrap();
        assert!((0.0..1e-8).contains(&l));
        let huge = softmax_cross_entropy(&t(&[1, 2], &[1000.0, -1000.0]), &[1]).unwrap();
        assert!((huge - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let a =
            softmax_cross_entropy(&t(&[2, 3], &[0.1, 2.0, -1.0, 0.5, 0.5, 3.0]), &[1, 2]).unwrap();
        let b = softmax_cross_entropy(&t(&[2, 3], &[7.1, 9.0, 6.0, -99.5, -99.5, -97.0]), &[1, 2])
            .unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let r = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2]);
        assert!(matches!(
            r,
            Err(Error::Label {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn center_loss_fixtures() {
        let zero = ClassCenters::new(2, 2, 0.5).unwrap();
        assert_eq!(
            center_loss(&t(&[1, 2], &[1.0, 0.0]), &[0], &zero).unwrap(),
            0.5
        );
        assert_eq!(
            center_loss(&t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]), &[0, 1], &zero).unwrap(),
            2.5
        );
        let at_center = ClassCenters::from_tensor(t(&[2, 2], &[0.3, -0.7, 1.0, 1.0]), 0.5).unwrap();
        assert_eq!(
            center_loss(&t(&[1, 2], &[0.3, -0.7]), &[0], &at_center).unwrap(),
            0.0
        );
        assert!(center_loss(&t(&[1, 3], &[0.0; 3]), &[0], &zero).is_err());
        assert!(center_loss(&t(&[1, 2], &[0.0; 2]), &[5], &zero).is_err());
    }

    #[test]
    fn delta_rule_single_sample() {
        let mut c = ClassCenters::new(2, 2, 0.5).unwrap();
        let before = c.center(1).to_vec();
        c.update(&t(&[1, 2], &[1.0, 0.0]), &[0]).unwrap();
        assert_eq!(c.center(0), &[0.25, 0.0]);
        assert_eq!(c.center(1), before.as_slice());
    }

    #[test]
    fn full_rate_converges_monotonically() {
        let mut c = ClassCenters::new(1, 3, 1.0).unwrap();
        let x = t(&[1, 3], &[2.0, -1.0, 0.5]);
        let dist = |c: &ClassCenters<f64>| {
            c.center(0)
                .iter()
                .zip(x.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        let mut last = dist(&c);
        for _ in 0..20 {
            c.update(&x, &[0]).unwrap();
            let d = dist(&c);
            assert!(d < last);
            last = d;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn rate_must_be_in_unit_interval() {
        assert!(ClassCenters::<f32>::new(2, 2, 0.0).is_err());
        assert!(ClassCenters::<f32>::new(2, 2, 1.5).is_err());
    }

    #[test]
    fn total_loss_combination() {
        let b = total_loss(1.0, 100.0, 0.001).unwrap();
        assert!((b.total - 1.1).abs() < 1e-12);
        assert_eq!(total_loss(0.7, 55.0, 0.0).unwrap().total, 0.7);
        assert_eq!(total_loss(0.7, 0.0, 3.0).unwrap().total, 0.7);
        assert!(total_loss(0.7, 1.0, -0.1).is_err());
    }
}

//! Tape-based reverse-mode differentiation.
//!
//! Operations are recorded in execution order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep. Nodes
//! that no parameter reaches carry no backward context and are skipped.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::losses;
use crate::ops::{self, Conv3dParams, MaxPool3d};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node gets its statistics.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, S> {
    Train {
        eps: S,
    },
    Eval {
        running_mean: &'a Tensor<S>,
        running_var: &'a Tensor<S>,
        eps: S,
    },
}

/// Output of a recorded batch-norm: the normalized value plus the
/// statistics used, which the trainer folds into running averages.
#[derive(Debug, Clone)]
pub struct BnOutput<S> {
    pub out: Var,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf {
        name: Option<String>,
    },
    /// Value with no path back to a gradient-requiring leaf.
    Detached,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        params: Conv3dParams,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Tensor<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: S,
    },
    Sum {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<S>,
    },
    CenterLoss {
        embeddings: Var,
        diff: Tensor<S>,
    },
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Per-parameter gradients from one backward pass, keyed by leaf name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientRecord<S = f32> {
    grads: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> GradientRecord<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<S>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.grads.get_mut(name)
    }

    /// `a·self + b·other` over the union of names; a name missing on one
    /// side counts as zero there.
    pub fn combine(&self, a: S, other: &Self, b: S) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (name, g) in &self.grads {
            let v = match other.grads.get(name) {
                Some(h) => g.zip_map(h, |x, y| a * x + b * y)?,
                None => g.scale(a),
            };
            out.insert(name.clone(), v);
        }
        for (name, h) in &other.grads {
            if !self.grads.contains_key(name) {
                out.insert(name.clone(), h.scale(b));
            }
        }
        Ok(GradientRecord { grads: out })
    }
}

/// Records operations for one forward pass.
pub struct Tape<S: Scalar = f32> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad || matches!(op, Op::Leaf { .. }) {
            op
        } else {
            Op::Detached
        };
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    /// A named leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&self, name: impl Into<String>, value: Tensor<S>) -> Var {
        self.push(
            value,
            true,
            Op::Leaf {
                name: Some(name.into()),
            },
        )
    }

    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf { name: None })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<S>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn any_grad(&self, vars: &[Option<Var>]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().flatten().any(|v| nodes[v.0].requires_grad)
    }

    pub fn conv3d(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        params: Conv3dParams,
    ) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        let b = bias.map(|b| self.value(b));
        let y = ops::conv3d(&x, &k, b.as_deref(), params)?;
        let rg = self.any_grad(&[Some(input), Some(kernel), bias]);
        Ok(self.push(
            y,
            rg,
            Op::Conv3d {
                input,
                kernel,
                bias,
                params,
            },
        ))
    }

    pub fn batchnorm3d(
        &self,
        input: Var,
        scale: Var,
        shift: Var,
        mode: BnMode<'_, S>,
    ) -> Result<BnOutput<S>> {
        let (x, g, b) = (self.value(input), self.value(scale), self.value(shift));
        let (fwd, train) = match mode {
            BnMode::Train { eps } => (ops::batchnorm3d_train(&x, &g, &b, eps)?, true),
            BnMode::Eval {
                running_mean,
                running_var,
                eps,
            } => (
                ops::batchnorm3d_eval(&x, &g, &b, running_mean, running_var, eps)?,
                false,
            ),
        };
        let rg = self.any_grad(&[Some(input), Some(scale), Some(shift)]);
        let out = self.push(
            fwd.output,
            rg,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                train,
            },
        );
        Ok(BnOutput {
            out,
            mean: fwd.mean,
            var: fwd.var,
        })
    }

    pub fn relu(&self, input: Var) -> Var {
        let y = ops::relu(&self.value(input));
        let rg = self.requires_grad(input);
        self.push(y, rg, Op::Relu { input })
    }

    pub fn max_pool3d(&self, input: Var, pool: MaxPool3d) -> Result<Var> {
        let (y, argmax) = ops::max_pool3d(&self.value(input), pool)?;
        let rg = self.requires_grad(input);
        Ok(self.push(y, rg, Op::MaxPool { input, argmax }))
    }

    pub fn global_avg_pool(&self, input: Var) -> Result<Var> {
        let y = ops::global_avg_pool(&self.value(input))?;
        let rg = self.requires_grad(input);
        Ok(self.push(y, rg, Op::GlobalAvgPool { input }))
    }

    pub fn linear(&self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let b = bias.map(|b| self.value(b));
        let y = ops::linear(&self.value(input), &self.value(weight), b.as_deref())?;
        let rg = self.any_grad(&[Some(input), Some(weight), bias]);
        Ok(self.push(
            y,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(&self.value(b))?;
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(y, rg, Op::Add { a, b }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(&self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(y, rg, Op::Mul { a, b }))
    }

    pub fn scale(&self, input: Var, factor: S) -> Var {
        let y = self.value(input).scale(factor);
        let rg = self.requires_grad(input);
        self.push(y, rg, Op::Scale { input, factor })
    }

    pub fn sum(&self, input: Var) -> Var {
        let y = Tensor::scalar(self.value(input).sum());
        let rg = self.requires_grad(input);
        self.push(y, rg, Op::Sum { input })
    }

    /// Batch-mean negative log-likelihood of `labels` under softmax(logits).
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = losses::softmax_cross_entropy_forward(&self.value(logits), labels)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `½ Σ ‖x_i − c_{y_i}‖²`; the centers are constants here.
    pub fn center_loss(
        &self,
        embeddings: Var,
        labels: &[usize],
        centers: &Tensor<S>,
    ) -> Result<Var> {
        let (loss, diff) = losses::center_loss_forward(&self.value(embeddings), labels, centers)?;
        let rg = self.requires_grad(embeddings);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CenterLoss { embeddings, diff },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every named leaf it
    /// reaches.
    pub fn backward(&self, loss: Var) -> Result<GradientRecord<S>> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autograd(format!("unknown variable {}", loss.0)))?;
        if root.value.numel() != 1 {
            return Err(Error::Autograd(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Autograd(
                "loss is detached: no parameter requiring gradients reaches it".into(),
            ));
        }

        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));
        let mut record = GradientRecord::default();

        let accumulate = |grads: &mut Vec<Option<Tensor<S>>>, v: Var, g: Tensor<S>| -> Result<()> {
            if !nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        let rg = |v: Var| nodes[v.0].requires_grad;

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf { name } => {
                    if let Some(name) = name {
                        match record.get_mut(name) {
                            Some(existing) => existing.add_assign(&g)?,
                            None => record.insert(name.clone(), g),
                        }
                    }
                }
                Op::Detached => {}
                Op::Conv3d {
                    input,
                    kernel,
                    bias,
                    params,
                } => {
                    let x = &nodes[input.0].value;
                    let k = &nodes[kernel.0].value;
                    let grads_c = ops::conv3d_backward(
                        x,
                        k,
                        &g,
                        *params,
                        rg(*input),
                        rg(*kernel),
                        bias.is_some_and(rg),
                    )?;
                    if let Some(gi) = grads_c.input {
                        accumulate(&mut grads, *input, gi)?;
                    }
                    if let Some(gk) = grads_c.kernel {
                        accumulate(&mut grads, *kernel, gk)?;
                    }
                    if let (Some(b), Some(gb)) = (bias, grads_c.bias) {
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::BatchNorm {
                    input,
                    scale,
                    shift,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let gamma = &nodes[scale.0].value;
                    let (gx, gs, gb) = ops::batchnorm_backward(&g, xhat, inv_std, gamma, *train)?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate(&mut grads, *scale, gs)?;
                    accumulate(&mut grads, *shift, gb)?;
                }
                Op::Relu { input } => {
                    let gx = ops::relu_backward(&nodes[input.0].value, &g)?;
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::MaxPool { input, argmax } => {
                    let gx = ops::max_pool3d_backward(nodes[input.0].value.shape(), argmax, &g)?;
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::GlobalAvgPool { input } => {
                    let gx = ops::global_avg_pool_backward(nodes[input.0].value.shape(), &g)?;
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (gx, gw, gb) =
                        ops::linear_backward(&nodes[input.0].value, &nodes[weight.0].value, &g)?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate(&mut grads, *weight, gw)?;
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Mul { a, b } => {
                    let ga = g.zip_map(&nodes[b.0].value, |x, y| x * y)?;
                    let gb = g.zip_map(&nodes[a.0].value, |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut grads, *input, g.scale(*factor))?;
                }
                Op::Sum { input } => {
                    let gv = g.item()?;
                    let shape = nodes[input.0].value.shape().to_vec();
                    accumulate(&mut grads, *input, Tensor::full(shape, gv))?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let gx = losses::softmax_cross_entropy_backward(probs, labels, g.item()?);
                    accumulate(&mut grads, *logits, gx)?;
                }
                Op::CenterLoss { embeddings, diff } => {
                    accumulate(&mut grads, *embeddings, diff.scale(g.item()?))?;
                }
            }
        }
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::scalar(3.0));
        let zero = tape.scale(x, 0.0);
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.add(zero, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let tape = Tape::<f32>::new();
        let x = tape.param("x", Tensor::ones(vec![3]));
        assert!(matches!(tape.backward(x), Err(Error::Autograd(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        let y = tape.scale(c, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Autograd(_))));
    }

    #[test]
    fn shared_inputs_accumulate() {
        let tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let a = tape.scale(x, 3.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn gradient_shapes_match_parameters() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(vec![2, 3]));
        let w = tape.param("w", Tensor::ones(vec![3, 4]));
        let b = tape.param("b", Tensor::zeros(vec![4]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("w").unwrap().shape(), &[3, 4]);
        assert_eq!(g.get("b").unwrap().shape(), &[4]);
        assert_eq!(g.len(), 2);
    }
}

//! Finite-difference verification of the reverse-mode engine.
//!
//! Every check draws random `f64` inputs (at most 1000 elements per tensor),
//! reduces the op output to a scalar through a fixed random projection, and
//! compares each analytic partial derivative with a central difference.
//! Instances whose inputs sit within [`KINK_MARGIN`] of a relu kink or a
//! max-pool tie are redrawn, since the derivative is undefined there.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{Conv3dParams, MaxPool3d};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;
pub const KINK_MARGIN: f64 = 1e-3;
/// Denominator floor, relative to the largest analytic partial of the same
/// tensor. Keeps near-zero partials from turning O(h²) truncation noise into
/// a huge ratio.
pub const SCALE_FLOOR: f64 = 1e-3;
const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckOp {
    Conv3d,
    BatchNorm3d,
    Linear,
    Relu,
    ReluComposite,
    MaxPool3d,
    GlobalAvgPool,
    BasicBlock,
    SoftmaxCrossEntropy,
    CenterLoss,
}

impl CheckOp {
    pub const ALL: [CheckOp; 10] = [
        CheckOp::Conv3d,
        CheckOp::BatchNorm3d,
        CheckOp::Linear,
        CheckOp::Relu,
        CheckOp::ReluComposite,
        CheckOp::MaxPool3d,
        CheckOp::GlobalAvgPool,
        CheckOp::BasicBlock,
        CheckOp::SoftmaxCrossEntropy,
        CheckOp::CenterLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckOp::Conv3d => "conv3d",
            CheckOp::BatchNorm3d => "batchnorm3d",
            CheckOp::Linear => "linear",
            CheckOp::Relu => "relu",
            CheckOp::ReluComposite => "conv3d_relu_linear",
            CheckOp::MaxPool3d => "max_pool3d",
            CheckOp::GlobalAvgPool => "global_avg_pool",
            CheckOp::BasicBlock => "basic_block",
            CheckOp::SoftmaxCrossEntropy => "softmax_cross_entropy",
            CheckOp::CenterLoss => "center_loss",
        }
    }

    /// Ops selected by a command-line selector: `all` or a single op name.
    pub fn select(selector: &str) -> Result<Vec<CheckOp>> {
        if selector == "all" {
            return Ok(CheckOp::ALL.to_vec());
        }
        Ok(vec![selector.parse()?])
    }
}

impl fmt::Display for CheckOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = CheckOp::ALL.iter().map(|o| o.name()).collect();
                Error::Config(format!(
                    "unknown gradcheck op {s:?}; expected all or one of {}",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub ops: Vec<CheckOp>,
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: scales the analytic gradient of this op by 1.01 so the
    /// harness must report it.
    pub corrupt: Option<CheckOp>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            ops: CheckOp::ALL.to_vec(),
            instances: DEFAULT_INSTANCES,
            seed: 0,
            step: FD_STEP,
            tolerance: REL_TOLERANCE,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: CheckOp,
    pub instances: usize,
    /// Instances redrawn because an input sat too close to a kink.
    pub redrawn: usize,
    pub partials: usize,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub worst_input: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|r| r.max_rel_error < self.tolerance)
    }

    /// The op with the largest relative error.
    pub fn worst(&self) -> Option<&OpReport> {
        self.ops
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &OpReport> {
        self.ops
            .iter()
            .filter(|r| r.max_rel_error >= self.tolerance)
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Tracks how close the current forward pass came to a non-differentiable
/// point.
#[derive(Debug, Clone, Copy)]
pub struct Margin(f64);

impl Margin {
    fn new() -> Self {
        Margin(f64::INFINITY)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Distance of relu pre-activations from zero.
    pub fn relu(&mut self, pre: &Tensor<f64>) {
        for &v in pre.data() {
            self.0 = self.0.min(v.abs());
        }
    }

    /// Gap between the two largest candidates of every pooling window.
    pub fn pool(&mut self, x: &Tensor<f64>, p: MaxPool3d) {
        let s = x.shape();
        let dims = [s[2], s[3], s[4]];
        let outs: Vec<usize> = (0..3)
            .map(|a| (dims[a] + 2 * p.padding[a] - p.kernel[a]) / p.stride[a] + 1)
            .collect();
        let axis_range = |a: usize, o: usize| {
            let start = (o * p.stride[a]) as isize - p.padding[a] as isize;
            let end = (start + p.kernel[a] as isize).min(dims[a] as isize);
            start.max(0) as usize..end.max(0) as usize
        };
        for plane in x.data().chunks(dims.iter().product()) {
            for ot in 0..outs[0] {
                for oh in 0..outs[1] {
                    for ow in 0..outs[2] {
                        let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                        for t in axis_range(0, ot) {
                            for h in axis_range(1, oh) {
                                for w in axis_range(2, ow) {
                                    let v = plane[(t * dims[1] + h) * dims[2] + w];
                                    if v > top {
                                        second = top;
                                        top = v;
                                    } else if v > second {
                                        second = v;
                                    }
                                }
                            }
                        }
                        if second.is_finite() {
                            self.0 = self.0.min(top - second);
                        }
                    }
                }
            }
        }
    }
}

type Graph = Box<dyn Fn(&Tape<f64>, &[Var], &mut Margin) -> Result<Var>>;

/// A scalar function of named input tensors.
pub struct Instance {
    pub inputs: Vec<(String, Tensor<f64>)>,
    graph: Graph,
}

impl Instance {
    pub fn new(
        inputs: Vec<(String, Tensor<f64>)>,
        graph: impl Fn(&Tape<f64>, &[Var], &mut Margin) -> Result<Var> + 'static,
    ) -> Self {
        Instance {
            inputs,
            graph: Box::new(graph),
        }
    }

    /// Loss value and kink margin with every input held constant.
    pub fn eval(&self, inputs: &[Tensor<f64>]) -> Result<(f64, Margin)> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let mut margin = Margin::new();
        let loss = (self.graph)(&tape, &vars, &mut margin)?;
        Ok((tape.value(loss).item()?, margin))
    }

    /// Reverse-mode gradient of every input.
    pub fn analytic(&self) -> Result<Vec<Tensor<f64>>> {
        let tape = Tape::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .map(|(name, t)| tape.param(name.clone(), t.clone()))
            .collect();
        let loss = (self.graph)(&tape, &vars, &mut Margin::new())?;
        let record = tape.backward(loss)?;
        self.inputs
            .iter()
            .map(|(name, t)| {
                Ok(record
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            })
            .collect()
    }

    /// Central differences of every input element.
    pub fn numeric(&self, step: f64) -> Result<Vec<Tensor<f64>>> {
        let mut values: Vec<Tensor<f64>> = self.inputs.iter().map(|(_, t)| t.clone()).collect();
        let mut grads = Vec::with_capacity(values.len());
        for i in 0..values.len() {
            let mut g = Tensor::zeros(values[i].shape().to_vec());
            for j in 0..values[i].numel() {
                let orig = values[i].data()[j];
                values[i].data_mut()[j] = orig + step;
                let (plus, _) = self.eval(&values)?;
                values[i].data_mut()[j] = orig - step;
                let (minus, _) = self.eval(&values)?;
                values[i].data_mut()[j] = orig;
                g.data_mut()[j] = (plus - minus) / (2.0 * step);
            }
            grads.push(g);
        }
        Ok(grads)
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// `Σ r ⊙ y` for a fixed random `r`, turning any output into a scalar.
fn project(tape: &Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, options: &[T]) -> T {
    options[rng.random_range(0..options.len())]
}

fn conv_geometry(rng: &mut ChaCha8Rng) -> ([usize; 5], [usize; 5], Conv3dParams) {
    loop {
        let (n, c, k) = (
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        );
        let dims = [
            rng.random_range(2..=4),
            rng.random_range(3..=6),
            rng.random_range(3..=6),
        ];
        let kern = [
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        ];
        let stride = [
            pick(rng, &[1, 1, 2]),
            pick(rng, &[1, 2]),
            pick(rng, &[1, 2]),
        ];
        let pad = [0, 1, 2].map(|a| {
            if kern[a] > 1 {
                rng.random_range(0..=1)
            } else {
                0
            }
        });
        let fits = (0..3).all(|a| dims[a] + 2 * pad[a] >= kern[a]);
        let x = [n, c, dims[0], dims[1], dims[2]];
        let w = [k, c, kern[0], kern[1], kern[2]];
        if fits && x.iter().product::<usize>() <= 1000 {
            return (x, w, Conv3dParams::new(stride, pad));
        }
    }
}

/// Draws one random instance of `op`.
pub fn sample_instance(op: CheckOp, rng: &mut ChaCha8Rng) -> Instance {
    let named = |pairs: Vec<(&str, Tensor<f64>)>| -> Vec<(String, Tensor<f64>)> {
        pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    };
    match op {
        CheckOp::Conv3d => {
            let (xs, ws, params) = conv_geometry(rng);
            let x = normal(rng, xs.to_vec(), 1.0);
            let w = normal(rng, ws.to_vec(), 0.5);
            let b = normal(rng, vec![ws[0]], 0.5);
            let y = crate::ops::conv3d(&x, &w, Some(&b), params).expect("valid geometry");
            let r = normal(rng, y.shape().to_vec(), 1.0);
            Instance::new(
                named(vec![("x", x), ("kernel", w), ("bias", b)]),
                move |tape, v, _| {
                    let y = tape.conv3d(v[0], v[1], Some(v[2]), params)?;
                    project(tape, y, &r)
                },
            )
        }
        CheckOp::BatchNorm3d => {
            let shape = vec![
                rng.random_range(2..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(2..=4),
                rng.random_range(2..=4),
            ];
            let c = shape[1];
            let x = normal(rng, shape.clone(), 2.0).map(|v| v + 0.5);
            let gamma = normal(rng, vec![c], 1.0);
            let beta = normal(rng, vec![c], 1.0);
            let r = normal(rng, shape, 1.0);
            let eval = rng.random_bool(0.25);
            let running_mean = normal(rng, vec![c], 0.5);
            let running_var = Tensor::from_fn(vec![c], |_| rng.random_range(0.5..2.0));
            Instance::new(
                named(vec![("x", x), ("scale", gamma), ("shift", beta)]),
                move |tape, v, _| {
                    let mode = if eval {
                        BnMode::Eval {
                            running_mean: &running_mean,
                            running_var: &running_var,
                            eps: 1e-5,
                        }
                    } else {
                        BnMode::Train { eps: 1e-5 }
                    };
                    let y = tape.batchnorm3d(v[0], v[1], v[2], mode)?.out;
                    project(tape, y, &r)
                },
            )
        }
        CheckOp::Linear => {
            let (n, d, m) = (
                rng.random_range(1..=6),
                rng.random_range(1..=12),
                rng.random_range(1..=8),
            );
            let x = normal(rng, vec![n, d], 1.0);
            let w = normal(rng, vec![d, m], 1.0);
            let b = normal(rng, vec![m], 1.0);
            let r = normal(rng, vec![n, m], 1.0);
            Instance::new(
                named(vec![("x", x), ("weight", w), ("bias", b)]),
                move |tape, v, _| {
                    let y = tape.linear(v[0], v[1], Some(v[2]))?;
                    project(tape, y, &r)
                },
            )
        }
        CheckOp::Relu => {
            let shape = vec![rng.random_range(1..=4), rng.random_range(1..=50)];
            let x = normal(rng, shape.clone(), 1.0);
            let r = normal(rng, shape, 1.0);
            Instance::new(named(vec![("x", x)]), move |tape, v, m| {
                m.relu(&tape.value(v[0]));
                let y = tape.relu(v[0]);
                project(tape, y, &r)
            })
        }
        CheckOp::ReluComposite => {
            let (xs, ws, params) = conv_geometry(rng);
            let x = normal(rng, xs.to_vec(), 1.0);
            let w = normal(rng, ws.to_vec(), 0.5);
            let b = normal(rng, vec![ws[0]], 0.5);
            let classes = rng.random_range(2..=4);
            let head = normal(rng, vec![ws[0], classes], 1.0);
            let head_b = normal(rng, vec![classes], 0.5);
            let labels: Vec<usize> = (0..xs[0]).map(|_| rng.random_range(0..classes)).collect();
            Instance::new(
                named(vec![
                    ("x", x),
                    ("conv.kernel", w),
                    ("conv.bias", b),
                    ("head.weight", head),
                    ("head.bias", head_b),
                ]),
                move |tape, v, m| {
                    let z = tape.conv3d(v[0], v[1], Some(v[2]), params)?;
                    m.relu(&tape.value(z));
                    let a = tape.relu(z);
                    let pooled = tape.global_avg_pool(a)?;
                    let logits = tape.linear(pooled, v[3], Some(v[4]))?;
                    tape.softmax_cross_entropy(logits, &labels)
                },
            )
        }
        CheckOp::MaxPool3d => {
            let kernel = [
                rng.random_range(1..=2),
                rng.random_range(2..=3),
                rng.random_range(2..=3),
            ];
            let stride = [1, 2, 1].map(|s| rng.random_range(1..=s + 1));
            let padding = kernel.map(|k| rng.random_range(0..k));
            let pool = MaxPool3d::new(kernel, stride, padding);
            let shape = vec![
                rng.random_range(1..=2),
                rng.random_range(1..=2),
                rng.random_range(2..=4),
                rng.random_range(3..=6),
                rng.random_range(3..=6),
            ];
            let x = normal(rng, shape, 1.0);
            let y = crate::ops::max_pool3d(&x, pool).expect("window fits").0;
            let r = normal(rng, y.shape().to_vec(), 1.0);
            Instance::new(named(vec![("x", x)]), move |tape, v, m| {
                m.pool(&tape.value(v[0]), pool);
                let y = tape.max_pool3d(v[0], pool)?;
                project(tape, y, &r)
            })
        }
        CheckOp::GlobalAvgPool => {
            let shape = vec![
                rng.random_range(1..=3),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=5),
                rng.random_range(1..=5),
            ];
            let x = normal(rng, shape.clone(), 1.0);
            let r = normal(rng, vec![shape[0], shape[1]], 1.0);
            Instance::new(named(vec![("x", x)]), move |tape, v, _| {
                let y = tape.global_avg_pool(v[0])?;
                project(tape, y, &r)
            })
        }
        CheckOp::BasicBlock => {
            let c = rng.random_range(1..=2);
            let shape = vec![2, c, 2, rng.random_range(3..=4), rng.random_range(3..=4)];
            let same = Conv3dParams::same([3, 3, 3]);
            let x = normal(rng, shape.clone(), 1.0);
            let k1 = normal(rng, vec![c, c, 3, 3, 3], 0.4);
            let k2 = normal(rng, vec![c, c, 3, 3, 3], 0.4);
            let (g1, b1) = (normal(rng, vec![c], 1.0), normal(rng, vec![c], 0.5));
            let (g2, b2) = (normal(rng, vec![c], 1.0), normal(rng, vec![c], 0.5));
            let r = normal(rng, shape, 1.0);
            Instance::new(
                named(vec![
                    ("x", x),
                    ("conv1", k1),
                    ("bn1.scale", g1),
                    ("bn1.shift", b1),
                    ("conv2", k2),
                    ("bn2.scale", g2),
                    ("bn2.shift", b2),
                ]),
                move |tape, v, m| {
                    let train = BnMode::Train { eps: 1e-5 };
                    let z1 = tape.conv3d(v[0], v[1], None, same)?;
                    let n1 = tape.batchnorm3d(z1, v[2], v[3], train)?.out;
                    m.relu(&tape.value(n1));
                    let a1 = tape.relu(n1);
                    let z2 = tape.conv3d(a1, v[4], None, same)?;
                    let n2 = tape.batchnorm3d(z2, v[5], v[6], train)?.out;
                    let sum = tape.add(n2, v[0])?;
                    m.relu(&tape.value(sum));
                    let y = tape.relu(sum);
                    project(tape, y, &r)
                },
            )
        }
        CheckOp::SoftmaxCrossEntropy => {
            let (n, classes) = (rng.random_range(1..=8), rng.random_range(2..=6));
            let logits = normal(rng, vec![n, classes], 2.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            Instance::new(named(vec![("logits", logits)]), move |tape, v, _| {
                tape.softmax_cross_entropy(v[0], &labels)
            })
        }
        CheckOp::CenterLoss => {
            let (n, d, classes) = (
                rng.random_range(1..=8),
                rng.random_range(1..=16),
                rng.random_range(1..=4),
            );
            let emb = normal(rng, vec![n, d], 1.0);
            let centers = normal(rng, vec![classes, d], 1.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            Instance::new(named(vec![("embeddings", emb)]), move |tape, v, _| {
                tape.center_loss(v[0], &labels, &centers)
            })
        }
    }
}

/// Largest relative error between analytic and numeric gradients of one
/// instance, with the name of the input where it occurred.
fn compare(
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    names: &[String],
) -> (f64, String, usize) {
    let mut worst = (0.0, String::new(), 0);
    for ((a, n), name) in analytic.iter().zip(numeric).zip(names) {
        let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (SCALE_FLOOR * scale).max(1e-12);
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let e = relative_error(av, nv, floor);
            if e > worst.0 {
                worst.0 = e;
                worst.1 = name.clone();
            }
        }
        worst.2 += a.numel();
    }
    worst
}

/// Checks one op over `cfg.instances` random draws.
pub fn check_op(op: CheckOp, cfg: &GradcheckConfig) -> Result<OpReport> {
    let index = CheckOp::ALL.iter().position(|&o| o == op).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(index));
    let mut report = OpReport {
        op,
        instances: 0,
        redrawn: 0,
        partials: 0,
        max_rel_error: 0.0,
        worst_instance: 0,
        worst_input: String::new(),
    };
    while report.instances < cfg.instances {
        let inst = sample_instance(op, &mut rng);
        let values: Vec<Tensor<f64>> = inst.inputs.iter().map(|(_, t)| t.clone()).collect();
        if inst.eval(&values)?.1.value() < KINK_MARGIN {
            report.redrawn += 1;
            if report.redrawn > MAX_REDRAWS {
                return Err(Error::Invalid(format!(
                    "{op}: could not draw an instance away from kinks"
                )));
            }
            continue;
        }
        let mut analytic = inst.analytic()?;
        if cfg.corrupt == Some(op) {
            analytic[0] = analytic[0].scale(1.01);
        }
        let numeric = inst.numeric(cfg.step)?;
        let names: Vec<String> = inst.inputs.iter().map(|(n, _)| n.clone()).collect();
        let (err, input, partials) = compare(&analytic, &numeric, &names);
        report.partials += partials;
        if err > report.max_rel_error || report.instances == 0 {
            report.max_rel_error = err;
            report.worst_instance = report.instances;
            report.worst_input = input;
        }
        report.instances += 1;
    }
    Ok(report)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.instances == 0 || !(cfg.step > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(Error::Config(
            "gradcheck needs instances ≥ 1, step > 0 and tolerance > 0".into(),
        ));
    }
    let ops = cfg
        .ops
        .iter()
        .map(|&op| check_op(op, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        ops,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(op: CheckOp) -> GradcheckConfig {
        GradcheckConfig {
            ops: vec![op],
            instances: 3,
            seed: 7,
            ..GradcheckConfig::default()
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn selector_parses_names() {
        assert_eq!(CheckOp::select("all").unwrap().len(), CheckOp::ALL.len());
        assert_eq!(CheckOp::select("linear").unwrap(), vec![CheckOp::Linear]);
        assert!(matches!(CheckOp::select("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn pool_margin_sees_ties() {
        let x = Tensor::new(vec![1, 1, 1, 1, 4], vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        let mut m = Margin::new();
        m.pool(&x, MaxPool3d::new([1, 1, 2], [1, 1, 2], [0, 0, 0]));
        assert_eq!(m.value(), 0.0);
    }

    #[test]
    fn each_op_passes_a_few_instances() {
        for op in CheckOp::ALL {
            let r = check_op(op, &quick(op)).unwrap();
            assert!(r.max_rel_error < REL_TOLERANCE, "{op}: {r:?}");
        }
    }

    #[test]
    fn corruption_is_reported() {
        let mut cfg = quick(CheckOp::Linear);
        cfg.corrupt = Some(CheckOp::Linear);
        let report = run_gradcheck(&cfg).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().op, CheckOp::Linear);
        assert_eq!(report.worst().unwrap().worst_input, "x");
    }
}

//! ResNet-18-style 3D network: stem, four residual stages, global pooling,
//! and a linear head.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{Conv3dParams, MaxPool3d, BN_EPS, BN_MOMENTUM};
use crate::scalar::Scalar;
use crate::tensor::{Cursor, Tensor};

pub const PPAR_MAGIC: &[u8; 4] = b"PPAR";
pub const PPAR_VERSION: u8 = 1;

/// One basic residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: [usize; 3],
    pub projection: bool,
}

impl BlockSpec {
    /// The shortcut is projected exactly when the block changes shape.
    pub fn new(in_channels: usize, out_channels: usize, stride: [usize; 3]) -> Self {
        BlockSpec {
            in_channels,
            out_channels,
            stride,
            projection: in_channels != out_channels || stride != [1, 1, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub blocks: Vec<usize>,
    pub widths: Vec<usize>,
    pub classes: usize,
    pub frames: usize,
    pub size: usize,
}

impl NetworkSpec {
    /// Widths [8, 16, 32, 64]: small enough for CPU training.
    pub fn desk(classes: usize) -> Self {
        Self::with_widths(classes, vec![8, 16, 32, 64])
    }

    /// Standard ResNet-18 widths, d = 512.
    pub fn full(classes: usize) -> Self {
        Self::with_widths(classes, vec![64, 128, 256, 512])
    }

    fn with_widths(classes: usize, widths: Vec<usize>) -> Self {
        NetworkSpec {
            in_channels: 3,
            stem_channels: widths[0],
            blocks: vec![2; widths.len()],
            widths,
            classes,
            frames: 8,
            size: 112,
        }
    }

    /// `"desk"` or `"full"`.
    pub fn by_name(name: &str, classes: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(classes)),
            "full" => Ok(Self::full(classes)),
            other => Err(Error::Config(format!(
                "unknown network spec `{other}` (expected desk or full)"
            ))),
        }
    }

    pub fn with_frames(mut self, frames: usize) -> Self {
        self.frames = frames;
        self
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return bad("widths and blocks must be nonempty and equal length".into());
        }
        if self.blocks.contains(&0) || self.widths.contains(&0) {
            return bad("zero-sized stage".into());
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.frames == 0 || self.size == 0 {
            return bad("zero-sized input or stem".into());
        }
        Ok(())
    }

    pub fn stage_name(i: usize) -> String {
        format!("stage{}", i + 1)
    }

    /// Block specs per stage; every stage after the first halves T, H and W.
    pub fn stages(&self) -> Vec<Vec<BlockSpec>> {
        let mut in_ch = self.stem_channels;
        let mut out = Vec::new();
        for (i, (&n, &w)) in self.blocks.iter().zip(&self.widths).enumerate() {
            let mut stage = Vec::new();
            for b in 0..n {
                let stride = if i > 0 && b == 0 {
                    [2, 2, 2]
                } else {
                    [1, 1, 1]
                };
                stage.push(BlockSpec::new(in_ch, w, stride));
                in_ch = w;
            }
            out.push(stage);
        }
        out
    }

    pub fn stem_conv() -> ([usize; 3], Conv3dParams) {
        ([3, 7, 7], Conv3dParams::new([1, 2, 2], [1, 3, 3]))
    }

    pub fn stem_pool() -> MaxPool3d {
        MaxPool3d::new([3, 3, 3], [2, 2, 2], [1, 1, 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// Batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<S> {
    pub value: Tensor<S>,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Named parameters in a stable order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<S = f32> {
    entries: IndexMap<String, ParamEntry<S>>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn new() -> Self {
        ModelParams {
            entries: IndexMap::new(),
        }
    }

    /// Kaiming fan-out normal convolutions, unit/zero batch-norm, uniform
    /// head weights in ±1/√d and a zero head bias.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let (sk, _) = NetworkSpec::stem_conv();
        p.init_conv(
            "stem.conv",
            [spec.stem_channels, spec.in_channels, sk[0], sk[1], sk[2]],
            &mut rng,
        );
        p.init_bn("stem.bn", spec.stem_channels);
        for (si, stage) in spec.stages().iter().enumerate() {
            for (bi, b) in stage.iter().enumerate() {
                let pre = format!("{}.block{}", NetworkSpec::stage_name(si), bi + 1);
                let (i, o) = (b.in_channels, b.out_channels);
                p.init_conv(&format!("{pre}.conv1"), [o, i, 3, 3, 3], &mut rng);
                p.init_bn(&format!("{pre}.bn1"), o);
                p.init_conv(&format!("{pre}.conv2"), [o, o, 3, 3, 3], &mut rng);
                p.init_bn(&format!("{pre}.bn2"), o);
                if b.projection {
                    p.init_conv(&format!("{pre}.shortcut.conv"), [o, i, 1, 1, 1], &mut rng);
                    p.init_bn(&format!("{pre}.shortcut.bn"), o);
                }
            }
        }
        let d = spec.embedding_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let w = Tensor::from_fn(vec![d, spec.classes], |_| {
            S::lit(rng.random_range(-bound..bound))
        });
        p.insert("head.weight", w, ParamKind::Weight);
        p.insert(
            "head.bias",
            Tensor::zeros(vec![spec.classes]),
            ParamKind::Weight,
        );
        Ok(p)
    }

    fn init_conv(&mut self, name: &str, shape: [usize; 5], rng: &mut ChaCha8Rng) {
        let fan_out = (shape[0] * shape[2] * shape[3] * shape[4]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("positive std");
        let t = Tensor::from_fn(shape.to_vec(), |_| S::lit(normal.sample(rng)));
        self.insert(name, t, ParamKind::Weight);
    }

    fn init_bn(&mut self, prefix: &str, c: usize) {
        self.insert(
            format!("{prefix}.scale"),
            Tensor::ones(vec![c]),
            ParamKind::Weight,
        );
        self.insert(
            format!("{prefix}.shift"),
            Tensor::zeros(vec![c]),
            ParamKind::Weight,
        );
        self.insert(
            format!("{prefix}.running_mean"),
            Tensor::zeros(vec![c]),
            ParamKind::Buffer,
        );
        self.insert(
            format!("{prefix}.running_var"),
            Tensor::ones(vec![c]),
            ParamKind::Buffer,
        );
    }

    /// Adds or replaces an entry. Weights start trainable.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>, kind: ParamKind) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                kind,
                trainable: kind == ParamKind::Weight,
            },
        );
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.entry(name)?.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        e.trainable = trainable && e.kind == ParamKind::Weight;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            kind: e.kind,
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise equality of every value (flags ignored).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(k, e)| {
                other
                    .entries
                    .get(k)
                    .is_some_and(|o| o.value.bitwise_eq(&e.value))
            })
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_ppar(self.entries.iter().map(|(k, e)| (k.as_str(), &e.value)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Loads every parameter `spec` expects. Entries the network does not
    /// know (e.g. class centers) are ignored; trainable flags reset to
    /// all-weights-trainable, so re-apply the freeze policy afterwards.
    pub fn load(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut file = decode_ppar::<S>(&bytes)?;
        let template = ModelParams::<S>::init(spec, 0)?;
        let mut out = ModelParams::new();
        for (name, e) in template.iter() {
            let t = file
                .shift_remove(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if t.shape() != e.value.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!(
                        "`{name}` is {:?}, spec wants {:?}",
                        t.shape(),
                        e.value.shape()
                    ),
                ));
            }
            out.insert(name, t, e.kind);
        }
        Ok(out)
    }
}

pub fn encode_ppar<'a, S: Scalar>(
    entries: impl Iterator<Item = (&'a str, &'a Tensor<S>)>,
) -> Vec<u8> {
    let entries: Vec<_> = entries.collect();
    let mut out = Vec::new();
    out.extend_from_slice(PPAR_MAGIC);
    out.push(PPAR_VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.encode_ptns(&mut out);
    }
    out
}

pub fn decode_ppar<S: Scalar>(bytes: &[u8]) -> Result<IndexMap<String, Tensor<S>>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != PPAR_MAGIC {
        return Err(Error::Format("bad magic: not a parameter file".into()));
    }
    let version = cur.u8()?;
    if version != PPAR_VERSION {
        return Err(Error::Version {
            expected: PPAR_VERSION,
            found: version,
        });
    }
    let count = cur.u32()?;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let (t, used) = Tensor::decode_ptns(&bytes[cur.pos..])?;
        cur.pos += used;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
    }
    if cur.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", cur.remaining())));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
    /// Batch statistics in trainable layers, running statistics in frozen
    /// ones, so frozen stages act as a fixed feature extractor.
    FineTune,
}

/// Which parameter groups stay trainable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Only the final residual stage and the head train.
    #[default]
    AllButLastStageAndHead,
    None,
    /// Explicit list of trainable groups (`stem`, `stageN`, `head`).
    Train(Vec<String>),
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze-all-but-last-stage-and-head" => Ok(FreezePolicy::AllButLastStageAndHead),
            "none" => Ok(FreezePolicy::None),
            _ => match s.strip_prefix("train:") {
                Some(list) => Ok(FreezePolicy::Train(
                    list.split(',').map(|g| g.trim().to_string()).collect(),
                )),
                None => Err(Error::Config(format!("unknown freeze policy `{s}`"))),
            },
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezePolicy::AllButLastStageAndHead => {
                f.write_str("freeze-all-but-last-stage-and-head")
            }
            FreezePolicy::None => f.write_str("none"),
            FreezePolicy::Train(groups) => write!(f, "train:{}", groups.join(",")),
        }
    }
}

impl Serialize for FreezePolicy {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FreezePolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Group a parameter belongs to: the text before the first dot.
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Sets trainable flags per `policy`. Buffers are never trainable.
pub fn freeze_layers<S: Scalar>(
    params: &mut ModelParams<S>,
    spec: &NetworkSpec,
    policy: &FreezePolicy,
) -> Result<()> {
    let mut groups: Vec<String> = vec!["stem".into(), "head".into()];
    groups.extend((0..spec.widths.len()).map(NetworkSpec::stage_name));
    let trainable: Vec<String> = match policy {
        FreezePolicy::None => groups.clone(),
        FreezePolicy::AllButLastStageAndHead => {
            vec![
                NetworkSpec::stage_name(spec.widths.len() - 1),
                "head".into(),
            ]
        }
        FreezePolicy::Train(list) => {
            if let Some(bad) = list.iter().find(|g| !groups.contains(g)) {
                return Err(Error::Config(format!(
                    "unknown stage `{bad}` in freeze policy (known: {})",
                    groups.join(", ")
                )));
            }
            list.clone()
        }
    };
    for e in params.entries.iter_mut() {
        let on = trainable.iter().any(|g| g == param_group(e.0));
        e.1.trainable = on && e.1.kind == ParamKind::Weight;
    }
    Ok(())
}

/// Batch statistics observed by one train-mode batch-norm.
#[derive(Debug, Clone)]
pub struct BnStats<S> {
    /// Prefix such as `stage1.block1.bn1`.
    pub name: String,
    pub mean: Vec<S>,
    pub var: Vec<S>,
    /// Elements per channel the statistics were computed over.
    pub count: usize,
}

/// Tape handles for the outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars<S> {
    pub embedding: Var,
    pub logits: Var,
    pub bn_stats: Vec<BnStats<S>>,
}

/// Records parameters onto a tape: trainable weights become named leaves,
/// everything else constants, so frozen layers carry no backward work.
struct Recorder<'a, S: Scalar> {
    tape: &'a Tape<S>,
    params: &'a ModelParams<S>,
    mode: Mode,
    stats: Vec<BnStats<S>>,
}

impl<S: Scalar> Recorder<'_, S> {
    fn var(&self, name: &str) -> Result<Var> {
        let e = self.params.entry(name)?;
        Ok(if e.trainable {
            self.tape.param(name, e.value.clone())
        } else {
            self.tape.constant(e.value.clone())
        })
    }

    fn conv(&self, x: Var, name: &str, p: Conv3dParams) -> Result<Var> {
        let k = self.var(name)?;
        self.tape.conv3d(x, k, None, p)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let scale = self.var(&format!("{prefix}.scale"))?;
        let shift = self.var(&format!("{prefix}.shift"))?;
        let eps = S::lit(BN_EPS);
        let batch_stats = match self.mode {
            Mode::Train => true,
            Mode::Eval => false,
            Mode::FineTune => self.params.is_trainable(&format!("{prefix}.scale")),
        };
        match batch_stats {
            true => {
                let shape = self.tape.value(x).shape().to_vec();
                let out = self
                    .tape
                    .batchnorm3d(x, scale, shift, BnMode::Train { eps })?;
                self.stats.push(BnStats {
                    name: prefix.to_string(),
                    mean: out.mean,
                    var: out.var,
                    count: shape[0] * shape[2..].iter().product::<usize>(),
                });
                Ok(out.out)
            }
            false => {
                let rm = self.params.get(&format!("{prefix}.running_mean"))?;
                let rv = self.params.get(&format!("{prefix}.running_var"))?;
                let out = self.tape.batchnorm3d(
                    x,
                    scale,
                    shift,
                    BnMode::Eval {
                        running_mean: rm,
                        running_var: rv,
                        eps,
                    },
                )?;
                Ok(out.out)
            }
        }
    }

    fn block(&mut self, x: Var, spec: &BlockSpec, prefix: &str) -> Result<Var> {
        let c = self.tape.value(x).shape().get(1).copied().unwrap_or(0);
        if c != spec.in_channels {
            return Err(Error::shape(
                "basic_block",
                format!("input has {c} channels, block expects {}", spec.in_channels),
            ));
        }
        let p1 = Conv3dParams::new(spec.stride, [1, 1, 1]);
        let h = self.conv(x, &format!("{prefix}.conv1"), p1)?;
        let h = self.bn(h, &format!("{prefix}.bn1"))?;
        let h = self.tape.relu(h);
        let h = self.conv(h, &format!("{prefix}.conv2"), Conv3dParams::same([3, 3, 3]))?;
        let h = self.bn(h, &format!("{prefix}.bn2"))?;
        let skip = if spec.projection {
            let s = self.conv(
                x,
                &format!("{prefix}.shortcut.conv"),
                Conv3dParams::new(spec.stride, [0, 0, 0]),
            )?;
            self.bn(s, &format!("{prefix}.shortcut.bn"))?
        } else {
            x
        };
        let sum = self.tape.add(h, skip)?;
        Ok(self.tape.relu(sum))
    }
}

/// Records one residual block: `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`.
/// Parameters are looked up under `prefix` (e.g. `stage2.block1`).
pub fn basic_block_tape<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    spec: &BlockSpec,
    prefix: &str,
    params: &ModelParams<S>,
    mode: Mode,
) -> Result<(Var, Vec<BnStats<S>>)> {
    let mut r = Recorder {
        tape,
        params,
        mode,
        stats: Vec::new(),
    };
    let y = r.block(x, spec, prefix)?;
    Ok((y, r.stats))
}

/// Value-level residual block.
pub fn basic_block_forward<S: Scalar>(
    x: &Tensor<S>,
    spec: &BlockSpec,
    prefix: &str,
    params: &ModelParams<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (y, _) = basic_block_tape(&tape, xv, spec, prefix, params, mode)?;
    Ok((*tape.value(y)).clone())
}

/// Records the full network on `tape`.
pub fn forward_tape<S: Scalar>(
    tape: &Tape<S>,
    input: Var,
    spec: &NetworkSpec,
    params: &ModelParams<S>,
    mode: Mode,
) -> Result<ForwardVars<S>> {
    let shape = tape.value(input).shape().to_vec();
    let want = [spec.in_channels, spec.frames, spec.size, spec.size];
    if shape.len() != 5 || shape[1..] != want {
        return Err(Error::shape(
            "forward",
            format!("input {shape:?}, spec expects N×{want:?}"),
        ));
    }
    let mut r = Recorder {
        tape,
        params,
        mode,
        stats: Vec::new(),
    };
    let (_, stem_p) = NetworkSpec::stem_conv();
    let mut h = r.conv(input, "stem.conv", stem_p)?;
    h = r.bn(h, "stem.bn")?;
    h = tape.relu(h);
    h = tape.max_pool3d(h, NetworkSpec::stem_pool())?;
    for (si, stage) in spec.stages().iter().enumerate() {
        for (bi, b) in stage.iter().enumerate() {
            h = r.block(
                h,
                b,
                &format!("{}.block{}", NetworkSpec::stage_name(si), bi + 1),
            )?;
        }
    }
    let embedding = tape.global_avg_pool(h)?;
    let w = r.var("head.weight")?;
    let b = r.var("head.bias")?;
    let logits = tape.linear(embedding, w, Some(b))?;
    Ok(ForwardVars {
        embedding,
        logits,
        bn_stats: r.stats,
    })
}

/// Embedding (N×d) and logits (N×n) without gradient bookkeeping.
pub fn forward<S: Scalar>(
    input: &Tensor<S>,
    spec: &NetworkSpec,
    params: &ModelParams<S>,
    mode: Mode,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let tape = Tape::new();
    let frozen;
    let params = if params.entries.values().any(|e| e.trainable) {
        let mut p = params.clone();
        p.entries.values_mut().for_each(|e| e.trainable = false);
        frozen = p;
        &frozen
    } else {
        params
    };
    let x = tape.constant(input.clone());
    let out = forward_tape(&tape, x, spec, params, mode)?;
    let e = (*tape.value(out.embedding)).clone();
    let l = (*tape.value(out.logits)).clone();
    Ok((e, l))
}

/// Folds batch statistics into the running averages with momentum 0.1;
/// the running variance uses the unbiased estimate.
pub fn update_running_stats<S: Scalar>(
    params: &mut ModelParams<S>,
    stats: &[BnStats<S>],
) -> Result<()> {
    let m = S::lit(BN_MOMENTUM);
    let keep = S::one() - m;
    for st in stats {
        let correction = if st.count > 1 {
            S::lit(st.count as f64 / (st.count - 1) as f64)
        } else {
            S::one()
        };
        let rm = params.get_mut(&format!("{}.running_mean", st.name))?;
        for (r, &v) in rm.data_mut().iter_mut().zip(&st.mean) {
            *r = keep * *r + m * v;
        }
        let rv = params.get_mut(&format!("{}.running_var", st.name))?;
        for (r, &v) in rv.data_mut().iter_mut().zip(&st.var) {
            *r = keep * *r + m * v * correction;
        }
    }
    Ok(())
}

/// Replaces every running statistic with the average of the batch
/// statistics over `batches` (train-mode forward, no parameter change).
pub fn calibrate_running_stats<S: Scalar>(
    params: &mut ModelParams<S>,
    spec: &NetworkSpec,
    batches: impl IntoIterator<Item = Tensor<S>>,
) -> Result<()> {
    let mut sums: IndexMap<String, (Vec<S>, Vec<S>)> = IndexMap::new();
    let mut n = 0usize;
    for input in batches {
        let tape = Tape::new();
        let x = tape.constant(input);
        let out = forward_tape(&tape, x, spec, params, Mode::Train)?;
        for st in out.bn_stats {
            let correction = if st.count > 1 {
                S::lit(st.count as f64 / (st.count - 1) as f64)
            } else {
                S::one()
            };
            let e = sums.entry(st.name).or_insert_with(|| {
                (
                    vec![S::zero(); st.mean.len()],
                    vec![S::zero(); st.var.len()],
                )
            });
            e.0.iter_mut().zip(&st.mean).for_each(|(a, &v)| *a += v);
            e.1.iter_mut()
                .zip(&st.var)
                .for_each(|(a, &v)| *a += v * correction);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid(
            "calibration needs at least one batch".into(),
        ));
    }
    let inv = S::one() / S::lit(n as f64);
    for (name, (mean, var)) in sums {
        let rm = params.get_mut(&format!("{name}.running_mean"))?;
        rm.data_mut()
            .iter_mut()
            .zip(&mean)
            .for_each(|(r, &v)| *r = v * inv);
        let rv = params.get_mut(&format!("{name}.running_var"))?;
        rv.data_mut()
            .iter_mut()
            .zip(&var)
            .for_each(|(r, &v)| *r = v * inv);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            in_channels: 3,
            stem_channels: 4,
            blocks: vec![1, 1],
            widths: vec![4, 6],
            classes: 3,
            frames: 4,
            size: 16,
        }
    }

    /// Learnable scalars of one basic block, counted by hand.
    fn block_weights(i: usize, o: usize, proj: bool) -> usize {
        27 * i * o + 2 * o + 27 * o * o + 2 * o + if proj { i * o + 2 * o } else { 0 }
    }

    #[test]
    fn desk_parameter_count_matches_closed_form() {
        let spec = NetworkSpec::desk(4);
        let p = ModelParams::<f32>::init(&spec, 1).unwrap();
        let stem = 8 * 3 * 3 * 7 * 7 + 2 * 8;
        let stages = block_weights(8, 8, false) * 2
            + block_weights(8, 16, true)
            + block_weights(16, 16, false)
            + block_weights(16, 32, true)
            + block_weights(32, 32, false)
            + block_weights(32, 64, true)
            + block_weights(64, 64, false);
        let head = 64 * 4 + 4;
        assert_eq!(p.weight_count(), stem + stages + head);
        assert_eq!(p.weight_count(), 522_620);
    }

    #[test]
    fn projection_iff_shape_changes() {
        assert!(!BlockSpec::new(4, 4, [1, 1, 1]).projection);
        assert!(BlockSpec::new(4, 8, [1, 1, 1]).projection);
        assert!(BlockSpec::new(4, 4, [2, 2, 2]).projection);
    }

    #[test]
    fn zero_kernels_reduce_block_to_relu() {
        let spec = BlockSpec::new(2, 2, [1, 1, 1]);
        let mut p = ModelParams::<f64>::new();
        p.insert(
            "b.conv1",
            Tensor::zeros(vec![2, 2, 3, 3, 3]),
            ParamKind::Weight,
        );
        p.insert(
            "b.conv2",
            Tensor::zeros(vec![2, 2, 3, 3, 3]),
            ParamKind::Weight,
        );
        p.init_bn("b.bn1", 2);
        p.init_bn("b.bn2", 2);
        let x = Tensor::from_fn(vec![2, 2, 3, 4, 4], |i| ((i * 7919) % 13) as f64 - 6.0);
        for mode in [Mode::Train, Mode::Eval] {
            let y = basic_block_forward(&x, &spec, "b", &p, mode).unwrap();
            assert!(y.bitwise_eq(&x.map(|v| v.max(0.0))));
        }
    }

    #[test]
    fn block_rejects_channel_mismatch() {
        let spec = BlockSpec::new(3, 3, [1, 1, 1]);
        let p = ModelParams::<f32>::new();
        let x = Tensor::zeros(vec![1, 2, 2, 2, 2]);
        assert!(matches!(
            basic_block_forward(&x, &spec, "b", &p, Mode::Eval),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn forward_shapes_and_input_validation() {
        let spec = tiny_spec();
        let p = ModelParams::<f32>::init(&spec, 3).unwrap();
        let x = Tensor::from_fn(vec![2, 3, 4, 16, 16], |i| (i % 17) as f32 / 17.0);
        let (e, l) = forward(&x, &spec, &p, Mode::Eval).unwrap();
        assert_eq!(e.shape(), &[2, 6]);
        assert_eq!(l.shape(), &[2, 3]);
        let wrong = Tensor::zeros(vec![1, 3, 5, 16, 16]);
        assert!(forward(&wrong, &spec, &p, Mode::Eval).is_err());
    }

    #[test]
    fn freeze_policies() {
        let spec = tiny_spec();
        let mut p = ModelParams::<f32>::init(&spec, 0).unwrap();
        freeze_layers(&mut p, &spec, &FreezePolicy::default()).unwrap();
        for (name, e) in p.iter() {
            let g = param_group(name);
            let want = (g == "stage2" || g == "head") && e.kind == ParamKind::Weight;
            assert_eq!(e.trainable, want, "{name}");
        }
        freeze_layers(&mut p, &spec, &FreezePolicy::None).unwrap();
        assert!(p
            .iter()
            .all(|(_, e)| e.trainable == (e.kind == ParamKind::Weight)));
        let bad: FreezePolicy = "train:stage9".parse().unwrap();
        assert!(freeze_layers(&mut p, &spec, &bad).is_err());
        assert!("frozen-ish".parse::<FreezePolicy>().is_err());
        let custom: FreezePolicy = "train:stem,head".parse().unwrap();
        assert_eq!(custom.to_string(), "train:stem,head");
    }

    #[test]
    fn ppar_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let p = ModelParams::<f32>::init(&spec, 5).unwrap();
        let path = dir.path().join("p.ppar");
        p.save(&path).unwrap();
        let q = ModelParams::<f32>::load(&path, &spec).unwrap();
        assert!(p.bitwise_eq(&q));
        assert_eq!(p.names().collect::<Vec<_>>(), q.names().collect::<Vec<_>>());

        let mut bigger = spec.clone();
        bigger.blocks = vec![1, 2];
        match ModelParams::<f32>::load(&path, &bigger) {
            Err(Error::MissingParam(name)) => assert_eq!(name, "stage2.block2.conv1"),
            other => panic!("expected missing parameter, got {other:?}"),
        }

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ModelParams::<f32>::load(&path, &spec),
            Err(Error::Format(_))
        ));
        bytes[0] = b'P';
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ModelParams::<f32>::load(&path, &spec),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn running_stats_use_momentum_and_unbiased_variance() {
        let mut p = ModelParams::<f64>::new();
        p.init_bn("bn", 1);
        let st = BnStats {
            name: "bn".into(),
            mean: vec![2.0],
            var: vec![1.0],
            count: 2,
        };
        update_running_stats(&mut p, &[st]).unwrap();
        assert!((p.get("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-15);
        assert!((p.get("bn.running_var").unwrap().data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }
}

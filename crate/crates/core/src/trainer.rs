//! SGD training: weighted mini-batches, augmentation, the joint softmax +
//! center objective, and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradientRecord, Tape};
use crate::dataset::{self, LabelField, Manifest, WeightedSampler};
use crate::error::{Error, Result};
use crate::losses::{self, ClassCenters, LossBreakdown, DEFAULT_CENTER_ALPHA, DEFAULT_LAMBDA};
use crate::model::{self, encode_ppar, FreezePolicy, Mode, ModelParams, NetworkSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util::fnv1a;
use crate::videopipe::{self, AugmentationConfig, VideoSequence, DEFAULT_SIZE};

pub type Task = LabelField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames per clip after temporal normalization.
    pub frames: usize,
    pub lambda: f64,
    pub center_alpha: f64,
    pub seed: u64,
    pub freeze: FreezePolicy,
    /// Frozen layers normalize with running statistics calibrated once on the
    /// training clips and never updated.
    pub freeze_bn_stats: bool,
    /// The stream seed is derived from `seed`; `augmentation.seed` is
    /// ignored.
    pub augmentation: AugmentationConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.001,
            momentum: 0.9,
            epochs: 50,
            batch_size: 8,
            frames: 8,
            lambda: DEFAULT_LAMBDA,
            center_alpha: DEFAULT_CENTER_ALPHA,
            seed: 0,
            freeze: FreezePolicy::default(),
            freeze_bn_stats: false,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl OptimizerConfig {
    /// Forward mode used for training steps.
    pub fn bn_mode(&self) -> Mode {
        if self.freeze_bn_stats {
            Mode::FineTune
        } else {
            Mode::Train
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.frames < 1 || self.batch_size < 1 {
            return bad("frames and batch_size must be at least 1");
        }
        if !(self.lambda >= 0.0)
            || !(self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.momentum)
        {
            return bad("lambda and weight_decay must be ≥ 0 and momentum in [0, 1)");
        }
        if !(self.center_alpha > 0.0 && self.center_alpha <= 1.0) {
            return bad("center_alpha must lie in (0, 1]");
        }
        self.augmentation.validate()
    }

    /// Augmentation settings with the stream seed derived from `seed`.
    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            seed: self.seed ^ 0xa5a5_5a5a_0f0f_f0f0,
            ..self.augmentation
        }
    }
}

/// Stable hash of a config's canonical JSON, as 16 hex digits.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let json = serde_json::to_string(cfg)?;
    Ok(format!("{:016x}", fnv1a(json.as_bytes())))
}

#[derive(Debug, Clone)]
pub struct TrainState<S: Scalar = f32> {
    pub params: ModelParams<S>,
    /// One velocity buffer per trainable parameter.
    pub momentum: IndexMap<String, Tensor<S>>,
    pub centers: ClassCenters<S>,
    pub epoch: usize,
    pub history: Vec<LossBreakdown>,
}

impl<S: Scalar> TrainState<S> {
    /// Initialized network with the freeze policy applied, zero centers and
    /// zero velocities.
    pub fn new(spec: &NetworkSpec, cfg: &OptimizerConfig) -> Result<Self> {
        let mut params = ModelParams::init(spec, cfg.seed)?;
        model::freeze_layers(&mut params, spec, &cfg.freeze)?;
        let momentum = params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, e)| (n.to_string(), Tensor::zeros(e.value.shape().to_vec())))
            .collect();
        let centers =
            ClassCenters::new(spec.classes, spec.embedding_dim(), S::lit(cfg.center_alpha))?;
        Ok(TrainState {
            params,
            momentum,
            centers,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn steps(&self) -> usize {
        self.history.len()
    }
}

/// `v ← μ·v + g + wd·p; p ← p − lr·v` for every trainable parameter. A
/// trainable parameter without a gradient is treated as having zero
/// gradient; frozen parameters are never touched.
pub fn sgd_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &GradientRecord<S>,
    buffers: &mut IndexMap<String, Tensor<S>>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let (lr, mu, wd) = (
        S::lit(cfg.lr),
        S::lit(cfg.momentum),
        S::lit(cfg.weight_decay),
    );
    let names: Vec<String> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let p = params.get_mut(&name)?;
        let v = buffers
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        if v.shape() != p.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "velocity of `{name}` is {:?}, parameter {:?}",
                    v.shape(),
                    p.shape()
                ),
            ));
        }
        let g = grads.get(&name);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!(
                        "gradient of `{name}` is {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    ),
                ));
            }
        }
        let gd = g.map(Tensor::data);
        for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let gi = gd.map_or(S::zero(), |d| d[i]);
            *vv = mu * *vv + gi + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Stacks clips into a channels-first `N × C × T × H × W` batch.
pub fn stack_batch<S: Scalar>(clips: &[VideoSequence<S>]) -> Result<Tensor<S>> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (t, h, w, c) = first.dims();
    let mut data = Vec::with_capacity(clips.len() * t * h * w * c);
    for clip in clips {
        if clip.dims() != (t, h, w, c) {
            return Err(Error::shape(
                "batch",
                format!("clip {:?} vs {:?}", clip.dims(), (t, h, w, c)),
            ));
        }
        data.extend_from_slice(clip.to_channels_first().data());
    }
    Tensor::new(vec![clips.len(), c, t, h, w], data)
}

/// One optimization step on a preprocessed batch.
pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    input: &Tensor<S>,
    labels: &[usize],
    spec: &NetworkSpec,
    cfg: &OptimizerConfig,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let x = tape.constant(input.clone());
    let out = model::forward_tape(&tape, x, spec, &state.params, cfg.bn_mode())?;
    let ce = tape.softmax_cross_entropy(out.logits, labels)?;
    let embedding = tape.value(out.embedding);
    let (loss, center_value) = if cfg.lambda > 0.0 {
        let cl = tape.center_loss(out.embedding, labels, state.centers.centers())?;
        let weighted = tape.scale(cl, S::lit(cfg.lambda));
        (tape.add(ce, weighted)?, tape.value(cl).item()?)
    } else {
        (ce, losses::center_loss(&embedding, labels, &state.centers)?)
    };
    let breakdown = losses::total_loss(
        tape.value(ce).item()?.as_f64(),
        center_value.as_f64(),
        cfg.lambda,
    )?;
    if !breakdown.total.is_finite() {
        return Err(Error::Invalid(format!(
            "training diverged at step {}: loss {}",
            state.steps(),
            breakdown.total
        )));
    }
    let grads = tape.backward(loss)?;
    sgd_step(&mut state.params, &grads, &mut state.momentum, cfg)?;
    if cfg.lambda > 0.0 {
        state.centers.update(&embedding, labels)?;
    }
    model::update_running_stats(&mut state.params, &out.bn_stats)?;
    state.history.push(breakdown);
    Ok(breakdown)
}

/// Clips normalized to the training geometry, loaded once and shared by
/// every fold.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub clips: Vec<VideoSequence<f32>>,
    pub subjects: Vec<String>,
    pub frames: usize,
}

impl PreparedData {
    pub fn from_clips(clips: Vec<VideoSequence<f32>>, frames: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(clips.len());
        for c in &clips {
            let n = videopipe::normalize_frames(c, frames)?;
            out.push(videopipe::resize_spatial(&n, DEFAULT_SIZE)?);
        }
        let subjects = out.iter().map(|c| c.subject_id.clone()).collect();
        Ok(PreparedData {
            clips: out,
            subjects,
            frames,
        })
    }

    /// Loads every record of `manifest` (stored under `dir`).
    pub fn load(manifest: &Manifest, dir: &Path, frames: usize) -> Result<Self> {
        let clips = manifest
            .records
            .iter()
            .map(|r| dataset::load_record(dir, r))
            .collect::<Result<Vec<_>>>()?;
        Self::from_clips(clips, frames)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn label(&self, i: usize, task: Task) -> usize {
        let c = &self.clips[i];
        match task {
            LabelField::Motion => c.motion_label.index(),
            LabelField::Grade => (c.palsy_grade - videopipe::MIN_GRADE) as usize,
        }
    }

    pub fn labels(&self, indices: &[usize], task: Task) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i, task)).collect()
    }
}

/// Trains on the clips at `indices` for `cfg.epochs` epochs of
/// `ceil(len / batch_size)` weighted-sampled steps each. Zero epochs returns
/// the initialization.
pub fn train(
    data: &PreparedData,
    indices: &[usize],
    cfg: &OptimizerConfig,
    task: Task,
    spec: &NetworkSpec,
) -> Result<TrainState<f32>> {
    train_with(data, indices, cfg, task, spec, |_, _| {})
}

/// [`train`] with a callback after every step (`state`, step loss).
pub fn train_with(
    data: &PreparedData,
    indices: &[usize],
    cfg: &OptimizerConfig,
    task: Task,
    spec: &NetworkSpec,
    mut on_step: impl FnMut(&TrainState<f32>, &LossBreakdown),
) -> Result<TrainState<f32>> {
    if cfg.epochs > 0 {
        cfg.validate()?;
    }
    if spec.frames != data.frames || spec.classes != task.classes() {
        return Err(Error::Config(format!(
            "network expects {} frames and {} classes; data has {} frames, task {} has {} classes",
            spec.frames,
            spec.classes,
            data.frames,
            task.name(),
            task.classes()
        )));
    }
    if indices.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let mut state = TrainState::new(spec, cfg)?;
    if cfg.freeze_bn_stats && cfg.epochs > 0 {
        let batches = indices
            .chunks(cfg.batch_size)
            .map(|c| stack_batch(&c.iter().map(|&i| data.clips[i].clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        model::calibrate_running_stats(&mut state.params, spec, batches)?;
    }
    let labels = data.labels(indices, task);
    let mut sampler =
        WeightedSampler::for_classes(&labels, task.classes(), cfg.batch_size, cfg.seed)?;
    let aug = cfg.augmentation();
    let steps_per_epoch = indices.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let step = state.steps() as u64;
            let picks = sampler.next_batch();
            let clips: Vec<VideoSequence<f32>> = picks
                .iter()
                .enumerate()
                .map(|(slot, &k)| {
                    let mut rng =
                        aug.rng_for(step * cfg.batch_size as u64 + slot as u64, epoch as u64);
                    videopipe::augment(&data.clips[indices[k]], &aug, &mut rng)
                })
                .collect();
            let batch_labels: Vec<usize> = picks.iter().map(|&k| labels[k]).collect();
            let input = stack_batch(&clips)?;
            let loss = train_step(&mut state, &input, &batch_labels, spec, cfg)?;
            on_step(&state, &loss);
        }
        state.epoch = epoch + 1;
    }
    Ok(state)
}

/// Eval-mode embeddings and predicted classes for the clips at `indices`.
pub fn predict(
    params: &ModelParams<f32>,
    spec: &NetworkSpec,
    data: &PreparedData,
    indices: &[usize],
    batch_size: usize,
) -> Result<(Vec<usize>, Tensor<f32>)> {
    let mut preds = Vec::with_capacity(indices.len());
    let mut emb = Vec::with_capacity(indices.len() * spec.embedding_dim());
    for chunk in indices.chunks(batch_size.max(1)) {
        let clips: Vec<VideoSequence<f32>> = chunk.iter().map(|&i| data.clips[i].clone()).collect();
        let (e, logits) = model::forward(&stack_batch(&clips)?, spec, params, Mode::Eval)?;
        let classes = logits.shape()[1];
        for row in logits.data().chunks(classes) {
            // First maximum wins, so ties resolve deterministically.
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                );
            preds.push(best.0);
        }
        emb.extend_from_slice(e.data());
    }
    let d = spec.embedding_dim();
    Ok((preds, Tensor::new(vec![indices.len(), d], emb)?))
}

/// Sidecar written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Writes `<stem>.ppar` (parameters plus `center.<class>` rows) and
/// `<stem>.json`.
pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    stem: &str,
    state: &TrainState<S>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let centers: Vec<(String, Tensor<S>)> = (0..state.centers.classes())
        .map(|j| {
            let row = state.centers.center(j).to_vec();
            (
                format!("center.{j}"),
                Tensor::new(vec![row.len()], row).unwrap(),
            )
        })
        .collect();
    let entries = state
        .params
        .iter()
        .map(|(n, e)| (n, &e.value))
        .chain(centers.iter().map(|(n, t)| (n.as_str(), t)));
    let ppar = dir.join(format!("{stem}.ppar"));
    fs::write(&ppar, encode_ppar(entries)).map_err(|e| Error::io(&ppar, e))?;
    let meta = CheckpointMeta {
        epoch: state.epoch,
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
    };
    let json = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

/// Restores parameters and centers written by [`save_checkpoint`].
pub fn load_checkpoint(
    dir: &Path,
    stem: &str,
    spec: &NetworkSpec,
    cfg: &OptimizerConfig,
) -> Result<(ModelParams<f32>, ClassCenters<f32>, CheckpointMeta)> {
    let ppar = dir.join(format!("{stem}.ppar"));
    let mut params = ModelParams::load(&ppar, spec)?;
    model::freeze_layers(&mut params, spec, &cfg.freeze)?;
    let bytes = fs::read(&ppar).map_err(|e| Error::io(&ppar, e))?;
    let file = model::decode_ppar::<f32>(&bytes)?;
    let d = spec.embedding_dim();
    let mut rows = Vec::with_capacity(spec.classes * d);
    for j in 0..spec.classes {
        let name = format!("center.{j}");
        let t = file.get(&name).ok_or(Error::MissingParam(name))?;
        rows.extend_from_slice(t.data());
    }
    let centers = ClassCenters::from_tensor(
        Tensor::new(vec![spec.classes, d], rows)?,
        cfg.center_alpha as f32,
    )?;
    let json = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    Ok((params, centers, serde_json::from_str(&text)?))
}

/// Loss history as `step,softmax,center,total`.
pub fn write_loss_csv(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,softmax,center,total").unwrap();
    for (i, l) in history.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            i + 1,
            l.softmax_loss,
            l.center_loss,
            l.total
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;

    fn one_param(v: f64, trainable: bool) -> ModelParams<f64> {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::scalar(v), ParamKind::Weight);
        p.set_trainable("w", trainable).unwrap();
        p
    }

    fn grads(g: f64) -> GradientRecord<f64> {
        let mut r = GradientRecord::default();
        r.insert("w", Tensor::scalar(g));
        r
    }

    #[test]
    fn sgd_hand_example() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = one_param(1.0, true);
        let mut buf = IndexMap::new();
        sgd_step(&mut p, &grads(0.1), &mut buf, &cfg).unwrap();
        assert!((p.get("w").unwrap().item().unwrap() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let cfg = OptimizerConfig {
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = one_param(2.0, true);
        let mut buf = IndexMap::new();
        sgd_step(&mut p, &grads(1.0), &mut buf, &cfg).unwrap();
        // v = 1 + 0.2 = 1.2; p = 2 − 0.6
        assert!((p.get("w").unwrap().item().unwrap() - 1.4).abs() < 1e-12);
        sgd_step(&mut p, &grads(1.0), &mut buf, &cfg).unwrap();
        // v = 1.08 + 1 + 0.14 = 2.22; p = 1.4 − 1.11
        assert!((p.get("w").unwrap().item().unwrap() - 0.29).abs() < 1e-12);
    }

    #[test]
    fn sgd_fixed_point_and_frozen() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = one_param(1.5, true);
        let mut buf = IndexMap::new();
        sgd_step(&mut p, &grads(0.0), &mut buf, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().item().unwrap(), 1.5);

        let mut frozen = one_param(1.5, false);
        sgd_step(&mut frozen, &grads(3.0), &mut IndexMap::new(), &cfg).unwrap();
        assert_eq!(
            frozen.get("w").unwrap().item().unwrap().to_bits(),
            1.5f64.to_bits()
        );
    }

    #[test]
    fn sgd_rejects_mismatched_gradient() {
        let mut p = one_param(1.0, true);
        let mut g = GradientRecord::default();
        g.insert("w", Tensor::zeros(vec![2]));
        assert!(sgd_step(
            &mut p,
            &g,
            &mut IndexMap::new(),
            &OptimizerConfig::default()
        )
        .is_err());
    }

    #[test]
    fn config_validation_and_hash() {
        let cfg = OptimizerConfig::default();
        cfg.validate().unwrap();
        assert!(OptimizerConfig {
            epochs: 0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            lr: 0.0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            lambda: -1.0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        let h = config_hash(&cfg).unwrap();
        assert_eq!(h, config_hash(&cfg.clone()).unwrap());
        assert_ne!(h, config_hash(&OptimizerConfig { seed: 1, ..cfg }).unwrap());
        let err =
            serde_json::from_str::<OptimizerConfig>(r#"{"lr": 0.1, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}

//! Leave-one-subject-out evaluation: fold plans, confusion matrices, F1
//! reports, and the frame-duration and loss ablations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::{LabelField, Manifest};
use crate::error::{Error, Result};
use crate::losses::DEFAULT_LAMBDA;
use crate::model::NetworkSpec;
use crate::tensor::Tensor;
use crate::trainer::{self, OptimizerConfig, PreparedData};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LosoFold {
    pub test_subject: String,
    pub train_subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LosoPlan {
    pub folds: Vec<LosoFold>,
}

impl LosoPlan {
    /// One fold per distinct subject, in sorted order.
    pub fn from_subjects<S: AsRef<str>>(subjects: &[S]) -> Result<Self> {
        let mut ids: Vec<String> = subjects.iter().map(|s| s.as_ref().to_string()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() < 2 {
            return Err(Error::Invalid(format!(
                "leave-one-subject-out needs at least 2 subjects, found {}",
                ids.len()
            )));
        }
        let folds = ids
            .iter()
            .map(|test| LosoFold {
                test_subject: test.clone(),
                train_subjects: ids.iter().filter(|s| *s != test).cloned().collect(),
            })
            .collect();
        Ok(LosoPlan { folds })
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }
}

impl LosoFold {
    /// `(train, test)` sample indices given each sample's subject.
    pub fn split<S: AsRef<str>>(&self, subject_of: &[S]) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in subject_of.iter().enumerate() {
            let s = s.as_ref();
            if s == self.test_subject {
                test.push(i);
            } else if self.train_subjects.iter().any(|t| t == s) {
                train.push(i);
            }
        }
        (train, test)
    }
}

pub fn loso_split(manifest: &Manifest) -> Result<LosoPlan> {
    LosoPlan::from_subjects(&manifest.subjects())
}

/// Fails unless no training sample belongs to the held-out subject and every
/// test sample does.
pub fn check_disjoint<S: AsRef<str>>(
    subject_of: &[S],
    train: &[usize],
    test: &[usize],
    test_subject: &str,
) -> Result<()> {
    if let Some(&i) = train
        .iter()
        .find(|&&i| subject_of[i].as_ref() == test_subject)
    {
        return Err(Error::Invalid(format!(
            "fold leak: training sample {i} belongs to held-out subject {test_subject}"
        )));
    }
    if let Some(&i) = test
        .iter()
        .find(|&&i| subject_of[i].as_ref() != test_subject)
    {
        return Err(Error::Invalid(format!(
            "fold leak: test sample {i} belongs to {}, not {test_subject}",
            subject_of[i].as_ref()
        )));
    }
    Ok(())
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Invalid(format!(
                "{} true labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            for label in [t, p] {
                if label >= classes {
                    return Err(Error::Label { label, classes });
                }
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Invalid(format!(
                "cannot add a {}-class matrix to a {}-class one",
                other.classes(),
                self.classes()
            )));
        }
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(o) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Plot-ready grid: header `true\predicted,<names>`, one row per true class.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<ClassScore>,
    /// Unweighted mean over classes that occur in the truth or predictions.
    pub macro_f1: f64,
    /// Pooled accuracy (micro-averaged F1 for single-label data).
    pub micro_f1: f64,
    /// Classes left out of the macro mean: no true and no predicted samples.
    pub excluded: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1 (0/0 counts as 0), macro and micro F1.
pub fn f1_report(cm: &ConfusionMatrix, names: &[String]) -> F1Report {
    let n = cm.classes();
    let mut per_class = Vec::with_capacity(n);
    let mut excluded = Vec::new();
    let mut sum = 0.0;
    for k in 0..n {
        let tp = cm.counts[k][k];
        let support: u64 = cm.counts[k].iter().sum();
        let predicted: u64 = cm.counts.iter().map(|r| r[k]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support == 0 && predicted == 0 {
            excluded.push(k);
        } else {
            sum += f1;
        }
        per_class.push(ClassScore {
            class: names.get(k).cloned().unwrap_or_else(|| k.to_string()),
            precision,
            recall,
            f1,
            support,
        });
    }
    let counted = n - excluded.len();
    let trace: u64 = (0..n).map(|k| cm.counts[k][k]).sum();
    F1Report {
        per_class,
        macro_f1: if counted == 0 {
            0.0
        } else {
            sum / counted as f64
        },
        micro_f1: ratio(trace, cm.total()),
        excluded,
    }
}

/// Mean squared distance of each embedding to its class mean.
pub fn intra_class_variance(embeddings: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "intra_class_variance",
            format!("embeddings {shape:?} for {} labels", labels.len()),
        ));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let d = shape[1];
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut means = vec![vec![0.0f64; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in embeddings.data().chunks(d).zip(labels) {
        counts[y] += 1;
        for (m, &v) in means[y].iter_mut().zip(row) {
            *m += f64::from(v);
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        if c > 0 {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    let total: f64 = embeddings
        .data()
        .chunks(d)
        .zip(labels)
        .map(|(row, &y)| {
            row.iter()
                .zip(&means[y])
                .map(|(&v, m)| (f64::from(v) - m).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Predictions for a fold's test samples, in test-index order.
#[derive(Debug, Clone)]
pub struct FoldPrediction {
    pub predictions: Vec<usize>,
    /// Test embeddings (`len × d`), when the learner has them.
    pub embeddings: Option<Tensor<f32>>,
}

/// Anything that can be trained on one index set and scored on another.
pub trait Learner: Sync {
    fn fit_predict(&self, train: &[usize], test: &[usize], seed: u64) -> Result<FoldPrediction>;
}

/// Always predicts one class; wires the harness without training.
#[derive(Debug, Clone, Copy)]
pub struct ConstantLearner(pub usize);

impl Learner for ConstantLearner {
    fn fit_predict(&self, _train: &[usize], test: &[usize], _seed: u64) -> Result<FoldPrediction> {
        Ok(FoldPrediction {
            predictions: vec![self.0; test.len()],
            embeddings: None,
        })
    }
}

/// Trains the network from scratch on each fold.
pub struct NetworkLearner<'a> {
    pub data: &'a PreparedData,
    pub spec: NetworkSpec,
    pub cfg: OptimizerConfig,
    pub task: LabelField,
}

impl Learner for NetworkLearner<'_> {
    fn fit_predict(&self, train: &[usize], test: &[usize], seed: u64) -> Result<FoldPrediction> {
        let cfg = OptimizerConfig {
            seed,
            ..self.cfg.clone()
        };
        let state = trainer::train(self.data, train, &cfg, self.task, &self.spec)?;
        let (predictions, embeddings) =
            trainer::predict(&state.params, &self.spec, self.data, test, cfg.batch_size)?;
        Ok(FoldPrediction {
            predictions,
            embeddings: Some(embeddings),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub subject: String,
    pub seed: u64,
    pub samples: usize,
    pub confusion: ConfusionMatrix,
    /// Macro F1 on the held-out subject.
    pub macro_f1: f64,
    pub intra_class_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: LabelField,
    pub classes: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub pooled: ConfusionMatrix,
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// Sample-weighted mean over folds of the held-out intra-class variance.
    pub intra_class_variance: Option<f64>,
    /// Set only once every fold has finished; serialized last.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LosoOptions {
    pub seed: u64,
    pub workers: usize,
    pub config_hash: String,
}

impl Default for LosoOptions {
    fn default() -> Self {
        LosoOptions {
            seed: 0,
            workers: 1,
            config_hash: String::new(),
        }
    }
}

/// Seed of fold `index`: the global seed plus the fold index.
pub fn fold_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

fn run_fold(
    plan: &LosoPlan,
    index: usize,
    subject_of: &[String],
    labels: &[usize],
    task: LabelField,
    learner: &dyn Learner,
    seed: u64,
) -> Result<FoldReport> {
    let fold = &plan.folds[index];
    let (train, test) = fold.split(subject_of);
    check_disjoint(subject_of, &train, &test, &fold.test_subject)?;
    let seed = fold_seed(seed, index);
    let out = learner.fit_predict(&train, &test, seed)?;
    if out.predictions.len() != test.len() {
        return Err(Error::Invalid(format!(
            "learner returned {} predictions for {} test samples",
            out.predictions.len(),
            test.len()
        )));
    }
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let confusion = ConfusionMatrix::from_predictions(&truth, &out.predictions, task.classes())?;
    let names = class_names(task);
    let variance = out
        .embeddings
        .as_ref()
        .map(|e| intra_class_variance(e, &truth))
        .transpose()?;
    Ok(FoldReport {
        fold: index,
        subject: fold.test_subject.clone(),
        seed,
        samples: test.len(),
        macro_f1: f1_report(&confusion, &names).macro_f1,
        confusion,
        intra_class_variance: variance,
    })
}

pub fn class_names(task: LabelField) -> Vec<String> {
    (0..task.classes()).map(|k| task.class_name(k)).collect()
}

/// Runs every fold of the plan built from `subject_of` and pools the results.
/// Folds are spread over `opts.workers` threads; each fold's result depends
/// only on its own seed, so the report is the same for any worker count.
pub fn run_loso(
    subject_of: &[String],
    labels: &[usize],
    task: LabelField,
    learner: &dyn Learner,
    opts: &LosoOptions,
    on_fold: &(dyn Fn(&FoldReport) + Sync),
) -> Result<EvaluationReport> {
    if subject_of.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} subjects for {} labels",
            subject_of.len(),
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= task.classes()) {
        return Err(Error::Label {
            label,
            classes: task.classes(),
        });
    }
    let plan = LosoPlan::from_subjects(subject_of)?;
    let workers = opts.workers.clamp(1, plan.len());
    let mut results: Vec<Option<Result<FoldReport>>> = (0..plan.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for w in 0..workers {
            let tx = tx.clone();
            let plan = &plan;
            scope.spawn(move || {
                for index in (w..plan.len()).step_by(workers) {
                    let r = run_fold(plan, index, subject_of, labels, task, learner, opts.seed);
                    if let Ok(f) = &r {
                        on_fold(f);
                    }
                    let failed = r.is_err();
                    if tx.send((index, r)).is_err() || failed {
                        break;
                    }
                }
            });
        }
        drop(tx);
        for (index, r) in rx {
            results[index] = Some(r);
        }
    });
    let mut folds = Vec::with_capacity(plan.len());
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Some(r) => folds.push(r?),
            None => return Err(Error::Invalid(format!("fold {index} did not run"))),
        }
    }
    let mut pooled = ConfusionMatrix::new(task.classes());
    for f in &folds {
        pooled.add(&f.confusion)?;
    }
    let names = class_names(task);
    let f1 = f1_report(&pooled, &names);
    let variance = if folds.iter().all(|f| f.intra_class_variance.is_some()) {
        let n: usize = folds.iter().map(|f| f.samples).sum();
        let s: f64 = folds
            .iter()
            .map(|f| f.intra_class_variance.unwrap_or(0.0) * f.samples as f64)
            .sum();
        Some(if n == 0 { 0.0 } else { s / n as f64 })
    } else {
        None
    };
    Ok(EvaluationReport {
        task,
        classes: names,
        config_hash: opts.config_hash.clone(),
        seed: opts.seed,
        folds,
        pooled,
        per_class: f1.per_class,
        macro_f1: f1.macro_f1,
        micro_f1: f1.micro_f1,
        intra_class_variance: variance,
        complete: true,
    })
}

/// Writes `contents` to `path` through a temporary file and a rename, so a
/// crash never leaves a half-written file under the final name.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// `<stem>.json` plus `<stem>_subjects.csv` (`fold,subject,f1`),
/// `<stem>_classes.csv` (`class,precision,recall,f1`) and
/// `<stem>_confusion.csv`. The JSON is written last.
pub fn write_report(report: &EvaluationReport, dir: &Path, stem: &str) -> Result<()> {
    let mut subjects = String::from("fold,subject,f1\n");
    for f in &report.folds {
        let _ = writeln!(subjects, "{},{},{:.6}", f.fold, f.subject, f.macro_f1);
    }
    let mut classes = String::from("class,precision,recall,f1\n");
    for c in &report.per_class {
        let _ = writeln!(
            classes,
            "{},{:.6},{:.6},{:.6}",
            c.class, c.precision, c.recall, c.f1
        );
    }
    write_atomic(
        &dir.join(format!("{stem}_subjects.csv")),
        subjects.as_bytes(),
    )?;
    write_atomic(&dir.join(format!("{stem}_classes.csv")), classes.as_bytes())?;
    write_atomic(
        &dir.join(format!("{stem}_confusion.csv")),
        report.pooled.to_csv(&report.classes).as_bytes(),
    )?;
    write_atomic(
        &dir.join(format!("{stem}.json")),
        to_json(report)?.as_bytes(),
    )
}

pub fn load_report(path: &Path) -> Result<EvaluationReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Macro F1 at one clip length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationRow {
    pub frames: usize,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDurationReport {
    pub task: LabelField,
    pub seed: u64,
    pub rows: Vec<DurationRow>,
    pub runs: Vec<EvaluationReport>,
    pub complete: bool,
}

impl FrameDurationReport {
    /// `frames,macro_f1`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frames,macro_f1\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6}", r.frames, r.macro_f1);
        }
        out
    }
}

/// `frames,macro_f1,wall_seconds` — kept apart from the report because wall
/// time differs between otherwise identical runs.
pub fn timing_csv(rows: &[DurationRow], times: &[Duration]) -> String {
    let mut out = String::from("frames,macro_f1,wall_seconds\n");
    for (r, t) in rows.iter().zip(times) {
        let _ = writeln!(out, "{},{:.6},{:.3}", r.frames, r.macro_f1, t.as_secs_f64());
    }
    out
}

/// One LOSO run per frame duration with everything else fixed.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_frame_duration(
    manifest: &Manifest,
    dir: &Path,
    base: &OptimizerConfig,
    spec: &NetworkSpec,
    durations: &[usize],
    task: LabelField,
    opts: &LosoOptions,
    on_fold: &(dyn Fn(&FoldReport) + Sync),
) -> Result<(FrameDurationReport, Vec<Duration>)> {
    if durations.is_empty() {
        return Err(Error::Config(
            "frame-duration ablation needs at least one duration".into(),
        ));
    }
    if let Some(&n) = durations.iter().find(|&&n| n == 0) {
        return Err(Error::Config(format!(
            "frame duration must be ≥ 1, got {n}"
        )));
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut times = Vec::new();
    for &frames in durations {
        let start = Instant::now();
        let data = PreparedData::load(manifest, dir, frames)?;
        let learner = NetworkLearner {
            data: &data,
            spec: NetworkSpec {
                frames,
                ..spec.clone()
            },
            cfg: OptimizerConfig {
                frames,
                ..base.clone()
            },
            task,
        };
        let report = run_loso(
            &data.subjects,
            &data.labels(&all(&data), task),
            task,
            &learner,
            opts,
            on_fold,
        )?;
        times.push(start.elapsed());
        rows.push(DurationRow {
            frames,
            macro_f1: report.macro_f1,
        });
        runs.push(report);
    }
    Ok((
        FrameDurationReport {
            task,
            seed: opts.seed,
            rows,
            runs,
            complete: true,
        },
        times,
    ))
}

fn all(data: &PreparedData) -> Vec<usize> {
    (0..data.len()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossArm {
    /// `softmax` or `softmax+center`.
    pub mode: String,
    pub lambda: f64,
    pub macro_f1: f64,
    pub intra_class_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossAblationReport {
    pub task: LabelField,
    pub seed: u64,
    pub arms: Vec<LossArm>,
    pub runs: Vec<EvaluationReport>,
    pub complete: bool,
}

impl LossAblationReport {
    /// `mode,lambda,macro_f1,intra_class_variance`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,lambda,macro_f1,intra_class_variance\n");
        for a in &self.arms {
            let v = a
                .intra_class_variance
                .map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{},{},{:.6},{v}", a.mode, a.lambda, a.macro_f1);
        }
        out
    }
}

/// λ of the two loss-ablation arms.
pub const LOSS_ARMS: [f64; 2] = [0.0, DEFAULT_LAMBDA];

/// Two LOSO runs that differ only in λ; both start from the same seed and
/// therefore the same initialization.
pub fn run_ablation_loss(
    data: &PreparedData,
    base: &OptimizerConfig,
    spec: &NetworkSpec,
    task: LabelField,
    opts: &LosoOptions,
    on_fold: &(dyn Fn(&FoldReport) + Sync),
) -> Result<LossAblationReport> {
    let labels = data.labels(&all(data), task);
    let mut arms = Vec::new();
    let mut runs = Vec::new();
    for lambda in LOSS_ARMS {
        let learner = NetworkLearner {
            data,
            spec: spec.clone(),
            cfg: OptimizerConfig {
                lambda,
                ..base.clone()
            },
            task,
        };
        let report = run_loso(&data.subjects, &labels, task, &learner, opts, on_fold)?;
        arms.push(LossArm {
            mode: if lambda > 0.0 {
                "softmax+center"
            } else {
                "softmax"
            }
            .into(),
            lambda,
            macro_f1: report.macro_f1,
            intra_class_variance: report.intra_class_variance,
        });
        runs.push(report);
    }
    Ok(LossAblationReport {
        task,
        seed: opts.seed,
        arms,
        runs,
        complete: true,
    })
}

use std::fs;
use std::path::Path;

use palsy::dataset::{self, LabelField};
use palsy::eval::{
    self, f1_report, run_ablation_frame_duration, run_ablation_loss, run_loso, timing_csv,
    write_atomic, ConfusionMatrix, FoldReport, LosoOptions, NetworkLearner,
};
use palsy::facefuse::{self, LandmarkHeatmaps, VisibilityWeights};
use palsy::gradcheck::{run_gradcheck, CheckOp, GradcheckConfig};
use palsy::trainer::{self, config_hash, PreparedData};
use palsy::Tensor;

use crate::config::RunConfig;
use crate::Failure;

/// Fixed-point with at most six decimals and no trailing zeros.
pub fn fmt_num(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn progress(total: usize) -> impl Fn(&FoldReport) + Sync {
    move |f: &FoldReport| {
        eprintln!(
            "fold {}/{total} subject {} macro_f1={}",
            f.fold + 1,
            f.subject,
            fmt_num(f.macro_f1)
        )
    }
}

fn options(cfg: &RunConfig, workers: usize) -> Result<LosoOptions, Failure> {
    if workers == 0 {
        return Err(Failure::Config("--workers must be at least 1".into()));
    }
    Ok(LosoOptions {
        seed: cfg.seed,
        workers,
        config_hash: config_hash(cfg)?,
    })
}

fn headline(task: LabelField, f1: f64) {
    println!("task={} macro_f1={}", task.name(), fmt_num(f1));
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    Ok(write_atomic(path, text.as_bytes())?)
}

pub fn generate(config: &Path, seed: Option<&str>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config, seed)?;
    cfg.synthetic.validate()?;
    fs::create_dir_all(&cfg.dataset_dir)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", cfg.dataset_dir.display())))?;
    let manifest = dataset::generate_dataset(&cfg.synthetic, &cfg.dataset_dir)?;
    println!(
        "samples={} manifest={}",
        manifest.records.len(),
        cfg.manifest_path().display()
    );
    Ok(())
}

pub fn train(config: &Path, seed: Option<&str>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config, seed)?;
    let (spec, manifest) = cfg.validate_for_training()?;
    let data = PreparedData::load(&manifest, &cfg.dataset_dir, cfg.optimizer.frames)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    let steps_per_epoch = all.len().div_ceil(cfg.optimizer.batch_size);
    let state = trainer::train_with(&data, &all, &cfg.optimizer, cfg.task, &spec, |s, loss| {
        history.push(*loss);
        if s.steps() % steps_per_epoch == 0 {
            eprintln!(
                "epoch {} loss={}",
                s.steps() / steps_per_epoch,
                fmt_num(loss.total)
            );
        }
    })?;
    trainer::save_checkpoint(&cfg.output_dir, "model", &state, &cfg.optimizer)?;
    trainer::write_loss_csv(&cfg.output_dir.join("loss.csv"), &history)?;
    let (pred, _) = trainer::predict(&state.params, &spec, &data, &all, cfg.optimizer.batch_size)?;
    let truth = data.labels(&all, cfg.task);
    let cm = ConfusionMatrix::from_predictions(&truth, &pred, cfg.task.classes())?;
    // Training-set score: there is no held-out subject here.
    headline(
        cfg.task,
        f1_report(&cm, &eval::class_names(cfg.task)).macro_f1,
    );
    Ok(())
}

pub fn loso(config: &Path, seed: Option<&str>, workers: usize) -> Result<(), Failure> {
    let cfg = RunConfig::load(config, seed)?;
    let opts = options(&cfg, workers)?;
    let (spec, manifest) = cfg.validate_for_training()?;
    let data = PreparedData::load(&manifest, &cfg.dataset_dir, cfg.optimizer.frames)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let learner = NetworkLearner {
        data: &data,
        spec,
        cfg: cfg.optimizer.clone(),
        task: cfg.task,
    };
    let folds = manifest.subjects().len();
    let report = run_loso(
        &data.subjects,
        &data.labels(&all, cfg.task),
        cfg.task,
        &learner,
        &opts,
        &progress(folds),
    )?;
    eval::write_report(
        &report,
        &cfg.output_dir,
        &format!("loso_{}", cfg.task.name()),
    )?;
    headline(cfg.task, report.macro_f1);
    Ok(())
}

pub fn ablate_frame_duration(
    config: &Path,
    seed: Option<&str>,
    workers: usize,
) -> Result<(), Failure> {
    let cfg = RunConfig::load(config, seed)?;
    let opts = options(&cfg, workers)?;
    let (spec, manifest) = cfg.validate_for_training()?;
    let folds = manifest.subjects().len();
    let (report, times) = run_ablation_frame_duration(
        &manifest,
        &cfg.dataset_dir,
        &cfg.optimizer,
        &spec,
        &cfg.durations,
        cfg.task,
        &opts,
        &progress(folds),
    )?;
    let stem = cfg
        .output_dir
        .join(format!("ablation_frame_duration_{}", cfg.task.name()));
    write_text(&stem.with_extension("csv"), &report.to_csv())?;
    write_text(
        &path_with_suffix(&stem, "_timing.csv"),
        &timing_csv(&report.rows, &times),
    )?;
    write_text(&stem.with_extension("json"), &eval::to_json(&report)?)?;
    for r in &report.rows {
        println!(
            "task={} frames={} macro_f1={}",
            cfg.task.name(),
            r.frames,
            fmt_num(r.macro_f1)
        );
    }
    Ok(())
}

pub fn ablate_loss(config: &Path, seed: Option<&str>, workers: usize) -> Result<(), Failure> {
    let cfg = RunConfig::load(config, seed)?;
    let opts = options(&cfg, workers)?;
    let (spec, manifest) = cfg.validate_for_training()?;
    let data = PreparedData::load(&manifest, &cfg.dataset_dir, cfg.optimizer.frames)?;
    let folds = manifest.subjects().len();
    let report = run_ablation_loss(
        &data,
        &cfg.optimizer,
        &spec,
        cfg.task,
        &opts,
        &progress(folds),
    )?;
    let stem = cfg
        .output_dir
        .join(format!("ablation_loss_{}", cfg.task.name()));
    write_text(&stem.with_extension("csv"), &report.to_csv())?;
    write_text(&stem.with_extension("json"), &eval::to_json(&report)?)?;
    for a in &report.arms {
        let var = a.intra_class_variance.map_or("-".into(), fmt_num);
        println!(
            "task={} mode={} macro_f1={} intra_class_variance={var}",
            cfg.task.name(),
            a.mode,
            fmt_num(a.macro_f1)
        );
    }
    Ok(())
}

fn path_with_suffix(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

/// Every failure here is a malformed input.
fn bad_input(e: palsy::Error) -> Failure {
    Failure::Config(e.to_string())
}

pub fn fuse_score(heatmaps: &Path, candidates: &Path, gamma: Option<&Path>) -> Result<(), Failure> {
    let maps: Tensor<f64> = Tensor::load(heatmaps).map_err(bad_input)?;
    let h = LandmarkHeatmaps::new(maps).map_err(bad_input)?;
    let weights = match gamma {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let values = text
                .split_whitespace()
                .map(|w| w.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            VisibilityWeights::new(values).map_err(bad_input)?
        }
        None => VisibilityWeights::uniform(h.len()),
    };
    let cands = facefuse::load_candidates::<f64>(candidates).map_err(bad_input)?;
    let scores = facefuse::score_candidates(&h, &weights, &cands).map_err(bad_input)?;
    for s in scores {
        println!(
            "{} {} {}",
            fmt_num(s.p_fan),
            fmt_num(s.delta),
            fmt_num(s.p_face)
        );
    }
    Ok(())
}

pub fn gradcheck(
    selector: &str,
    seed: u64,
    instances: usize,
    corrupt: Option<&str>,
) -> Result<(), Failure> {
    let cfg = GradcheckConfig {
        ops: CheckOp::select(selector)?,
        instances,
        seed,
        corrupt: corrupt.map(str::parse).transpose()?,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    for r in &report.ops {
        eprintln!(
            "{:<24} instances={} partials={} max_rel_error={:.3e}",
            r.op.name(),
            r.instances,
            r.partials,
            r.max_rel_error
        );
    }
    if let Some(w) = report.worst() {
        println!(
            "worst op={} max_rel_error={:.3e} input={} instance={}",
            w.op, w.max_rel_error, w.worst_input, w.worst_instance
        );
    }
    let failed: Vec<String> = report
        .failures()
        .map(|r| format!("{} ({:.3e})", r.op, r.max_rel_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check failed (tolerance {:.0e}): {}",
            report.tolerance,
            failed.join(", ")
        )))
    }
}

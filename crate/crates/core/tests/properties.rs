use std::collections::BTreeSet;
use std::sync::Mutex;

use palsy::dataset::{LabelField, WeightedSampler};
use palsy::eval::{
    self, f1_report, ConfusionMatrix, FoldPrediction, Learner, LosoOptions, LosoPlan,
};
use palsy::facefuse::{self, FaceCandidate, LandmarkHeatmaps, VisibilityWeights};
use palsy::losses::{self, ClassCenters};
use palsy::model::{self, Mode, ModelParams, NetworkSpec};
use palsy::videopipe::{self, normalized_indices, AugmentationConfig, MotionLabel, VideoSequence};
use palsy::{Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

fn clip(t: usize, h: usize, w: usize, seed: u64) -> VideoSequence<f64> {
    let frames = Tensor::from_fn(vec![t, h, w, 3], |i| {
        ((i as u64).wrapping_mul(2_654_435_761).wrapping_add(seed) % 1000) as f64 / 999.0
    });
    VideoSequence::new(frames, "s07", MotionLabel::MouthOpen, 4).unwrap()
}

fn frame(seq: &VideoSequence<f64>, i: usize) -> &[f64] {
    let (_, h, w, c) = seq.dims();
    &seq.frames().data()[i * h * w * c..(i + 1) * h * w * c]
}

#[test]
fn normalize_frames_matches_floor_map_exhaustively() {
    for t in 1..=32 {
        let seq = clip(t, 2, 2, t as u64);
        for n in 1..=32 {
            let out = videopipe::normalize_frames(&seq, n).unwrap();
            assert_eq!(out.dims().0, n, "T={t} n={n}");
            for i in 0..n {
                assert_eq!(frame(&out, i), frame(&seq, i * t / n), "T={t} n={n} i={i}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn normalized_indices_are_nondecreasing_and_idempotent(t in 1usize..64, n in 1usize..64, seed in any::<u64>()) {
        let idx = normalized_indices(t, n);
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < t));
        let seq = clip(t, 1, 2, seed);
        let once = videopipe::normalize_frames(&seq, n).unwrap();
        let twice = videopipe::normalize_frames(&once, n).unwrap();
        prop_assert!(once.frames().bitwise_eq(twice.frames()));
    }

    #[test]
    fn resize_stays_within_input_range(h in 2usize..12, w in 2usize..12, size in 1usize..20, seed in any::<u64>()) {
        let seq = clip(2, h, w, seed);
        let d = seq.frames().data();
        let (lo, hi) = d.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let out = videopipe::resize_spatial(&seq, size).unwrap();
        prop_assert!(out.frames().data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn augment_keeps_labels(seed in any::<u64>()) {
        let seq = clip(3, 8, 8, seed);
        let cfg = AugmentationConfig { flip_prob: 1.0, rotation_prob: 1.0, jitter_prob: 1.0, ..AugmentationConfig::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let out = videopipe::augment(&seq, &cfg, &mut rng);
        prop_assert_eq!(&out.subject_id, &seq.subject_id);
        prop_assert_eq!(out.motion_label, seq.motion_label);
        prop_assert_eq!(out.palsy_grade, seq.palsy_grade);
        prop_assert_eq!(out.dims(), seq.dims());
    }
}

/// Records what every fold saw.
struct Spy {
    subjects: Vec<String>,
    seen: Mutex<Vec<(Vec<usize>, Vec<usize>)>>,
}

impl Learner for Spy {
    fn fit_predict(&self, train: &[usize], test: &[usize], _seed: u64) -> Result<FoldPrediction> {
        self.seen
            .lock()
            .unwrap()
            .push((train.to_vec(), test.to_vec()));
        Ok(FoldPrediction {
            predictions: test.iter().map(|&i| i % 4).collect(),
            embeddings: None,
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 160, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn loso_folds_are_disjoint_and_cover_everything(
        subject_ix in prop::collection::vec(0usize..12, 2..80),
        workers in 1usize..4,
    ) {
        let subjects: Vec<String> = subject_ix.iter().map(|i| format!("p{i:02}")).collect();
        let distinct: BTreeSet<&String> = subjects.iter().collect();
        prop_assume!(distinct.len() >= 2);
        let labels: Vec<usize> = (0..subjects.len()).map(|i| (i * 7) % 4).collect();
        let spy = Spy { subjects: subjects.clone(), seen: Mutex::new(Vec::new()) };
        let opts = LosoOptions { workers, ..LosoOptions::default() };
        let report = eval::run_loso(&subjects, &labels, LabelField::Motion, &spy, &opts, &|_| {}).unwrap();
        prop_assert_eq!(report.folds.len(), distinct.len());
        prop_assert_eq!(report.pooled.total() as usize, subjects.len());
        let seen = spy.seen.into_inner().unwrap();
        let mut tested = vec![0usize; subjects.len()];
        for (train, test) in &seen {
            let held: BTreeSet<&String> = test.iter().map(|&i| &spy.subjects[i]).collect();
            prop_assert_eq!(held.len(), 1);
            let held = *held.iter().next().unwrap();
            prop_assert!(train.iter().all(|&i| &spy.subjects[i] != held));
            prop_assert_eq!(train.len() + test.len(), subjects.len());
            test.iter().for_each(|&i| tested[i] += 1);
        }
        prop_assert!(tested.iter().all(|&c| c == 1));

        let plan = LosoPlan::from_subjects(&subjects).unwrap();
        for fold in &plan.folds {
            prop_assert!(!fold.train_subjects.contains(&fold.test_subject));
        }
    }

    #[test]
    fn confusion_total_and_scores_are_bounded(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 0..200),
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, 5).unwrap();
        prop_assert_eq!(cm.total() as usize, pairs.len());
        let names: Vec<String> = (0..5).map(|k| k.to_string()).collect();
        let r = f1_report(&cm, &names);
        for c in &r.per_class {
            for v in [c.precision, c.recall, c.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        prop_assert!((0.0..=1.0).contains(&r.macro_f1));
        let hits = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        if !pairs.is_empty() {
            prop_assert!((r.micro_f1 - hits as f64 / pairs.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn reports_survive_a_json_round_trip(
        subject_ix in prop::collection::vec(0usize..5, 2..40),
        class in 0usize..6,
        seed in any::<u64>(),
    ) {
        let subjects: Vec<String> = subject_ix.iter().map(|i| format!("q{i}")).collect();
        prop_assume!(subjects.iter().collect::<BTreeSet<_>>().len() >= 2);
        let labels: Vec<usize> = (0..subjects.len()).map(|i| i % 6).collect();
        let opts = LosoOptions { seed, ..LosoOptions::default() };
        let report = eval::run_loso(&subjects, &labels, LabelField::Grade, &eval::ConstantLearner(class), &opts, &|_| {}).unwrap();
        let json = eval::to_json(&report).unwrap();
        let back: eval::EvaluationReport = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(&back, &report);
        prop_assert_eq!(eval::to_json(&back).unwrap(), json);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sampler_class_frequencies_are_uniform(
        counts in prop::collection::vec(1usize..60, 2..7),
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let mut sampler = WeightedSampler::new(&labels, 1, seed).unwrap();
        let mut hits = vec![0usize; counts.len()];
        const DRAWS: usize = 100_000;
        for _ in 0..DRAWS {
            hits[labels[sampler.draw()]] += 1;
        }
        let uniform = 1.0 / counts.len() as f64;
        for (c, &h) in hits.iter().enumerate() {
            let f = h as f64 / DRAWS as f64;
            prop_assert!((f - uniform).abs() <= 0.01, "class {} frequency {} vs {}", c, f, uniform);
        }
    }
}

fn heatmaps(maxes: &[f64]) -> LandmarkHeatmaps<f64> {
    let data = maxes
        .iter()
        .flat_map(|&m| [m, m * 0.5, 0.0, m * 0.25])
        .collect();
    LandmarkHeatmaps::new(Tensor::new(vec![maxes.len(), 2, 2], data).unwrap()).unwrap()
}

fn candidate(det: f64, p_faster: f64) -> FaceCandidate<f64> {
    FaceCandidate {
        x: 0.0,
        y: 0.0,
        det,
        height: det,
        p_faster,
        img_width: 100.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn heatmap_confidence_is_monotone(
        maxes in prop::collection::vec(0.0f64..=1.0, 1..12),
        which in any::<prop::sample::Index>(),
        bump in 0.0f64..=1.0,
        occluded in prop::collection::vec(any::<bool>(), 12),
    ) {
        let gamma = VisibilityWeights::new(
            occluded[..maxes.len()].iter().map(|&o| if o { 0.75 } else { 1.0 }).collect(),
        ).unwrap();
        let i = which.index(maxes.len());
        let mut raised = maxes.clone();
        raised[i] = (raised[i] + bump).min(1.0);
        let a = facefuse::heatmap_confidence(&heatmaps(&maxes), &gamma).unwrap();
        let b = facefuse::heatmap_confidence(&heatmaps(&raised), &gamma).unwrap();
        prop_assert!(b >= a);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn fused_score_is_bounded_and_monotone(
        p_fan in 0.0f64..=1.0,
        p_faster in 0.0f64..=1.0,
        dp in 0.0f64..=1.0,
        det in 0.5f64..100.0,
    ) {
        let base = facefuse::fuse(p_fan, &candidate(det, p_faster)).unwrap();
        prop_assert!((0.0..=1.0).contains(&base.p_face));
        let more_fan = facefuse::fuse((p_fan + dp).min(1.0), &candidate(det, p_faster)).unwrap();
        let more_det = facefuse::fuse(p_fan, &candidate(det, (p_faster + dp).min(1.0))).unwrap();
        prop_assert!(more_fan.p_face >= base.p_face);
        prop_assert!(more_det.p_face >= base.p_face);
        let unpenalized = (p_fan + p_faster) / 2.0;
        prop_assert!(base.p_face <= unpenalized + 1e-15);
    }

    #[test]
    fn detection_loss_is_nonnegative_and_minimal_at_truth(
        truth in prop::collection::vec(any::<bool>(), 1..20),
        scores in prop::collection::vec(0.0f64..=1.0, 20),
    ) {
        let t: Vec<f64> = truth.iter().map(|&b| f64::from(u8::from(b))).collect();
        let s = &scores[..t.len()];
        let loss = facefuse::detection_loss(s, &t).unwrap();
        let best = facefuse::detection_loss(&t, &t).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(best <= loss + 1e-15);
        prop_assert!(best < 1e-6);
    }

    #[test]
    fn center_loss_ignores_a_common_translation(
        e in prop::collection::vec(-3.0f64..3.0, 12),
        c in prop::collection::vec(-3.0f64..3.0, 6),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let labels = [0, 1, 0, 1];
        let emb = Tensor::new(vec![4, 3], e).unwrap();
        let centers = ClassCenters::from_tensor(Tensor::new(vec![2, 3], c).unwrap(), 0.5).unwrap();
        let moved_e = Tensor::from_fn(vec![4, 3], |i| emb.data()[i] + shift[i % 3]);
        let moved_c = ClassCenters::from_tensor(
            Tensor::from_fn(vec![2, 3], |i| centers.centers().data()[i] + shift[i % 3]),
            0.5,
        ).unwrap();
        let a = losses::center_loss(&emb, &labels, &centers).unwrap();
        let b = losses::center_loss(&moved_e, &labels, &moved_c).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn total_loss_is_the_exact_affine_combination(s in 0.0f64..10.0, c in 0.0f64..1e4, lambda in 0.0f64..1.0) {
        let l = losses::total_loss(s, c, lambda).unwrap();
        prop_assert_eq!(l.total.to_bits(), (s + lambda * c).to_bits());
    }
}

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

fn batch(n: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_fn(vec![n, 3, 4, 16, 16], |i| {
        ((i as u64 * 7919 + seed * 104_729) % 1013) as f64 / 1012.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn eval_forward_is_pure_and_permutation_equivariant(seed in 0u64..1000) {
        let spec = tiny_spec();
        let p = ModelParams::<f64>::init(&spec, seed).unwrap();
        let x = batch(3, seed);
        let (e1, l1) = model::forward(&x, &spec, &p, Mode::Eval).unwrap();
        let (e2, l2) = model::forward(&x, &spec, &p, Mode::Eval).unwrap();
        prop_assert!(e1.bitwise_eq(&e2) && l1.bitwise_eq(&l2));

        // Reverse the batch; each row must follow its sample.
        let per = x.numel() / 3;
        let rev: Vec<f64> = (0..3).rev().flat_map(|b| x.data()[b * per..(b + 1) * per].to_vec()).collect();
        let (_, lr) = model::forward(&Tensor::new(x.shape().to_vec(), rev).unwrap(), &spec, &p, Mode::Eval).unwrap();
        for b in 0..3 {
            for k in 0..3 {
                prop_assert!((l1.at(&[b, k]) - lr.at(&[2 - b, k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_batchnorm_scales_leave_only_the_head_bias(seed in 0u64..1000) {
        let spec = tiny_spec();
        let mut p = ModelParams::<f64>::init(&spec, seed).unwrap();
        let names: Vec<String> = p.names().filter(|n| n.ends_with(".scale") || n.ends_with(".shift")).map(String::from).collect();
        for n in names {
            p.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let bias = [0.25, -1.5, 3.0];
        p.get_mut("head.bias").unwrap().data_mut().copy_from_slice(&bias);
        for mode in [Mode::Eval, Mode::Train] {
            let (_, logits) = model::forward(&batch(2, seed), &spec, &p, mode).unwrap();
            for row in logits.data().chunks(3) {
                prop_assert_eq!(row, &bias[..]);
            }
        }
    }
}

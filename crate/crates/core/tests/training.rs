use palsy::dataset::LabelField;
use palsy::model::{self, FreezePolicy, Mode, ModelParams, NetworkSpec, ParamKind};
use palsy::trainer::{self, sgd_step, train_step, OptimizerConfig, PreparedData, TrainState};
use palsy::videopipe::{AugmentationConfig, MotionLabel, VideoSequence};
use palsy::{Tape, Tensor};

fn spec(classes: usize) -> NetworkSpec {
    NetworkSpec {
        in_channels: 3,
        stem_channels: 4,
        blocks: vec![1, 1],
        widths: vec![4, 6],
        classes,
        frames: 4,
        size: 112,
    }
}

fn data(per_class: usize) -> PreparedData {
    let mut clips = Vec::new();
    for (k, motion) in MotionLabel::ALL.into_iter().enumerate() {
        for r in 0..per_class {
            let frames = Tensor::from_fn(vec![6, 16, 16, 3], |i| {
                let phase = (i / 768) as f32 * (k as f32 + 1.0) * 0.3;
                (0.5 + 0.4 * ((i % 768) as f32 * 0.05 * (k + 1) as f32 + phase + r as f32).sin())
                    .clamp(0.0, 1.0)
            });
            clips.push(VideoSequence::new(frames, format!("s{r}"), motion, 1).unwrap());
        }
    }
    PreparedData::from_clips(clips, 4).unwrap()
}

fn cfg(epochs: usize) -> OptimizerConfig {
    OptimizerConfig {
        epochs,
        batch_size: 3,
        frames: 4,
        seed: 11,
        ..OptimizerConfig::default()
    }
}

/// Direct step tests skip `PreparedData`, so they can use small frames.
fn small(classes: usize) -> NetworkSpec {
    NetworkSpec {
        size: 32,
        ..spec(classes)
    }
}

fn input(n: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![n, 3, 4, 32, 32], |i| ((i * 37) % 101) as f64 / 100.0)
}

#[test]
fn zero_lambda_step_is_a_pure_softmax_step() {
    let spec = small(4);
    let cfg = OptimizerConfig {
        lambda: 0.0,
        ..cfg(1)
    };
    let x = input(3);
    let labels = [0, 2, 3];
    let mut state = TrainState::<f64>::new(&spec, &cfg).unwrap();
    let before = state.centers.clone();
    train_step(&mut state, &x, &labels, &spec, &cfg).unwrap();

    let mut params = ModelParams::<f64>::init(&spec, cfg.seed).unwrap();
    model::freeze_layers(&mut params, &spec, &cfg.freeze).unwrap();
    let mut buffers = Default::default();
    let tape = Tape::new();
    let out = model::forward_tape(&tape, tape.constant(x), &spec, &params, Mode::Train).unwrap();
    let ce = tape.softmax_cross_entropy(out.logits, &labels).unwrap();
    let grads = tape.backward(ce).unwrap();
    sgd_step(&mut params, &grads, &mut buffers, &cfg).unwrap();
    model::update_running_stats(&mut params, &out.bn_stats).unwrap();

    assert!(state.params.bitwise_eq(&params));
    assert_eq!(state.centers, before);
    assert_eq!(
        state.history[0].softmax_loss.to_bits(),
        tape.value(ce).item().unwrap().to_bits()
    );
}

#[test]
fn centers_move_only_for_classes_in_the_batch() {
    let spec = small(4);
    let cfg = cfg(1);
    let mut state = TrainState::<f64>::new(&spec, &cfg).unwrap();
    train_step(&mut state, &input(3), &[0, 2, 2], &spec, &cfg).unwrap();
    let d = spec.embedding_dim();
    for (k, moved) in [(0, true), (1, false), (2, true), (3, false)] {
        let changed = state.centers.center(k).iter().any(|&v| v != 0.0);
        assert_eq!(changed, moved, "class {k}");
        assert_eq!(state.centers.center(k).len(), d);
    }
    let l = state.history[0];
    assert_eq!(
        l.total.to_bits(),
        (l.softmax_loss + l.lambda * l.center_loss).to_bits()
    );
}

#[test]
fn single_sample_overfits() {
    let spec = small(4);
    // At lr 0.1 the loss reaches exact zero within 50 steps; 0.01 keeps it
    // above the rounding floor so strict decrease stays observable.
    let cfg = OptimizerConfig {
        freeze: FreezePolicy::None,
        lr: 0.01,
        ..cfg(1)
    };
    let mut state = TrainState::<f64>::new(&spec, &cfg).unwrap();
    let x = input(1);
    let mut x2 = x.clone().into_data();
    x2.extend_from_slice(x.data());
    let batch = Tensor::new(vec![2, 3, 4, 32, 32], x2).unwrap();
    let losses: Vec<f64> = (0..50)
        .map(|_| {
            train_step(&mut state, &batch, &[1, 1], &spec, &cfg)
                .unwrap()
                .softmax_loss
        })
        .collect();
    for w in losses[5..].windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
    assert!(losses[49] < 0.05 * losses[0], "{losses:?}");
}

#[test]
fn training_is_deterministic_and_bookkept() {
    let spec = spec(4);
    let data = data(2);
    let idx: Vec<usize> = (0..data.len()).collect();
    let cfg = cfg(2);
    let a = trainer::train(&data, &idx, &cfg, LabelField::Motion, &spec).unwrap();
    let b = trainer::train(&data, &idx, &cfg, LabelField::Motion, &spec).unwrap();
    assert!(a.params.bitwise_eq(&b.params));
    assert_eq!(a.history, b.history);
    assert_eq!(a.centers, b.centers);
    // 8 clips, batch 3 → 3 steps per epoch.
    assert_eq!(a.history.len(), 2 * 3);
    assert_eq!(a.epoch, 2);
    for (name, v) in &a.momentum {
        assert_eq!(v.shape(), a.params.get(name).unwrap().shape(), "{name}");
    }
    assert!(a
        .history
        .iter()
        .all(|l| l.total == l.softmax_loss + l.lambda * l.center_loss));
}

#[test]
fn zero_epochs_return_the_initialization() {
    let spec = spec(4);
    let data = data(1);
    let idx: Vec<usize> = (0..data.len()).collect();
    let cfg = cfg(0);
    let state = trainer::train(&data, &idx, &cfg, LabelField::Motion, &spec).unwrap();
    let mut init = ModelParams::<f32>::init(&spec, cfg.seed).unwrap();
    model::freeze_layers(&mut init, &spec, &cfg.freeze).unwrap();
    assert!(state.params.bitwise_eq(&init));
    assert!(state.history.is_empty());
}

#[test]
fn frozen_parameters_never_change() {
    let spec = spec(4);
    let data = data(2);
    let idx: Vec<usize> = (0..data.len()).collect();
    for freeze_bn_stats in [false, true] {
        let cfg = OptimizerConfig {
            freeze_bn_stats,
            augmentation: AugmentationConfig::disabled(),
            ..cfg(3)
        };
        let init = TrainState::<f32>::new(&spec, &cfg).unwrap().params;
        let state = trainer::train(&data, &idx, &cfg, LabelField::Motion, &spec).unwrap();
        let mut changed = 0;
        for (name, e) in init.iter().filter(|(_, e)| e.kind == ParamKind::Weight) {
            let after = state.params.get(name).unwrap();
            if e.trainable {
                changed += usize::from(!after.bitwise_eq(&e.value));
            } else {
                assert!(after.bitwise_eq(&e.value), "{name} moved");
            }
        }
        assert!(changed > 0);
    }
}

#[test]
fn missing_class_is_rejected() {
    let spec = spec(4);
    let data = data(1);
    assert!(trainer::train(&data, &[0, 1, 2], &cfg(1), LabelField::Motion, &spec).is_err());
}

use palsy::gradcheck::{run_gradcheck, sample_instance, CheckOp, GradcheckConfig, REL_TOLERANCE};
use palsy::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn default_suite_is_within_tolerance() {
    let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
    for r in &report.ops {
        println!(
            "{:<24} instances={} redrawn={} partials={} max_rel={:.3e}",
            r.op, r.instances, r.redrawn, r.partials, r.max_rel_error
        );
        assert!(r.instances >= 20);
        assert!(r.max_rel_error < REL_TOLERANCE, "{r:?}");
    }
    assert!(report.passed());
}

#[test]
fn every_corrupted_op_is_named() {
    for op in [CheckOp::Conv3d, CheckOp::BatchNorm3d, CheckOp::CenterLoss] {
        let cfg = GradcheckConfig {
            ops: CheckOp::ALL.to_vec(),
            instances: 1,
            corrupt: Some(op),
            ..GradcheckConfig::default()
        };
        let report = run_gradcheck(&cfg).unwrap();
        let failed: Vec<CheckOp> = report.failures().map(|r| r.op).collect();
        assert_eq!(failed, vec![op]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    // grad(a·L1 + b·L2) == a·grad(L1) + b·grad(L2)
    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = sample_instance(CheckOp::ReluComposite, &mut rng);
        let x: Tensor<f64> = inst.inputs[0].1.clone();
        let kernel = inst.inputs[1].1.clone();
        let grads = |wa: f64, wb: f64| {
            let tape = Tape::<f64>::new();
            let xv = tape.param("x", x.clone());
            let kv = tape.param("k", kernel.clone());
            let params = palsy::ops::Conv3dParams::valid();
            let y = tape.conv3d(xv, kv, None, params).ok()?;
            let l1 = tape.sum(y);
            let sq = tape.mul(y, y).unwrap();
            let l2 = tape.sum(sq);
            let s1 = tape.scale(l1, wa);
            let s2 = tape.scale(l2, wb);
            let total = tape.add(s1, s2).unwrap();
            Some(tape.backward(total).unwrap())
        };
        let Some(both) = grads(a, b) else { return Ok(()) };
        let g1 = grads(1.0, 0.0).unwrap();
        let g2 = grads(0.0, 1.0).unwrap();
        let combined = g1.combine(a, &g2, b).unwrap();
        for (name, g) in both.iter() {
            let diff = g.max_abs_diff(combined.get(name).unwrap()).unwrap();
            prop_assert!(diff <= 1e-6 * (1.0 + g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))), "{name}: {diff}");
        }
    }
}

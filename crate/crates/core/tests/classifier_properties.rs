use dmr_core::baselines::finetune_stage;
use dmr_core::classifier::{
    composite_loss, composite_loss_grad, mixup_enhance, train_stage, Batch, LinearClassifier,
    TrainConfig,
};
use dmr_core::feature_store::FeatureRecord;
use dmr_core::memory::{ClassMemory, Fidelity, MemoryBank, MemoryComponent, Spread};
use proptest::prelude::*;

fn classifier_strategy() -> impl Strategy<Value = LinearClassifier> {
    (1usize..5, 2usize..5).prop_flat_map(|(d, c)| {
        (
            proptest::collection::vec(-2.0f64..2.0, d * c),
            proptest::collection::vec(-2.0f64..2.0, c),
        )
            .prop_map(move |(w, b)| {
                LinearClassifier::from_parts(d, (0..c as u32).collect(), w, b).unwrap()
            })
    })
}

fn batch_for(clf: &LinearClassifier, raw: &[(Vec<f64>, u32)]) -> Batch {
    let d = clf.dim();
    let c = clf.num_classes() as u32;
    Batch::new(
        raw.iter()
            .map(|(x, _)| x.iter().cycle().take(d).copied().collect())
            .collect(),
        raw.iter().map(|(_, y)| y % c).collect(),
    )
    .unwrap()
}

fn raw_batch() -> impl Strategy<Value = Vec<(Vec<f64>, u32)>> {
    proptest::collection::vec((proptest::collection::vec(-3.0f64..3.0, 4), 0u32..10), 0..5)
}

proptest! {
    #[test]
    fn gradient_matches_central_differences(
        clf in classifier_strategy(),
        a in raw_batch(), b in raw_batch(), m in raw_batch(),
        xi in 0.0f64..=1.0,
    ) {
        let (bn, bp, bm) = (batch_for(&clf, &a), batch_for(&clf, &b), batch_for(&clf, &m));
        let g = composite_loss_grad(&bn, &bp, &bm, &clf, xi).unwrap();
        let h = 1e-5;
        let (w, bias) = (clf.weights().to_vec(), clf.bias().to_vec());
        for i in 0..w.len() + bias.len() {
            let at = |delta: f64| {
                let (mut w2, mut b2) = (w.clone(), bias.clone());
                if i < w.len() { w2[i] += delta } else { b2[i - w.len()] += delta }
                let c2 = LinearClassifier::from_parts(clf.dim(), clf.class_order().to_vec(), w2, b2).unwrap();
                composite_loss(&bn, &bp, &bm, &c2, xi).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let an = if i < w.len() { g.grad_weights[i] } else { g.grad_bias[i - w.len()] };
            prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
        }
    }

    #[test]
    fn shifting_all_biases_leaves_the_loss_unchanged(
        clf in classifier_strategy(), a in raw_batch(), shift in -5.0f64..5.0,
    ) {
        let bn = batch_for(&clf, &a);
        let empty = Batch::default();
        let shifted = LinearClassifier::from_parts(
            clf.dim(),
            clf.class_order().to_vec(),
            clf.weights().to_vec(),
            clf.bias().iter().map(|b| b + shift).collect(),
        ).unwrap();
        let l0 = composite_loss(&bn, &empty, &empty, &clf, 1.0).unwrap();
        let l1 = composite_loss(&bn, &empty, &empty, &shifted, 1.0).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-10 * l0.abs().max(1.0));
    }

    #[test]
    fn expansion_keeps_old_logits_bitwise(
        clf in classifier_strategy(), x in proptest::collection::vec(-3.0f64..3.0, 4),
    ) {
        let x: Vec<f64> = x.iter().cycle().take(clf.dim()).copied().collect();
        let grown = clf.expand(&[100, 50]).unwrap();
        let before = clf.logits(&x);
        let after = grown.logits(&x);
        for (i, &c) in clf.class_order().iter().enumerate() {
            prop_assert_eq!(before[i].to_bits(), after[grown.index_of(c).unwrap()].to_bits());
        }
        prop_assert_eq!(after[grown.index_of(50).unwrap()], 0.0);
    }

    #[test]
    fn mixup_stays_on_the_segment(
        e in proptest::collection::vec(-5.0f64..5.0, 3),
        p in proptest::collection::vec(-5.0f64..5.0, 3),
        lambda in 0.0f64..=1.0,
    ) {
        let m = mixup_enhance(&e, &p, lambda).unwrap();
        for j in 0..3 {
            let (lo, hi) = (e[j].min(p[j]), e[j].max(p[j]));
            prop_assert!(m[j] >= lo - 1e-12 && m[j] <= hi + 1e-12);
            prop_assert!((m[j] - (lambda * e[j] + (1.0 - lambda) * p[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_matches_brute_force_argmax(
        clf in classifier_strategy(), xs in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 1..10),
    ) {
        let xs: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().cycle().take(clf.dim()).copied().collect()).collect();
        let preds = clf.predict(&xs).unwrap();
        for (x, p) in xs.iter().zip(preds) {
            let mut best = (f64::NEG_INFINITY, 0u32);
            for (k, &c) in clf.class_order().iter().enumerate() {
                let z: f64 = clf.bias()[k] + clf.column(k).iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                if z > best.0 {
                    best = (z, c);
                }
            }
            prop_assert_eq!(p, best.1);
        }
    }
}

#[test]
fn prediction_ties_go_to_the_lowest_class() {
    let clf = LinearClassifier::from_parts(1, vec![3, 8], vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
    assert_eq!(clf.predict(&[vec![2.0]]).unwrap(), vec![3]);
}

#[test]
fn classifier_bytes_round_trip() {
    let clf =
        LinearClassifier::from_parts(2, vec![1, 4], vec![0.1, -0.2, 0.3, 1e-300], vec![5.0, -7.5])
            .unwrap();
    assert_eq!(LinearClassifier::from_bytes(&clf.to_bytes()).unwrap(), clf);
}

fn blob_records(classes: &[u32], per_class: usize, spacing: f64) -> Vec<FeatureRecord> {
    let mut out = Vec::new();
    for &c in classes {
        for i in 0..per_class {
            let jitter = (i as f64 * 0.37).sin() * 0.3;
            let mut v = vec![jitter, -jitter];
            v[(c % 2) as usize] += spacing * (1.0 + c as f64);
            out.push(FeatureRecord::new(v, c));
        }
    }
    out
}

#[test]
fn separable_base_task_is_learned_perfectly() {
    let records = blob_records(&[0, 1, 2], 30, 3.0);
    let cfg = TrainConfig {
        seed: 4,
        ..TrainConfig::default()
    };
    let clf = train_stage(
        &LinearClassifier::new(2),
        &records,
        &MemoryBank::new(2),
        &cfg,
    )
    .unwrap();
    let xs: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
    let preds = clf.predict(&xs).unwrap();
    assert!(preds.iter().zip(&records).all(|(p, r)| *p == r.class_id));
}

#[test]
fn no_replay_and_no_mixing_reduces_to_finetuning() {
    let base = blob_records(&[0, 1], 20, 3.0);
    let task = blob_records(&[2, 3], 20, 3.0);
    let cfg = TrainConfig {
        seed: 11,
        epochs: 5,
        ..TrainConfig::default()
    };
    let clf = train_stage(&LinearClassifier::new(2), &base, &MemoryBank::new(2), &cfg).unwrap();
    let mut bank = MemoryBank::new(2);
    for c in [0, 1] {
        let comp = MemoryComponent {
            weight: 1.0,
            mean: vec![c as f64, 0.0],
            spread: Spread::ScalarStd(1.0),
        };
        bank.insert(ClassMemory::new(c, Fidelity::DmrLite, vec![comp]).unwrap())
            .unwrap();
    }
    let replay_cfg = TrainConfig {
        xi: 1.0,
        pseudo_per_class: Some(0),
        ..cfg.clone()
    };
    let a = train_stage(&clf, &task, &bank, &replay_cfg).unwrap();
    let b = finetune_stage(&clf, &task, &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn missing_old_class_in_a_non_empty_bank_is_an_error() {
    let base = blob_records(&[0, 1], 10, 3.0);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let clf = train_stage(&LinearClassifier::new(2), &base, &MemoryBank::new(2), &cfg).unwrap();
    let mut bank = MemoryBank::new(2);
    let comp = MemoryComponent {
        weight: 1.0,
        mean: vec![0.0, 0.0],
        spread: Spread::ScalarStd(1.0),
    };
    bank.insert(ClassMemory::new(0, Fidelity::DmrLite, vec![comp]).unwrap())
        .unwrap();
    let err = train_stage(&clf, &blob_records(&[2], 10, 3.0), &bank, &cfg).unwrap_err();
    assert!(matches!(err, dmr_core::Error::UnknownClass(1)));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err =
        serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "lerning_rate": 0.1}"#).unwrap_err();
    assert!(err.to_string().contains("lerning_rate"));
    let cfg: TrainConfig =
        serde_json::from_str(r#"{"batch_size": 8, "learning_rate": 0.1}"#).unwrap();
    assert_eq!((cfg.batch_size, cfg.learning_rate), (8, 0.1));
}

use std::collections::BTreeMap;

use dmr_core::metrics::{confusion_index, stage_accuracy, CiPooling};
use proptest::prelude::*;

/// Classes 0..3 belong to task 0, 3..6 to task 1, 6..9 to task 2.
fn tasks() -> BTreeMap<u32, u32> {
    (0..9).map(|c| (c, c / 3)).collect()
}

fn pairs() -> impl Strategy<Value = Vec<(u32, u32)>> {
    proptest::collection::vec((0u32..9, 0u32..9), 0..60)
}

proptest! {
    #[test]
    fn confusion_index_is_bounded_and_matches_counting(xs in pairs(), all in any::<bool>()) {
        let (preds, labels): (Vec<u32>, Vec<u32>) = xs.iter().copied().unzip();
        let pooling = if all { CiPooling::All } else { CiPooling::Previous };
        let got = confusion_index(&preds, &labels, &tasks(), 2, pooling).unwrap();
        prop_assert!((0.0..=2.0).contains(&got.c_i));

        let old = |c: u32| if all { c / 3 < 2 } else { c / 3 == 1 };
        let new = |c: u32| c / 3 == 2;
        let o = labels.iter().filter(|&&l| old(l)).count();
        let n = labels.iter().filter(|&&l| new(l)).count();
        let m_new = xs.iter().filter(|(p, l)| old(*l) && new(*p)).count();
        let m_old = xs.iter().filter(|(p, l)| new(*l) && old(*p)).count();
        prop_assert_eq!((got.o, got.n, got.m_new, got.m_old), (o, n, m_new, m_old));
        let rate = |m: usize, t: usize| if t == 0 { 0.0 } else { m as f64 / t as f64 };
        prop_assert_eq!(got.c_i, rate(m_new, o) + rate(m_old, n));
    }

    #[test]
    fn mistakes_inside_a_task_do_not_change_confusion(xs in pairs(), shift in 1u32..3) {
        let (preds, labels): (Vec<u32>, Vec<u32>) = xs.iter().copied().unzip();
        let within: Vec<u32> = preds.iter().map(|p| p / 3 * 3 + (p % 3 + shift) % 3).collect();
        let a = confusion_index(&preds, &labels, &tasks(), 2, CiPooling::All).unwrap();
        let b = confusion_index(&within, &labels, &tasks(), 2, CiPooling::All).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn accuracy_counts_matches(xs in proptest::collection::vec((0u32..4, 0u32..4), 1..50)) {
        let (preds, labels): (Vec<u32>, Vec<u32>) = xs.iter().copied().unzip();
        let hits = xs.iter().filter(|(p, l)| p == l).count();
        prop_assert_eq!(stage_accuracy(&preds, &labels).unwrap(), 100.0 * hits as f64 / xs.len() as f64);
    }
}

#[test]
fn perfect_predictions_have_no_confusion() {
    let labels: Vec<u32> = (0..9).collect();
    let c = confusion_index(&labels, &labels, &tasks(), 2, CiPooling::All).unwrap();
    assert_eq!((c.c_i, c.o, c.n), (0.0, 6, 3));
}

#[test]
fn total_swap_reaches_the_upper_bound() {
    let labels = vec![0, 1, 6, 7];
    let preds = vec![6, 7, 0, 1];
    let c = confusion_index(&preds, &labels, &tasks(), 2, CiPooling::All).unwrap();
    assert_eq!(c.c_i, 2.0);
}

#[test]
fn unknown_prediction_is_an_error() {
    assert!(confusion_index(&[42], &[0], &tasks(), 2, CiPooling::All).is_err());
}

mod common;

use common::{random_labels, TABLE_COLUMNS};
use ecgdx::metrics::{confusion, f1_per_label, macro_f1, Counts, MetricsError, Report};
use ecgdx::record::{Label, LabelVector, NUM_LABELS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn published_averages_reproduce() {
    for (f1, avg) in TABLE_COLUMNS {
        let m = macro_f1(&f1);
        assert!((m - avg).abs() <= 0.0005, "{m} vs {avg}");
    }
}

#[test]
fn f1_hand_cases() {
    assert_eq!(Counts { tp: 10, fp: 0, tn: 0, fn_: 0 }.f1(), 1.0);
    assert!((Counts { tp: 8, fp: 2, tn: 0, fn_: 2 }.f1() - 0.8).abs() < 1e-12);
    assert_eq!(Counts { tp: 0, fp: 0, tn: 3, fn_: 5 }.f1(), 0.0);
    assert_eq!(macro_f1(&[1.0; 9]), 1.0);
}

#[test]
fn single_mislabel() {
    let c =
        confusion(&[LabelVector::from_abnormalities([Label::Af])], &[LabelVector::from_abnormalities([Label::Pac])])
            .unwrap();
    assert_eq!(c.label(Label::Af).fp, 1);
    assert_eq!(c.label(Label::Pac).fn_, 1);
    assert!(matches!(confusion(&[LabelVector::normal()], &[]), Err(MetricsError::LengthMismatch { .. })));
}

#[test]
fn counts_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let preds: Vec<LabelVector> = (0..100).map(|_| random_labels(&mut rng)).collect();
    let truths: Vec<LabelVector> = (0..100).map(|_| random_labels(&mut rng)).collect();
    let c = confusion(&preds, &truths).unwrap();
    for (i, l) in Label::ALL.iter().enumerate() {
        let mut naive = [0usize; 4];
        for r in 0..100 {
            let (p, t) = (preds[r].flags()[i], truths[r].flags()[i]);
            naive[match (p, t) {
                (true, true) => 0,
                (true, false) => 1,
                (false, false) => 2,
                (false, true) => 3,
            }] += 1;
        }
        let got = c.label(*l);
        assert_eq!([got.tp, got.fp, got.tn, got.fn_], naive, "{l:?}");
    }
}

#[test]
fn report_layout() {
    let truths = vec![LabelVector::normal(), LabelVector::from_abnormalities([Label::Pvc])];
    let r = Report::from_predictions(&truths, &truths).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "label,tp,fp,tn,fn,f1");
    assert_eq!(lines.len(), 1 + NUM_LABELS + 1);
    assert!(lines[1].starts_with("Normal,1,0,1,0,"));
    assert!(lines[NUM_LABELS + 1].starts_with("Average,"));
    assert!(r.to_text().contains("Average"));
}

proptest! {
    #[test]
    fn macro_f1_bounded_and_order_free(f1 in prop::array::uniform9(0.0f64..=1.0), seed in any::<u64>()) {
        let m = macro_f1(&f1);
        prop_assert!((0.0..=1.0).contains(&m));
        let mut p = f1;
        rand::seq::SliceRandom::shuffle(&mut p[..], &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((macro_f1(&p) - m).abs() < 1e-12);
    }

    #[test]
    fn counts_partition_records(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<LabelVector> = (0..n).map(|_| random_labels(&mut rng)).collect();
        let truths: Vec<LabelVector> = (0..n).map(|_| random_labels(&mut rng)).collect();
        let c = confusion(&preds, &truths).unwrap();
        for l in Label::ALL {
            prop_assert_eq!(c.label(l).total(), n);
        }
        prop_assert!(f1_per_label(&c).iter().all(|f| (0.0..=1.0).contains(f)));
        let same = confusion(&truths, &truths).unwrap();
        prop_assert!(Label::ALL.iter().all(|&l| same.label(l).fp == 0 && same.label(l).fn_ == 0));
    }
}

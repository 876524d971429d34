mod common;

use common::tiny_model;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttct_core::constraint::Family;
use ttct_core::error::Error;
use ttct_core::predictor::*;

fn brute_auc(items: &[(f64, bool)]) -> f64 {
    let mut w = 0.0;
    let mut n = 0.0;
    for a in items.iter().filter(|x| x.1) {
        for b in items.iter().filter(|x| !x.1) {
            n += 1.0;
            w += if a.0 > b.0 {
                1.0
            } else if a.0 == b.0 {
                0.5
            } else {
                0.0
            };
        }
    }
    w / n
}

#[test]
fn separated_scores() {
    let items = [(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
    let roc = roc_curve(&items).unwrap();
    assert_eq!(auc(&roc), 1.0);
    let (beta, j) = youden_cutoff(&roc);
    assert_eq!(j, 1.0);
    assert!(beta > 0.3 && beta < 0.8);
    let m = metrics_at(&items, beta);
    assert_eq!((m.accuracy, m.recall, m.precision, m.f1), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn single_class_is_an_error() {
    assert!(matches!(roc_curve(&[(0.1, true), (0.3, true)]), Err(Error::Calibration(_))));
    assert!(matches!(roc_curve(&[]), Err(Error::Calibration(_))));
}

#[test]
fn random_labels_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let items: Vec<(f64, bool)> = (0..1000).map(|_| (rng.gen::<f64>(), rng.gen_bool(0.5))).collect();
    let a = auc(&roc_curve(&items).unwrap());
    assert!((a - 0.5).abs() <= 0.05, "{a}");
}

#[test]
fn family_thresholds_fall_back_to_global() {
    let mut items = vec![];
    for (s, l) in [(0.9, true), (0.2, false)] {
        items.push(Scored { score: s, label: l, family: Family::Quantitative });
    }
    items.push(Scored { score: 0.5, label: true, family: Family::Sequential });
    let r = calibrate_scores(&items, true).unwrap();
    let fb = r.family_beta.clone().unwrap();
    assert!(fb.contains_key(&Family::Quantitative) && !fb.contains_key(&Family::Sequential));
    let p = CalibratedPredictor::new(tiny_model(0), r.clone()).unwrap();
    assert_eq!(p.beta_for(Family::Sequential), r.beta);
    assert_eq!(p.beta_for(Family::Quantitative), fb[&Family::Quantitative]);
}

#[test]
fn report_round_trip() {
    let items: Vec<Scored> =
        (0..20).map(|i| Scored { score: i as f64 / 20.0, label: i % 3 == 0, family: Family::Mathematical }).collect();
    let r = calibrate_scores(&items, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join(REPORT_FILE);
    r.save(&p).unwrap();
    assert_eq!(CalibrationReport::load(&p).unwrap(), r);
}

#[test]
fn threshold_rule() {
    let m = tiny_model(1);
    let d = m.d();
    let items = [
        Scored { score: 0.9, label: true, family: Family::Quantitative },
        Scored { score: 0.1, label: false, family: Family::Quantitative },
    ];
    let p = CalibratedPredictor::new(m, calibrate_scores(&items, false).unwrap()).unwrap();
    let h: Vec<f64> = (0..d).map(|i| i as f64 + 1.0).collect();
    let s = p.signal(&h, &h, 0.5);
    assert_eq!((s.c_hat, s.violated), (1.0, true));
    let neg: Vec<f64> = h.iter().map(|x| -x).collect();
    let s = p.signal(&h, &neg, 0.5);
    assert!(!s.violated && s.c_hat > 0.0 && s.c_hat < 1.0);
}

proptest! {
    #[test]
    fn trapezoid_matches_pairwise(raw in prop::collection::vec((0u8..20, any::<bool>()), 2..200)) {
        let items: Vec<(f64, bool)> = raw.iter().map(|&(s, l)| (s as f64 / 7.0, l)).collect();
        prop_assume!(items.iter().any(|x| x.1) && items.iter().any(|x| !x.1));
        let roc = roc_curve(&items).unwrap();
        prop_assert!((auc(&roc) - brute_auc(&items)).abs() <= 1e-9);
        let (beta, j) = youden_cutoff(&roc);
        let m = metrics_at(&items, beta);
        let fpr = 1.0 - {
            let neg = items.iter().filter(|x| !x.1).count() as f64;
            items.iter().filter(|x| !x.1 && x.0 < beta).count() as f64 / neg
        };
        prop_assert!((m.recall - fpr - j).abs() < 1e-12);
    }

    #[test]
    fn routing_invariants(sim_seed in 0u64..1000, beta in -1.0f64..1.0) {
        let m = tiny_model(2);
        let d = m.d();
        let report = calibrate_scores(&[
            Scored { score: 0.5, label: true, family: Family::Quantitative },
            Scored { score: 0.0, label: false, family: Family::Quantitative },
        ], false).unwrap();
        let p = CalibratedPredictor::new(m, report).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(sim_seed);
        let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = p.signal(&h, &l, beta);
        prop_assert_eq!(s.violated, s.sim >= beta);
        if s.violated {
            prop_assert_eq!(s.c_hat, 1.0);
        } else {
            prop_assert!(s.c_hat > 0.0 && s.c_hat < 1.0);
        }
    }
}

mod common;

use audiofault_core::dataset::Label;
use audiofault_core::metrics::{metric_suite, roc_auc, ConfusionMatrix};
use common::{brute_metrics, pairwise_auc};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: Option<f64>, b: Option<f64>, tol: f64, what: &str, cm: &ConfusionMatrix) {
    match (a, b) {
        (None, None) => {}
        (Some(x), Some(y)) => {
            assert!((x - y).abs() <= tol, "{what} on {cm:?}: {x} vs {y}");
        }
        _ => panic!("{what} definedness disagrees on {cm:?}: {a:?} vs {b:?}"),
    }
}

#[test]
fn thousand_random_matrices_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..1000 {
        // mix of scales, including degenerate rows/columns
        let max = [3u64, 10, 100, 1_000_000][i % 4];
        let tp = rng.random_range(0..=max);
        let tn = rng.random_range(0..=max);
        let fp = rng.random_range(0..=max);
        let fnn = rng.random_range(0..=max);
        if tp + tn + fp + fnn == 0 {
            continue;
        }
        let cm = ConfusionMatrix::new(tp, tn, fp, fnn);
        let suite = metric_suite(&cm);
        let brute = brute_metrics(tp, tn, fp, fnn);
        close(suite.accuracy, brute.accuracy, 1e-12, "accuracy", &cm);
        close(suite.precision, brute.precision, 1e-12, "precision", &cm);
        close(suite.recall, brute.recall, 1e-12, "recall", &cm);
        close(suite.f1, brute.f1, 1e-12, "f1", &cm);
        close(suite.kappa, brute.kappa, 1e-12, "kappa", &cm);
        close(suite.mcc, brute.mcc, 1e-12, "mcc", &cm);
    }
}

#[test]
fn random_predictions_have_near_zero_kappa_and_mcc() {
    // 10k uniformly random predictions against balanced random truth:
    // chance-corrected agreement concentrates near zero.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 10_000;
    let mut cm = ConfusionMatrix::new(0, 0, 0, 0);
    for _ in 0..n {
        let pred = rng.random_range(0..2) == 1;
        let truth = rng.random_range(0..2) == 1;
        match (pred, truth) {
            (true, true) => cm.tpc += 1,
            (false, false) => cm.tnc += 1,
            (true, false) => cm.fpc += 1,
            (false, true) => cm.fnc += 1,
        }
    }
    let s = metric_suite(&cm);
    assert!(s.kappa.unwrap().abs() < 0.05, "kappa {:?}", s.kappa);
    assert!(s.mcc.unwrap().abs() < 0.05, "mcc {:?}", s.mcc);
}

#[test]
fn rank_auc_equals_pairwise_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let n = rng.random_range(2..60);
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0..10) as f64) / 10.0) // coarse: forces ties
            .collect();
        let truths: Vec<Label> = (0..n)
            .map(|_| {
                if rng.random_range(0..2) == 1 {
                    Label::Abnormal
                } else {
                    Label::Normal
                }
            })
            .collect();
        let positives: Vec<bool> = truths.iter().map(|t| t.is_abnormal()).collect();
        let fast = roc_auc(&scores, &truths).unwrap();
        let slow = pairwise_auc(&scores, &positives);
        match (fast, slow) {
            (None, None) => {}
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            other => panic!("definedness mismatch: {other:?}"),
        }
    }
}

#[test]
fn auc_complement_under_score_negation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // distinct scores: no ties, so the complement identity is exact
    let scores: Vec<f64> = (0..40).map(|i| i as f64 + rng.random_range(0.0..0.5)).collect();
    let truths: Vec<Label> = (0..40)
        .map(|_| {
            if rng.random_range(0..2) == 1 {
                Label::Abnormal
            } else {
                Label::Normal
            }
        })
        .collect();
    let a = roc_auc(&scores, &truths).unwrap().unwrap();
    let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
    let b = roc_auc(&negated, &truths).unwrap().unwrap();
    assert!((a + b - 1.0).abs() < 1e-12);
}

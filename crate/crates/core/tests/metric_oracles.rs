mod oracles;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use viewseg::metrics::{frame_accuracy, segmental_edit_score, segmental_f1, F1_THRESHOLDS};

#[test]
fn edit_score_matches_quadratic_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let (pred, gt) = oracles::random_instance(&mut rng);
        assert_eq!(segmental_edit_score(&pred, &gt), oracles::edit_score(&pred, &gt), "{pred:?} {gt:?}");
    }
}

#[test]
fn f1_matches_reference_greedy_and_rarely_differs_from_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut total, mut disagreements) = (0, 0);
    for _ in 0..500 {
        let (pred, gt) = oracles::random_instance(&mut rng);
        for tau in F1_THRESHOLDS {
            let got = segmental_f1(&pred, &gt, tau).unwrap();
            assert_eq!(got, oracles::greedy_f1(&pred, &gt, tau), "{pred:?} {gt:?} tau {tau}");
            let best = oracles::optimal_f1(&pred, &gt, tau);
            assert!(got <= best);
            total += 1;
            if got != best {
                disagreements += 1;
            }
        }
    }
    assert!((disagreements as f64) < 0.02 * total as f64, "{disagreements} of {total}");
}

#[test]
fn f1_example_with_partial_overlaps() {
    let gt: Vec<u16> = [vec![0; 10], vec![1; 10]].concat();
    let pred: Vec<u16> = [vec![0; 4], vec![1; 16]].concat();
    assert_eq!(segmental_f1(&pred, &gt, 0.5).unwrap(), 50.0);
    assert_eq!(segmental_f1(&pred, &gt, 0.25).unwrap(), 100.0);
    assert_eq!(oracles::optimal_f1(&pred, &gt, 0.5), 50.0);
}

#[test]
fn edit_example() {
    let gt = [0, 1, 0];
    let pred = [0, 0, 1];
    assert!((segmental_edit_score(&pred, &gt) - 200.0 / 3.0).abs() < 1e-12);
}

#[test]
fn accuracy_counts_matching_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let (pred, gt) = oracles::random_instance(&mut rng);
        if gt.is_empty() {
            continue;
        }
        let hits = pred.iter().zip(&gt).filter(|(a, b)| a == b).count();
        assert_eq!(frame_accuracy(&pred, &gt).unwrap(), 100.0 * hits as f64 / gt.len() as f64);
    }
}

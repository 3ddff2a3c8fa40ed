//! EER and MinDCF against an exhaustive threshold enumeration that counts
//! errors directly at every candidate threshold.

use maccif_core::evaluation::{det_metrics, eer, min_dcf, Scored};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute force: every score, every midpoint and ±∞ as thresholds, rates
/// counted from scratch, crossing located by scanning in threshold order.
fn oracle(trials: &[Scored]) -> (f64, f64) {
    let mut cands: Vec<f64> = trials.iter().map(|t| t.score).collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut thresholds = vec![cands[0] - 1.0];
    for w in cands.windows(2) {
        thresholds.push((w[0] + w[1]) / 2.0);
    }
    thresholds.push(cands[cands.len() - 1] + 1.0);
    let n_t = trials.iter().filter(|t| t.target).count() as f64;
    let n_n = trials.len() as f64 - n_t;
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let miss = trials.iter().filter(|t| t.target && t.score <= th).count() as f64;
            let fa = trials.iter().filter(|t| !t.target && t.score > th).count() as f64;
            (miss / n_t, fa / n_n)
        })
        .collect();
    let mut eer = f64::NAN;
    for k in 0..rates.len() {
        let (m, f) = rates[k];
        if m >= f {
            eer = if m == f || k == 0 {
                f
            } else {
                let (m0, f0) = rates[k - 1];
                let t = (f0 - m0) / ((m - f) - (m0 - f0));
                f0 + t * (f - f0)
            };
            break;
        }
    }
    let dcf = rates
        .iter()
        .map(|&(m, f)| 0.01 * m + 0.99 * f)
        .fold(f64::INFINITY, f64::min)
        / 0.01;
    (eer, dcf)
}

fn random_set(rng: &mut ChaCha8Rng) -> Vec<Scored> {
    let n = rng.random_range(2..=1000);
    let separation = rng.random_range(0.0..3.0);
    let quantize = rng.random_bool(0.3);
    let mut out: Vec<Scored> = (0..n)
        .map(|i| {
            let target = i == 0 || (i != 1 && rng.random_bool(0.3));
            let mut score: f64 = rng.random_range(-1.0..1.0) + if target { separation } else { 0.0 };
            if quantize {
                score = (score * 4.0).round() / 4.0;
            }
            Scored { score, target }
        })
        .collect();
    out.swap(0, n - 1);
    out
}

#[test]
fn fifty_random_sets_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let set = random_set(&mut rng);
        let (e, d) = oracle(&set);
        let (got_e, _) = eer(&set).unwrap();
        let got_d = min_dcf(&set, 0.01, 1.0, 1.0).unwrap();
        assert!((got_e - e).abs() <= 1e-12, "eer {got_e} vs {e}");
        assert!((got_d - d).abs() <= 1e-12, "min_dcf {got_d} vs {d}");
    }
}

#[test]
fn four_targets_four_nontargets() {
    let set: Vec<Scored> = [0.9, 0.8, 0.6, 0.4]
        .iter()
        .map(|&score| Scored { score, target: true })
        .chain([0.7, 0.5, 0.3, 0.1].iter().map(|&score| Scored { score, target: false }))
        .collect();
    assert_eq!(eer(&set).unwrap().0, oracle(&set).0);
    assert_eq!(min_dcf(&set, 0.01, 1.0, 1.0).unwrap(), oracle(&set).1);
}

fn trial_set() -> impl Strategy<Value = Vec<Scored>> {
    prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..200)
        .prop_map(|v| v.into_iter().map(|(score, target)| Scored { score, target }).collect::<Vec<_>>())
        .prop_filter("both classes", |v| v.iter().any(|t| t.target) && v.iter().any(|t| !t.target))
}

proptest! {
    #[test]
    fn monotone_transform_invariance(set in trial_set()) {
        let warped: Vec<Scored> = set.iter().map(|t| Scored { score: (0.7 * t.score).exp() + 3.0, target: t.target }).collect();
        prop_assert_eq!(eer(&set).unwrap().0, eer(&warped).unwrap().0);
        prop_assert_eq!(min_dcf(&set, 0.01, 1.0, 1.0).unwrap(), min_dcf(&warped, 0.01, 1.0, 1.0).unwrap());
    }

    #[test]
    fn label_flip_symmetry(set in trial_set()) {
        let flipped: Vec<Scored> = set.iter().map(|t| Scored { score: -t.score, target: !t.target }).collect();
        prop_assert!((eer(&set).unwrap().0 - eer(&flipped).unwrap().0).abs() < 1e-12);
    }

    #[test]
    fn min_dcf_below_dcf_at_eer_threshold(set in trial_set()) {
        let m = det_metrics(&set).unwrap();
        let th = m.threshold_at_eer;
        let n_t = set.iter().filter(|t| t.target).count() as f64;
        let n_n = set.len() as f64 - n_t;
        let miss = set.iter().filter(|t| t.target && t.score <= th).count() as f64 / n_t;
        let fa = set.iter().filter(|t| !t.target && t.score > th).count() as f64 / n_n;
        prop_assert!(m.min_dcf <= (0.01 * miss + 0.99 * fa) / 0.01 + 1e-12);
        prop_assert!(m.min_dcf <= 1.0);
    }

    #[test]
    fn matches_oracle(set in trial_set()) {
        let (e, d) = oracle(&set);
        prop_assert!((eer(&set).unwrap().0 - e).abs() <= 1e-12);
        prop_assert!((min_dcf(&set, 0.01, 1.0, 1.0).unwrap() - d).abs() <= 1e-12);
    }
}

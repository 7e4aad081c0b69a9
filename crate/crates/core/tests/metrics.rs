use cft_core::dethead::DetectionBox;
use cft_core::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn det(x: f64, y: f64, class_id: usize, score: f64) -> DetectionBox {
    DetectionBox { center: [x, y, 0.5], size: [4.0, 2.0, 1.5], yaw: 0.0, velocity: [0.0, 0.0], class_id, score }
}

/// Synthetic evaluation: ground truth plus jittered, missing and spurious
/// predictions with random scores.
fn synthetic(seed: u64, scenes: usize, classes: usize) -> Vec<SceneDetections> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..scenes)
        .map(|_| {
            let n = rng.random_range(0..8);
            let gts: Vec<_> = (0..n)
                .map(|_| det(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(0..classes), 1.0))
                .collect();
            let mut preds = Vec::new();
            for g in &gts {
                if rng.random_bool(0.8) {
                    let j = rng.random_range(0.0..3.0);
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    preds.push(det(g.center[0] + j * a.cos(), g.center[1] + j * a.sin(), g.class_id, rng.random()));
                }
            }
            for _ in 0..rng.random_range(0..4) {
                preds.push(det(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(0..classes), rng.random()));
            }
            SceneDetections { gts, preds }
        })
        .collect()
}

/// Independent AP: brute-force matching over the globally score-sorted list,
/// then the 101-point curve evaluated segment by segment.
fn ap_oracle(scenes: &[SceneDetections], class: usize, threshold: f64) -> Option<f64> {
    let n_gt: usize = scenes.iter().map(|s| s.gts.iter().filter(|g| g.class_id == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut all: Vec<(usize, usize)> = Vec::new();
    for (s, sc) in scenes.iter().enumerate() {
        for (i, p) in sc.preds.iter().enumerate() {
            if p.class_id == class {
                all.push((s, i));
            }
        }
    }
    all.sort_by(|a, b| {
        let (pa, pb) = (&scenes[a.0].preds[a.1], &scenes[b.0].preds[b.1]);
        pb.score.partial_cmp(&pa.score).unwrap().then(a.cmp(b))
    });
    let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
    let mut curve = Vec::new();
    let mut tp = 0usize;
    for (k, &(s, i)) in all.iter().enumerate() {
        let p = &scenes[s].preds[i];
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (j, g) in scenes[s].gts.iter().enumerate() {
            let d = ((p.center[0] - g.center[0]).powi(2) + (p.center[1] - g.center[1]).powi(2)).sqrt();
            if !used[s][j] && g.class_id == class && d <= threshold && d < best_d {
                best = Some(j);
                best_d = d;
            }
        }
        if let Some(j) = best {
            used[s][j] = true;
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    if curve.is_empty() {
        return Some(0.0);
    }
    let at = |r: f64| -> f64 {
        if r < curve[0].0 {
            return curve[0].1;
        }
        let mut last = 0;
        for (k, c) in curve.iter().enumerate() {
            if c.0 <= r {
                last = k;
            }
        }
        if last + 1 == curve.len() {
            return if r == curve[last].0 { curve[last].1 } else { 0.0 };
        }
        let (a, b) = (curve[last], curve[last + 1]);
        a.1 + (r - a.0) / (b.0 - a.0) * (b.1 - a.1)
    };
    let mut total = 0.0;
    for i in 11..=100 {
        total += (at(i as f64 / 100.0) - 0.1).max(0.0);
    }
    Some(total / 90.0 / 0.9)
}

#[test]
fn ap_matches_brute_force_curve_integration() {
    for seed in 0..5 {
        let scenes = synthetic(seed, 20, 3);
        for class in 0..3 {
            for t in AP_THRESHOLDS {
                let (records, n_gt) = accumulate(&scenes, class, t);
                let got = average_precision(&records, n_gt);
                let want = ap_oracle(&scenes, class, t);
                match (got, want) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "seed {seed} class {class} t {t}: {a} vs {b}"),
                    (a, b) => assert_eq!(a, b),
                }
            }
        }
    }
}

/// Largest number of prediction/ground-truth pairs within `threshold` that
/// can be matched one-to-one, by exhaustive search.
fn max_matching(preds: &[DetectionBox], gts: &[DetectionBox], threshold: f64, i: usize, used: &mut Vec<bool>) -> usize {
    if i == preds.len() {
        return 0;
    }
    let mut best = max_matching(preds, gts, threshold, i + 1, used);
    for j in 0..gts.len() {
        if !used[j] && preds[i].planar_distance(&gts[j]) <= threshold {
            used[j] = true;
            best = best.max(1 + max_matching(preds, gts, threshold, i + 1, used));
            used[j] = false;
        }
    }
    best
}

#[test]
fn greedy_counts_are_consistent_with_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let gts: Vec<_> = (0..10).map(|_| det(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), 0, 1.0)).collect();
        let preds: Vec<_> = (0..10).map(|_| det(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), 0, rng.random())).collect();
        let m = match_scene(&preds, &gts, 0, 2.0);
        let tp = m.iter().flatten().count();
        let mut taken: Vec<_> = m.iter().flatten().copied().collect();
        taken.sort_unstable();
        taken.dedup();
        assert_eq!(taken.len(), tp, "a ground truth matched twice");
        assert!(tp <= max_matching(&preds, &gts, 2.0, 0, &mut vec![false; 10]));
        // replaying the greedy rule prediction by prediction in score order
        let mut order: Vec<usize> = (0..10).collect();
        order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap());
        let mut used = [false; 10];
        for i in order {
            let nearest = (0..10)
                .filter(|&j| !used[j] && preds[i].planar_distance(&gts[j]) <= 2.0)
                .min_by(|&a, &b| preds[i].planar_distance(&gts[a]).partial_cmp(&preds[i].planar_distance(&gts[b])).unwrap());
            assert_eq!(m[i], nearest);
            if let Some(j) = nearest {
                used[j] = true;
            }
        }
    }
}

/// Reported (NDS, mAP, mATE, mASE, mAOE, mAVE, mAAE) rows of the published
/// validation and test comparisons. Two further rows (0.448 and 0.442
/// reported) miss their own inputs by 0.0011 and 0.0016, beyond what three-
/// decimal rounding allows, and are checked only by the acceptance suite.
const REPORTED: [(f64, f64, f64, f64, f64, f64, f64); 12] = [
    (0.425, 0.346, 0.773, 0.268, 0.383, 0.842, 0.216),
    (0.408, 0.376, 0.659, 0.267, 0.543, 1.059, 0.335),
    (0.445, 0.335, 0.716, 0.277, 0.373, 0.671, 0.187),
    (0.444, 0.334, 0.715, 0.278, 0.374, 0.689, 0.177),
    (0.415, 0.307, 0.732, 0.276, 0.476, 0.713, 0.186),
    (0.434, 0.349, 0.716, 0.268, 0.379, 0.842, 0.200),
    (0.455, 0.343, 0.651, 0.274, 0.338, 0.716, 0.184),
    (0.479, 0.412, 0.641, 0.255, 0.394, 0.845, 0.133),
    (0.495, 0.435, 0.589, 0.254, 0.402, 0.842, 0.131),
    (0.504, 0.441, 0.593, 0.249, 0.383, 0.808, 0.132),
    (0.488, 0.424, 0.524, 0.242, 0.373, 0.950, 0.148),
    (0.497, 0.416, 0.518, 0.250, 0.390, 0.829, 0.124),
];

#[test]
fn reported_rows_reproduce_their_score() {
    for (want, map, ate, ase, aoe, ave, aae) in REPORTED {
        let got = nds(map, &TpErrors { ate, ase, aoe, ave, aae });
        assert!((got - want).abs() <= 0.001 + 1e-12, "{got} vs {want}");
    }
}

#[test]
fn error_above_one_contributes_nothing() {
    let tp = TpErrors { ate: 1.5, ase: 0.0, aoe: 0.0, ave: 0.0, aae: 0.0 };
    assert!((nds(1.0, &tp) - 0.9).abs() < 1e-15);
    assert_eq!(nds(1.0, &TpErrors { ate: 0.0, ..tp }), 1.0);
}

#[test]
fn empty_predictions_score_from_clamped_errors() {
    let scenes = vec![SceneDetections { gts: vec![det(1.0, 1.0, 0, 1.0)], preds: vec![] }];
    let r = evaluate(&scenes, &["car"]);
    assert_eq!(r.map, 0.0);
    assert_eq!(r.mean_tp(), TpErrors::WORST);
    assert_eq!(r.nds, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn ap_is_invariant_to_positive_score_scaling(seed in 0u64..1000, k in 0.01f64..100.0) {
        let scenes = synthetic(seed, 6, 2);
        let scaled: Vec<_> = scenes
            .iter()
            .map(|s| SceneDetections {
                gts: s.gts.clone(),
                preds: s.preds.iter().map(|p| DetectionBox { score: p.score * k, ..p.clone() }).collect(),
            })
            .collect();
        for class in 0..2 {
            let (a, na) = accumulate(&scenes, class, 2.0);
            let (b, nb) = accumulate(&scaled, class, 2.0);
            prop_assert_eq!(average_precision(&a, na), average_precision(&b, nb));
        }
    }

    #[test]
    fn score_is_monotone_in_each_input(
        map in 0.0f64..1.0,
        errs in proptest::array::uniform5(0.0f64..0.99),
        which in 0usize..5,
        dm in 0.0f64..0.5,
        de in 0.0f64..0.5,
    ) {
        let tp = |e: [f64; 5]| TpErrors { ate: e[0], ase: e[1], aoe: e[2], ave: e[3], aae: e[4] };
        let base = nds(map, &tp(errs));
        prop_assert!(nds((map + dm).min(1.0), &tp(errs)) >= base);
        let mut worse = errs;
        worse[which] += de;
        prop_assert!(nds(map, &tp(worse)) <= base);
        prop_assert!((0.0..=1.0).contains(&base));
    }
}

use cft_core::dethead::*;
use cft_core::encodings::BevConfig;
use cft_core::numerics::gradcheck::check_params;
use cft_core::numerics::{Graph, ParamStore, Tensor};
use cft_core::scenegen::{generate_scene, SceneConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bev(n: usize, c: usize) -> BevConfig {
    BevConfig {
        height: n,
        width: n,
        pos_channels: c,
        content_channels: c,
        x_range: (-51.2, 51.2),
        y_range: (-51.2, 51.2),
        z_range: (-3.0, 5.0),
    }
}

fn car(x: f64, y: f64) -> DetectionBox {
    DetectionBox { center: [x, y, 0.8], size: [4.5, 1.9, 1.6], yaw: -0.7, velocity: [1.0, -0.5], class_id: 0, score: 1.0 }
}

#[test]
fn desk_head_upsamples_four_times_into_unit_heatmap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = HeadConfig::new(3, 16);
    let mut store = ParamStore::<f32>::new();
    let head = DetHead::new(&mut store, "head", 32, &cfg, &mut rng).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let f_b = g.constant(Tensor::from_fn(&[256, 32], |i| ((i * 7919) % 97) as f32 / 48.0 - 1.0)).unwrap();
    let vars = head.forward(&mut g, &p, f_b, 16, 16).unwrap();
    let out = HeadOutput::from_graph(&g, vars, 64, 64);
    assert_eq!(out.heatmap.shape(), &[64 * 64, 3]);
    assert_eq!(out.regression.shape(), &[64 * 64, REG_CHANNELS]);
    assert!(out.heatmap.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(head.forward(&mut g, &p, f_b, 8, 8).is_err());
}

#[test]
fn head_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = HeadConfig::new(2, 4);
    let grid = output_grid(&BevConfig { x_range: (-8.0, 8.0), y_range: (-8.0, 8.0), ..bev(2, 4) });
    let targets = make_targets(&[DetectionBox { center: [1.3, -2.2, 0.5], ..car(0.0, 0.0) }], &grid, &cfg).unwrap();
    let mut store = ParamStore::<f64>::new();
    let f_b = store.add_normal("f_b", &[4, 4], 1.0, &mut rng);
    let head = DetHead::new(&mut store, "head", 4, &cfg, &mut rng).unwrap();
    let rep = check_params(&mut store, usize::MAX, |g, p| {
        let v = head.forward(g, p, p.get(f_b), 2, 2)?;
        let a = focal_loss(g, v.heat_logits, &targets)?;
        let b = reg_l1_loss(g, v.regression, &targets)?;
        g.add(a, b)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn focal_loss_at_one_half_matches_hand_evaluation() {
    // p = 0.5 everywhere: a positive costs 0.25·ln 2, a negative with soft
    // target t costs (1 − t)^4 · 0.25 · ln 2; one positive normalizes.
    let soft = [1.0, 0.0, 0.5, 0.25, 0.9, 0.0];
    let targets = Targets {
        heatmap: Tensor::new(&[6, 1], soft.to_vec()).unwrap(),
        regression: Tensor::zeros(&[6, REG_CHANNELS]),
        mask: vec![false; 6],
        skipped: 0,
    };
    let expect: f64 = soft.iter().map(|&t| if t == 1.0 { 1.0 } else { (1.0 - t).powi(4) }).sum::<f64>() * 0.25 * 2f64.ln();
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[6, 1])).unwrap();
    let l = focal_loss(&mut g, logits, &targets).unwrap();
    assert!((g.value(l).item() - expect).abs() < 1e-12);
}

#[test]
fn perfect_predictions_have_near_zero_losses() {
    let grid = output_grid(&bev(4, 8));
    let t = make_targets(&[car(3.0, -7.0)], &grid, &HeadConfig::new(1, 4)).unwrap();
    // a hard one-hot heatmap is reachable by saturated logits
    let hard: Vec<f64> = t.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let logits: Vec<f64> = hard.iter().map(|&v| if v == 1.0 { 40.0 } else { -40.0 }).collect();
    let hard = Targets { heatmap: Tensor::new(t.heatmap.shape(), hard).unwrap(), ..t.clone() };
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::new(t.heatmap.shape(), logits).unwrap()).unwrap();
    let reg = g.constant(t.regression.clone()).unwrap();
    let f = focal_loss(&mut g, logits, &hard).unwrap();
    let r = reg_l1_loss(&mut g, reg, &t).unwrap();
    assert!(g.value(f).item() < 1e-7);
    assert_eq!(g.value(r).item(), 0.0);
}

#[test]
fn focal_loss_falls_as_positive_logit_rises() {
    let targets = Targets {
        heatmap: Tensor::new(&[2, 1], vec![1.0, 0.3]).unwrap(),
        regression: Tensor::zeros(&[2, REG_CHANNELS]),
        mask: vec![false; 2],
        skipped: 0,
    };
    let mut prev = f64::INFINITY;
    for k in -20..20 {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::new(&[2, 1], vec![k as f64 * 0.4, -1.0]).unwrap()).unwrap();
        let v = focal_loss(&mut g, logits, &targets).unwrap();
        let l = g.value(v).item();
        assert!(l >= 0.0 && l < prev, "{k}: {l} vs {prev}");
        prev = l;
    }
}

#[test]
fn regression_l1_over_one_masked_cell() {
    let mut mask = vec![false; 5];
    mask[3] = true;
    let targets = Targets { heatmap: Tensor::zeros(&[5, 1]), regression: Tensor::zeros(&[5, REG_CHANNELS]), mask, skipped: 0 };
    let mut g = Graph::<f64>::new();
    let pred = g.constant(Tensor::from_fn(&[5, REG_CHANNELS], |i| if i / REG_CHANNELS == 3 { if i % 2 == 0 { 0.3 } else { -0.3 } } else { 9.0 })).unwrap();
    let l = reg_l1_loss(&mut g, pred, &targets).unwrap();
    assert!((g.value(l).item() - 0.3).abs() < 1e-15);
    let empty = Targets { mask: vec![false; 5], ..targets };
    let l = reg_l1_loss(&mut g, pred, &empty).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn overlapping_objects_take_the_elementwise_max() {
    let grid = output_grid(&bev(16, 8));
    let cfg = HeadConfig::new(1, 4);
    let (a, b) = (car(10.3, 4.1), car(12.9, 5.0));
    let ta = make_targets(&[a.clone()], &grid, &cfg).unwrap();
    let tb = make_targets(&[b.clone()], &grid, &cfg).unwrap();
    let both = make_targets(&[a, b], &grid, &cfg).unwrap();
    let overlap = ta.heatmap.data().iter().zip(tb.heatmap.data()).filter(|(x, y)| **x > 0.0 && **y > 0.0).count();
    assert!(overlap > 0);
    for ((x, y), z) in ta.heatmap.data().iter().zip(tb.heatmap.data()).zip(both.heatmap.data()) {
        assert_eq!(*z, x.max(*y));
    }
}

#[test]
fn targets_decode_back_to_every_generated_box() {
    let scene = SceneConfig::standard(64, 64, (-51.2, 51.2), (-51.2, 51.2));
    let rig = scene.rig().unwrap();
    let grid = output_grid(&bev(16, 8));
    let cfg = HeadConfig::new(scene.classes.len(), 8);
    let (sx, sy) = grid.cell_size();
    let diagonal = sx.hypot(sy);
    for seed in 0..100 {
        let s = generate_scene(seed, &scene, &rig).unwrap();
        let t = make_targets(&s.boxes, &grid, &cfg).unwrap();
        let found = decode(&targets_as_output(&t, &grid), &grid, &cfg).unwrap();
        assert_eq!(found.len(), s.boxes.len(), "seed {seed}");
        for gt in &s.boxes {
            let best = found
                .iter()
                .filter(|d| d.class_id == gt.class_id)
                .map(|d| d.planar_distance(gt))
                .fold(f64::INFINITY, f64::min);
            assert!(best <= diagonal, "seed {seed}: {best}");
        }
    }
}

#[test]
fn zero_top_k_decodes_nothing() {
    let grid = output_grid(&bev(4, 8));
    let cfg = HeadConfig { top_k: 0, ..HeadConfig::new(1, 4) };
    let t = make_targets(&[car(3.0, 3.0)], &grid, &cfg).unwrap();
    assert!(decode(&targets_as_output(&t, &grid), &grid, &cfg).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn decode_respects_top_k_and_sorts_scores(vals in proptest::collection::vec(0.0f64..1.0, 16 * 16 * 2), k in 0usize..20) {
        let grid = output_grid(&bev(4, 8));
        let cfg = HeadConfig { top_k: k, ..HeadConfig::new(2, 4) };
        let out = HeadOutput {
            height: 16,
            width: 16,
            heatmap: Tensor::new(&[256, 2], vals).unwrap(),
            regression: Tensor::zeros(&[256, REG_CHANNELS]),
        };
        let found = decode(&out, &grid, &cfg).unwrap();
        prop_assert!(found.len() <= k);
        prop_assert!(found.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

use cft_core::encodings::BevConfig;
use cft_core::numerics::{Graph, ParamStore, Tensor, Var};
use cft_core::pa::PaDesign;
use cft_core::va::attention::{
    attend, block_diagonal_self_attention, masked_global_cross_attention, per_view_self_attention,
    windowed_cross_attention, Routing, TokenLayout, CROSS_SCORE, CROSS_VALUE, SELF_SCORE, SELF_VALUE,
};
use cft_core::va::{build_scheme, CftModel, ForwardOptions, ModelConfig, SchemeKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn desk_bev() -> BevConfig {
    ModelConfig::desk().bev
}

fn max_diff(g: &Graph<f64>, a: Var, b: Var) -> f64 {
    g.value(a).max_abs_diff(g.value(b))
}

#[test]
fn windowed_cross_attention_matches_masked_global_for_every_scheme() {
    let bev = desk_bev();
    let tpv = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in SchemeKind::ALL {
        let scheme = build_scheme(kind, &bev, 6).unwrap();
        let mut g = Graph::<f64>::new();
        let q = g.param(random(&mut rng, &[bev.cells(), 16])).unwrap();
        let k = g.param(random(&mut rng, &[6 * tpv, 16])).unwrap();
        let v = g.param(random(&mut rng, &[6 * tpv, 16])).unwrap();
        let reference = masked_global_cross_attention(&mut g, q, k, v, &scheme, tpv, 4).unwrap();
        for pad in [false, true] {
            let out = windowed_cross_attention(&mut g, q, k, v, &scheme, tpv, 4, pad, None).unwrap();
            let d = max_diff(&g, out, reference);
            assert!(d < 1e-9, "{} pad={pad}: {d}", kind.name());
        }
    }
}

#[test]
fn padded_query_rows_receive_exactly_zero_gradient() {
    let bev = desk_bev();
    let tpv = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in [SchemeKind::Rec2x3, SchemeKind::PolarA, SchemeKind::PolarB] {
        let scheme = build_scheme(kind, &bev, 6).unwrap();
        let mut g = Graph::<f64>::new();
        let q = g.param(random(&mut rng, &[bev.cells(), 8])).unwrap();
        let k = g.param(random(&mut rng, &[6 * tpv, 8])).unwrap();
        let v = g.param(random(&mut rng, &[6 * tpv, 8])).unwrap();
        let mut trace = Vec::new();
        let out = windowed_cross_attention(&mut g, q, k, v, &scheme, tpv, 2, true, Some(&mut trace)).unwrap();
        let w = g.constant(random(&mut rng, &[bev.cells(), 8])).unwrap();
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut padded = 0;
        for t in &trace {
            let gq = grads.get(t.queries).unwrap();
            for (r, cell) in t.rows.iter().enumerate() {
                if cell.is_none() {
                    padded += 1;
                    assert!(gq.row(r).iter().all(|&x| x == 0.0));
                } else {
                    assert!(gq.row(r).iter().any(|&x| x != 0.0));
                }
            }
        }
        assert!(padded > 0, "{} should need padding at 16x16", kind.name());
    }
}

#[test]
fn attention_rows_over_unmasked_keys_sum_to_one() {
    let bev = desk_bev();
    let scheme = build_scheme(SchemeKind::Rec2x2, &bev, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::<f64>::new();
    let q = g.param(random(&mut rng, &[bev.cells(), 8])).unwrap();
    let k = g.param(random(&mut rng, &[24, 8])).unwrap();
    let v = g.param(random(&mut rng, &[24, 8])).unwrap();
    let mut trace = Vec::new();
    windowed_cross_attention(&mut g, q, k, v, &scheme, 4, 2, true, Some(&mut trace)).unwrap();
    assert_eq!(trace.len(), 4);
    for t in &trace {
        assert_eq!(t.weights.len(), 2);
        for &w in &t.weights {
            let w = g.value(w);
            let (rows, cols) = w.dims2().unwrap();
            assert_eq!(cols, 12);
            for r in 0..rows {
                let s: f64 = w.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn per_view_self_attention_matches_block_diagonal_and_counts_within_view_scores() {
    let (n_v, tpv, d, heads) = (6, 20, 12, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f64>::new();
    let q = g.param(random(&mut rng, &[n_v * tpv, d])).unwrap();
    let k = g.param(random(&mut rng, &[n_v * tpv, d])).unwrap();
    let v = g.param(random(&mut rng, &[n_v * tpv, d])).unwrap();
    let out = per_view_self_attention(&mut g, q, k, v, n_v, tpv, heads).unwrap();
    let count = g.counter().get(SELF_SCORE);
    assert_eq!(count, (n_v * tpv * tpv * d) as u64);
    assert_ne!(count, (n_v * tpv * n_v * tpv * d) as u64);
    assert_eq!(g.counter().get(SELF_VALUE), count);
    let reference = block_diagonal_self_attention(&mut g, q, k, v, tpv, heads).unwrap();
    assert!(max_diff(&g, out, reference) < 1e-9);
}

#[test]
fn singleton_attention_returns_the_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f64>::new();
    let q = g.param(random(&mut rng, &[1, 4])).unwrap();
    let k = g.param(random(&mut rng, &[1, 4])).unwrap();
    let v = g.param(random(&mut rng, &[1, 4])).unwrap();
    let out = attend(&mut g, q, k, v, None, 2, (CROSS_SCORE, CROSS_VALUE), None).unwrap();
    assert_eq!(g.value(out), g.value(v));
}

#[test]
fn mismatched_shapes_are_rejected() {
    let bev = desk_bev();
    let scheme = build_scheme(SchemeKind::Rec2x2, &bev, 6).unwrap();
    let mut g = Graph::<f64>::new();
    let q = g.param(Tensor::zeros(&[10, 4])).unwrap();
    let k = g.param(Tensor::zeros(&[24, 4])).unwrap();
    let v = g.param(Tensor::zeros(&[24, 4])).unwrap();
    assert!(windowed_cross_attention(&mut g, q, k, v, &scheme, 4, 2, true, None).is_err());
    let k3 = g.param(Tensor::zeros(&[24, 6])).unwrap();
    assert!(attend(&mut g, q, k3, v, None, 2, (CROSS_SCORE, CROSS_VALUE), None).is_err());
    let x = g.param(Tensor::zeros(&[25, 4])).unwrap();
    assert!(per_view_self_attention(&mut g, x, x, x, 6, 4, 1).is_err());
}

fn small_images(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(rng, &[cfg.n_views * cfg.image_height * cfg.image_width, 3])
}

fn tiny_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::small();
    cfg.image_height = 16;
    cfg.image_width = 16;
    cfg
}

#[test]
fn model_routing_and_dense_self_reference_agree() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let model = CftModel::new(&mut store, &cfg, PaDesign::Explicit, &mut rng).unwrap();
    let images = small_images(&cfg, &mut rng);
    for kind in SchemeKind::ALL {
        let scheme = build_scheme(kind, &cfg.bev, 6).unwrap();
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g).unwrap();
        let a = model.forward(&mut g, &p, &images, PaDesign::Explicit, &scheme, ForwardOptions::default()).unwrap();
        let opts = ForwardOptions { routing: Routing::MaskedGlobal, dense_self: true, trace: false };
        let b = model.forward(&mut g, &p, &images, PaDesign::Explicit, &scheme, opts).unwrap();
        assert!(max_diff(&g, a.f_b, b.f_b) < 1e-9, "{}", kind.name());
    }
}

#[test]
fn model_forward_is_deterministic_and_desk_shaped() {
    let cfg = ModelConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let model = CftModel::new(&mut store, &cfg, PaDesign::Explicit, &mut rng).unwrap();
    let images: Tensor<f32> = small_images(&cfg, &mut rng).cast();
    let scheme = build_scheme(SchemeKind::Rec2x2, &cfg.bev, 6).unwrap();
    let run = || {
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g).unwrap();
        let out = model.forward(&mut g, &p, &images, PaDesign::Explicit, &scheme, ForwardOptions::default()).unwrap();
        g.value(out.f_b).clone()
    };
    let a = run();
    assert_eq!(a.shape(), &[16 * 16, 32]);
    assert_eq!(a, run());
}

#[test]
fn zero_image_features_leave_only_the_residual_path() {
    let mut cfg = tiny_cfg();
    cfg.stack.n_self = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let model = CftModel::new(&mut store, &cfg, PaDesign::Explicit, &mut rng).unwrap();
    let last = model.backbone.stages.last().unwrap().linear.weight;
    store.get_mut(last).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    let images = small_images(&cfg, &mut rng);
    let scheme = build_scheme(SchemeKind::Rec2x2, &cfg.bev, 6).unwrap();
    let mut g = Graph::<f64>::new();
    let p = store.bind(&mut g).unwrap();
    let out = model.forward(&mut g, &p, &images, PaDesign::Explicit, &scheme, ForwardOptions::default()).unwrap();
    assert!(g.value(out.f_s).data().iter().all(|&x| x == 0.0));
    let expected = model.cross_blocks[0].residual_path(&mut g, &p, p.get(model.q_c)).unwrap();
    assert_eq!(g.value(out.f_b), g.value(expected));
}

#[test]
fn zeroed_modulation_matches_restructured_implicit() {
    let mut cfg = tiny_cfg();
    cfg.layout = Some(TokenLayout::Restructured);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let model = CftModel::new(&mut store, &cfg, PaDesign::Explicit, &mut rng).unwrap();
    for id in [model.pa.modulation_ffn.out.weight, model.pa.modulation_ffn.out.bias] {
        store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let images = small_images(&cfg, &mut rng);
    let scheme = build_scheme(SchemeKind::PolarB, &cfg.bev, 6).unwrap();
    let mut g = Graph::<f64>::new();
    let p = store.bind(&mut g).unwrap();
    let a = model.forward(&mut g, &p, &images, PaDesign::EnhancedImplicit, &scheme, ForwardOptions::default()).unwrap();
    let b = model.forward(&mut g, &p, &images, PaDesign::Implicit, &scheme, ForwardOptions::default()).unwrap();
    let e = a.embedding.unwrap();
    assert_eq!(g.value(e.q_ep), g.value(e.q_p));
    assert!(max_diff(&g, a.f_b, b.f_b) < 1e-9);
}

#[test]
fn mixed_layout_runs_only_the_implicit_design() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let model = CftModel::new(&mut store, &cfg, PaDesign::Implicit, &mut rng).unwrap();
    assert_eq!(model.layout, TokenLayout::Mixed);
    let images = small_images(&cfg, &mut rng);
    let scheme = build_scheme(SchemeKind::Global, &cfg.bev, 6).unwrap();
    let mut g = Graph::<f64>::new();
    let p = store.bind(&mut g).unwrap();
    let out = model.forward(&mut g, &p, &images, PaDesign::Implicit, &scheme, ForwardOptions::default()).unwrap();
    assert_eq!(g.shape(out.f_b), &[64, 16]);
    assert!(out.embedding.is_none());
    assert!(model.forward(&mut g, &p, &images, PaDesign::Explicit, &scheme, ForwardOptions::default()).is_err());
    let wrong = build_scheme(SchemeKind::Global, &desk_bev(), 6).unwrap();
    assert!(model.forward(&mut g, &p, &images, PaDesign::Implicit, &wrong, ForwardOptions::default()).is_err());
}

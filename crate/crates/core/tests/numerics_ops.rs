use std::sync::Arc;

use cft_core::numerics::gradcheck::check_params;
use cft_core::numerics::layers::Ffn;
use cft_core::numerics::{ConvGeom, Graph, ParamStore, Tensor};
use cft_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.add_normal(name, shape, 1.0, &mut r);
    }
    s
}

/// Weighted sum so every output element gets a distinct cotangent.
fn weighted_sum(g: &mut Graph<f64>, v: cft_core::numerics::Var) -> cft_core::Result<cft_core::numerics::Var> {
    let n = g.value(v).len();
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4))?;
    let _ = n;
    let p = g.mul(v, w)?;
    g.sum(p)
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut s = random_store(&[("a", &[5, 4]), ("b", &[4, 3])], 1);
    let (a, b) = (s.id("a").unwrap(), s.id("b").unwrap());
    let r = check_params(&mut s, usize::MAX, |g, p| {
        let y = g.matmul(p.get(a), p.get(b))?;
        g.sum(y)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn matmul_counts_closed_form_mul_adds() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[5, 4])).unwrap();
    let b = g.constant(Tensor::zeros(&[4, 3])).unwrap();
    g.set_scope("probe");
    g.matmul(a, b).unwrap();
    g.matmul_nt(a, a).unwrap();
    assert_eq!(g.counter().get("probe"), 5 * 4 * 3 + 5 * 4 * 5);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_fn(&[3, 2], |i| i as f64)).unwrap();
    let l = g.sum(x).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn sum_of_product_gradient_is_columnwise_sums() {
    let mut g = Graph::<f64>::new();
    let xv = Tensor::from_fn(&[3, 2], |i| i as f64 + 1.0);
    let x = g.constant(xv.clone()).unwrap();
    let w = g.param(Tensor::zeros(&[2, 4])).unwrap();
    let y = g.matmul(x, w).unwrap();
    let l = g.sum(y).unwrap();
    let gw = g.backward(l).unwrap().get(w).unwrap();
    for r in 0..2 {
        let col_sum: f64 = (0..3).map(|i| xv.at2(i, r)).sum();
        for c in 0..4 {
            assert_eq!(gw.at2(r, c), col_sum);
        }
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2, 2])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_are_reported_immediately() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 1], f64::MAX)).unwrap();
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite("scale"))));
}

#[test]
fn elementwise_and_activation_gradients() {
    let mut s = random_store(&[("a", &[3, 4]), ("b", &[3, 4]), ("r", &[4])], 2);
    let (a, b, r) = (s.id("a").unwrap(), s.id("b").unwrap(), s.id("r").unwrap());
    let rep = check_params(&mut s, usize::MAX, |g, p| {
        let x = g.mul(p.get(a), p.get(b))?;
        let x = g.add_row(x, p.get(r))?;
        let y = g.sigmoid(x)?;
        let z = g.sub(y, p.get(b))?;
        let z = g.scale(z, 1.7)?;
        let z = g.add(z, p.get(a))?;
        let q = g.relu(z)?;
        let z = g.add(q, z)?;
        let t = g.transpose(z)?;
        let t = g.reshape(t, &[12])?;
        let t = g.reshape(t, &[3, 4])?;
        let t = g.abs(t)?;
        weighted_sum(g, t)
    })
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn softmax_and_layer_norm_gradients() {
    let mut s = random_store(&[("x", &[4, 5]), ("gain", &[5]), ("bias", &[5])], 3);
    let (x, gain, bias) = (s.id("x").unwrap(), s.id("gain").unwrap(), s.id("bias").unwrap());
    let rep = check_params(&mut s, usize::MAX, |g, p| {
        let n = g.layer_norm(p.get(x), p.get(gain), p.get(bias))?;
        let a = g.softmax(n, 1)?;
        let b = g.softmax(n, 0)?;
        let mask: Vec<bool> = (0..20).map(|i| i % 3 != 1).collect();
        let c = g.masked_softmax(n, &mask)?;
        let ab = g.add(a, b)?;
        let abc = g.add(ab, c)?;
        weighted_sum(g, abc)
    })
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn structural_op_gradients() {
    let mut s = random_store(&[("a", &[4, 3]), ("b", &[4, 2]), ("z", &[6])], 4);
    let (a, b, z) = (s.id("a").unwrap(), s.id("b").unwrap(), s.id("z").unwrap());
    let rep = check_params(&mut s, usize::MAX, |g, p| {
        let c = g.concat(&[p.get(a), p.get(b)], 1)?;
        let sl = g.slice(c, 1, 1, 4)?;
        let idx = Arc::new(vec![Some(2), None, Some(0), Some(2)]);
        let ga = g.gather_rows(sl, idx)?;
        let t1 = Arc::new(vec![Some(3), None, Some(0), Some(1)]);
        let t2 = Arc::new(vec![Some(2)]);
        let extra = g.slice(sl, 0, 1, 2)?;
        let asm = g.assemble_rows(vec![(ga, t1), (extra, t2)], 4)?;
        let enc = g.sinusoidal(p.get(z), 4, 3.0)?;
        let e = weighted_sum(g, enc)?;
        let m = g.mean(asm)?;
        let w = weighted_sum(g, asm)?;
        let mw = g.add(m, w)?;
        g.add(mw, e)
    })
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn convolution_lowering_gradients() {
    let mut s = random_store(&[("img", &[5, 6, 2])], 5);
    let img = s.id("img").unwrap();
    for (kernel, stride) in [(3, 1), (3, 2), (1, 1)] {
        let geom = ConvGeom { height: 5, width: 6, channels: 2, kernel, stride, pad: kernel / 2 };
        let rep = check_params(&mut s, usize::MAX, |g, p| {
            let cols = g.im2col(p.get(img), geom)?;
            weighted_sum(g, cols)
        })
        .unwrap();
        assert!(rep.max_rel_err < TOL, "k{kernel} s{stride}: {rep:?}");
    }
    let rep = check_params(&mut s, usize::MAX, |g, p| {
        let flat = g.reshape(p.get(img), &[30, 2])?;
        let up = g.upsample2(flat, 5, 6)?;
        weighted_sum(g, up)
    })
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn loss_op_gradients() {
    let mut s = random_store(&[("logits", &[6, 2]), ("pred", &[6, 3])], 6);
    let (lg, pr) = (s.id("logits").unwrap(), s.id("pred").unwrap());
    let target = Tensor::from_fn(&[6, 2], |i| if i == 3 { 1.0 } else { (i as f64) / 20.0 });
    let reg = Tensor::from_fn(&[6, 3], |i| (i as f64 * 0.37).sin() * 2.0);
    let mask = [true, false, true, true, false, false];
    let rep = check_params(&mut s, usize::MAX, |g, p| {
        let f = g.focal_loss(p.get(lg), &target, 2.0, 4.0)?;
        let l = g.masked_l1(p.get(pr), &reg, &mask)?;
        g.add(f, l)
    })
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn ffn_gradient() {
    let mut r = rng(7);
    let mut s = ParamStore::<f64>::new();
    let x = s.add_normal("x", &[5, 4], 1.0, &mut r);
    let ffn = Ffn::new(&mut s, "ffn", 4, 8, 3, &mut r);
    for p in s.iter_mut() {
        if p.name.ends_with("bias") {
            p.value = Tensor::from_fn(p.value.shape(), |i| 0.1 * i as f64 - 0.2);
        }
    }
    let rep = check_params(&mut s, usize::MAX, |g, p| {
        let y = ffn.forward(g, p, p.get(x))?;
        weighted_sum(g, y)
    })
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn axis_and_shape_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[3, 3])).unwrap();
    assert!(matches!(g.softmax(a, 2), Err(Error::Axis { .. })));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    assert!(matches!(g.concat(&[a, b], 1), Err(Error::Shape { .. })));
    assert!(matches!(g.concat(&[a, b], 5), Err(Error::Axis { .. })));
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut r = rng(8);
    let mut s = ParamStore::<f64>::new();
    let x = s.add_normal("x", &[16, 24], 3.0, &mut r);
    let mut g = Graph::new();
    let p = s.bind(&mut g).unwrap();
    let ones = g.constant(Tensor::full(&[24], 1.0)).unwrap();
    let zeros = g.constant(Tensor::zeros(&[24])).unwrap();
    let y = g.layer_norm(p.get(x), ones, zeros).unwrap();
    let t = g.value(y);
    for i in 0..16 {
        let row = t.row(i);
        let mean = row.iter().sum::<f64>() / 24.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0;
        assert!(mean.abs() < 1e-12);
        // eps = 1e-5 inside the square root
        assert!((var - 1.0).abs() < 1e-5, "{var}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let t = Tensor::new(&[3, 4], vals).unwrap().softmax(1).unwrap();
        for i in 0..3 {
            prop_assert!(t.row(i).iter().all(|&v| v >= 0.0));
            prop_assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_then_slice_round_trips(a in proptest::collection::vec(-1e6f64..1e6, 6), b in proptest::collection::vec(-1e6f64..1e6, 9), axis in 0usize..2) {
        let (ta, tb) = if axis == 1 {
            (Tensor::new(&[3, 2], a).unwrap(), Tensor::new(&[3, 3], b).unwrap())
        } else {
            (Tensor::new(&[2, 3], a).unwrap(), Tensor::new(&[3, 3], b).unwrap())
        };
        let c = Tensor::concat(&[&ta, &tb], axis).unwrap();
        let split = ta.shape()[axis];
        prop_assert_eq!(c.slice(axis, 0, split).unwrap(), ta);
        prop_assert_eq!(c.slice(axis, split, c.shape()[axis]).unwrap(), tb);
    }

    #[test]
    fn matmul_counter_matches_closed_form(m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[m, k])).unwrap();
        let b = g.constant(Tensor::zeros(&[k, n])).unwrap();
        g.matmul(a, b).unwrap();
        prop_assert_eq!(g.counter().total(), (m * k * n) as u64);
    }
}

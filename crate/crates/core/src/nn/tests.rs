use proptest::prelude::*;

use super::*;
use crate::error::{Error, Result};
use crate::rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rng::normals(&mut rng::stream(seed), n)).unwrap()
}

/// Scalar probe `Σ y ⊙ r` with a fixed random `r`, so every output entry
/// contributes a distinct weight to the gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.input(random(g.shape(y), seed ^ 0xABCD));
    let p = g.mul(y, r)?;
    Ok(g.sum_all(p))
}

fn check(store: &mut ParamStore<f64>, f: impl Fn(&mut Graph<f64>) -> Result<Var>) -> GradCheckReport {
    let report = grad_check(store, f, GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report:?}");
    report
}

/// Store holding one "input" parameter so inputs get gradient-checked too.
fn input_store(shape: &[usize], seed: u64) -> (ParamStore<f64>, ParamId) {
    let mut s = ParamStore::new();
    let id = s.add("x", random(shape, seed));
    (s, id)
}

#[test]
fn identity_kernel_conv_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let mut w = Tensor::zeros(&[1, 1, 5]);
    w.data_mut()[2] = 1.0;
    let wid = store.add("w", w);
    let x = random(&[2, 1, 9], 1);
    let mut g = Graph::new(&store, false, 0);
    let xv = g.input(x.clone());
    let wv = g.param(wid);
    let y = g.conv1d(xv, wv, 1, 1, 2, 2).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn relu_values() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, false, 0);
    let x = g.input(Tensor::from_f64(&[4], &[-2.0, -0.5, 0.5, 3.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.5, 3.0]);
}

#[test]
fn conv_gradients_over_configurations() {
    for (i, &(stride, dil, pl, pr, k)) in [(1, 1, 1, 1, 3), (2, 1, 1, 1, 3), (1, 2, 2, 2, 3), (2, 3, 0, 4, 2), (1, 1, 0, 0, 1)]
        .iter()
        .enumerate()
    {
        let (mut store, x) = input_store(&[2, 3, 11], i as u64);
        let w = store.add("w", random(&[4, 3, k], 10 + i as u64));
        check(&mut store, |g| {
            let xv = g.param(x);
            let wv = g.param(w);
            let y = g.conv1d(xv, wv, stride, dil, pl, pr)?;
            probe(g, y, 7)
        });
    }
}

#[test]
fn conv_layer_same_padding_and_stride_lengths() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng::stream(0);
    let c = Conv1d::new(&mut store, "c", 2, 3, 7, &mut r);
    let s = Conv1d::new(&mut store, "s", 2, 3, 4, &mut r).with_stride(2);
    let d = Conv1d::new(&mut store, "d", 2, 3, 3, &mut r).with_dilation(4);
    let mut g = Graph::new(&store, false, 0);
    let x = g.input(random(&[1, 2, 25], 3));
    let y = c.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 25]);
    let y = s.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 13]);
    let y = d.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 25]);
    let short = g.input(random(&[1, 2, 5], 3));
    assert!(matches!(c.forward(&mut g, short), Err(Error::Shape { .. })));
}

#[test]
fn dense_matches_finite_differences_at_64_bit() {
    let mut store = ParamStore::<f64>::new();
    let dense = Dense::new(&mut store, "d", 5, 4, &mut rng::stream(1));
    let x = random(&[3, 5], 2);
    let opts = GradCheckOptions {
        eps: 1e-4,
        tolerance: 1e-6,
        ..Default::default()
    };
    let report = grad_check(
        &mut store,
        |g| {
            let xv = g.input(x.clone());
            let y = dense.forward(g, xv)?;
            probe(g, y, 3)
        },
        opts,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.checked, 5 * 4 + 4);
}

#[test]
fn dense_f32_gradient_within_1e_3_of_finite_differences() {
    let mut s32 = ParamStore::<f32>::new();
    let dense = Dense::new(&mut s32, "d", 6, 3, &mut rng::stream(4));
    let x = random(&[4, 6], 5);
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(&s32, false, 0);
        let xv = g.input(Tensor::from_f64(x.shape(), x.data()).unwrap());
        let y = dense.forward(&mut g, xv).unwrap();
        let r = g.input(Tensor::from_f64(&[4, 3], random(&[4, 3], 6 ^ 0xABCD).data()).unwrap());
        let p = g.mul(y, r).unwrap();
        let l = g.sum_all(p);
        let grads = g.backward(l);
        let mut out = vec![Vec::new(); 2];
        for (id, t) in grads.param_grads() {
            out[id.index()] = t.to_f64();
        }
        out
    };
    // Finite differences of the same weights evaluated in 64-bit.
    let mut s64 = ParamStore::<f64>::new();
    for p in s32.iter() {
        s64.add(p.name.clone(), Tensor::from_f64(p.value.shape(), &p.value.to_f64()).unwrap());
    }
    let mut max_err: f64 = 0.0;
    let h = 1e-4;
    for id in s64.ids().collect::<Vec<_>>() {
        for j in 0..s64.get(id).value.numel() {
            let eval = |s: &ParamStore<f64>| {
                let mut g = Graph::new(s, false, 0);
                let xv = g.input(x.clone());
                let y = dense.forward(&mut g, xv).unwrap();
                let l = probe(&mut g, y, 6).unwrap();
                g.value(l).item()
            };
            let orig = s64.get(id).value.data()[j];
            s64.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = eval(&s64);
            s64.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = eval(&s64);
            s64.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(relative_error(analytic[id.index()][j], numeric, 1e-3));
        }
    }
    assert!(max_err < 1e-3, "max relative error {max_err}");
}

#[test]
fn elementwise_ops_gradients() {
    let (mut store, x) = input_store(&[3, 4], 11);
    let y = store.add("y", random(&[3, 4], 12));
    check(&mut store, |g| {
        let a = g.param(x);
        let b = g.param(y);
        let s = g.add(a, b)?;
        let d = g.sub(s, b)?;
        let m = g.mul(d, b)?;
        let t = g.tanh(m);
        let sg = g.sigmoid(a);
        let e = g.scale(b, 0.3);
        let e = g.exp(e)?;
        let r = g.relu(b);
        let mm = g.mul(t, sg)?;
        let z = g.add(mm, e)?;
        let z = g.add(z, r)?;
        let sq = g.mul(a, a)?;
        let z = g.add(z, sq)?;
        probe(g, z, 1)
    });
}

#[test]
fn matmul_bmm_permute_gradients() {
    let (mut store, a) = input_store(&[2, 3, 4], 20);
    let b = store.add("b", random(&[4, 5], 21));
    let c = store.add("c", random(&[2, 5, 3], 22));
    check(&mut store, |g| {
        let av = g.param(a);
        let bv = g.param(b);
        let cv = g.param(c);
        let m = g.matmul(av, bv)?;
        let p = g.bmm(m, cv)?;
        let t = g.transpose_last2(p)?;
        let q = g.permute(t, &[1, 0, 2])?;
        let r = g.reshape(q, &[6, 3])?;
        probe(g, r, 2)
    });
}

#[test]
fn bias_and_prefix_broadcast_gradients() {
    let (mut store, x) = input_store(&[2, 3, 5], 30);
    let b = store.add("b", random(&[3], 31));
    let e = store.add("e", random(&[2, 3], 32));
    let f = store.add("f", random(&[5], 33));
    check(&mut store, |g| {
        let xv = g.param(x);
        let bv = g.param(b);
        let ev = g.param(e);
        let fv = g.param(f);
        let y = g.add_bias(xv, bv, 1)?;
        let y = g.add_prefix(y, ev)?;
        let y = g.add_bias(y, fv, 2)?;
        probe(g, y, 3)
    });
}

#[test]
fn softmax_layernorm_sumlast_gradients() {
    let (mut store, x) = input_store(&[3, 6], 40);
    let mut r = rng::stream(41);
    let ln = LayerNorm::new(&mut store, "ln", 6);
    for id in [ln.gamma, ln.beta] {
        store.get_mut(id).value = Tensor::new(&[6], rng::normals(&mut r, 6)).unwrap();
    }
    check(&mut store, |g| {
        let xv = g.param(x);
        let s = g.softmax_last(xv);
        let n = ln.forward(g, xv)?;
        let y = g.add(s, n)?;
        let y = g.sum_last(y);
        probe(g, y, 4)
    });
}

#[test]
fn embedding_concat_slice_gradients() {
    let mut store = ParamStore::<f64>::new();
    let emb = Embedding::new(&mut store, "emb", 5, 3, &mut rng::stream(50));
    let other = store.add("o", random(&[4, 2], 51));
    check(&mut store, |g| {
        let e = emb.forward(g, &[0, 3, 3, 1])?;
        let o = g.param(other);
        let c = g.concat(&[e, o, e], 1)?;
        let s = g.slice(c, 1, 2, 4)?;
        let s2 = g.slice(c, 0, 1, 2)?;
        let a = probe(g, s, 5)?;
        let b = probe(g, s2, 6)?;
        g.add(a, b)
    });
}

#[test]
fn pool_upsample_dropout_gradients() {
    let (mut store, x) = input_store(&[2, 2, 9], 60);
    let opts = GradCheckOptions {
        train: true,
        ..Default::default()
    };
    let report = grad_check(
        &mut store,
        |g| {
            let xv = g.param(x);
            let p = g.max_pool1d(xv, 2)?;
            let u = g.upsample_nearest(p, 3);
            let d = g.dropout(u, 0.4);
            probe(g, d, 7)
        },
        opts,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn attention_and_transformer_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng::stream(70);
    let block = TransformerBlock::new(&mut store, "blk", 4, 2, 8, 0.0, &mut r).unwrap();
    let x = random(&[2, 3, 4], 71);
    check(&mut store, |g| {
        let xv = g.input(x.clone());
        let y = block.forward(g, xv)?;
        probe(g, y, 8)
    });
}

#[test]
fn losses_gradients() {
    let (mut store, x) = input_store(&[4, 7], 80);
    let y = store.add("y", random(&[4, 7], 81));
    check(&mut store, |g| {
        let xv = g.param(x);
        let yv = g.param(y);
        let ce = g.cross_entropy(xv, &[0, 6, 3, 3])?;
        let w = g.cross_entropy_weighted(yv, &[1, 2, 5, 0], &[1.0, 0.0, 2.0, 0.5])?;
        let m = g.mse(xv, yv)?;
        let s = g.add(ce, w)?;
        g.add(s, m)
    });
}

#[test]
fn mean_all_gradient() {
    let (mut store, x) = input_store(&[3, 3], 85);
    check(&mut store, |g| {
        let xv = g.param(x);
        let sq = g.mul(xv, xv)?;
        Ok(g.mean_all(sq))
    });
}

#[test]
fn uniform_logits_cross_entropy_is_ln7() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, false, 0);
    let l = g.input(Tensor::full(&[3, 7], 0.37));
    let ce = g.cross_entropy(l, &[0, 4, 6]).unwrap();
    assert!((g.value(ce).item() - 7f64.ln()).abs() < 1e-9);
    assert!((7f64.ln() - 1.9459).abs() < 1e-4);
}

#[test]
fn cross_entropy_rejects_bad_class() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, false, 0);
    let l = g.input(Tensor::zeros(&[2, 7]));
    assert!(matches!(g.cross_entropy(l, &[0, 7]), Err(Error::Index { index: 7, bound: 7 })));
}

#[test]
fn cross_entropy_is_stable_for_large_logits() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, false, 0);
    let l = g.input(Tensor::from_f64(&[1, 3], &[1000.0, 0.0, -1000.0]).unwrap());
    let ce = g.cross_entropy(l, &[1]).unwrap();
    assert!((g.value(ce).item() - 1000.0).abs() < 1e-9);
}

#[test]
fn mse_of_identical_inputs_is_zero() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, false, 0);
    let a = g.input(random(&[5], 1));
    let m = g.mse(a, a).unwrap();
    assert_eq!(g.value(m).item(), 0.0);
}

struct Doubled;

impl CustomOp<f64> for Doubled {
    fn name(&self) -> &str {
        "doubled"
    }
    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(inputs[0].clone())
    }
    fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, grad: &Tensor<f64>) -> Vec<Option<Tensor<f64>>> {
        let d = grad.data().iter().map(|v| 2.0 * v).collect();
        vec![Some(Tensor::new(grad.shape(), d).unwrap())]
    }
}

#[test]
fn corrupted_backward_fails_grad_check() {
    let (mut store, x) = input_store(&[4], 90);
    let report = grad_check(
        &mut store,
        |g| {
            let xv = g.param(x);
            let y = g.custom(&[xv], Box::new(Doubled))?;
            probe(g, y, 9)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert!(report.max_rel_error > 0.4);
}

#[test]
fn zero_parameter_module_passes() {
    let mut store = ParamStore::<f64>::new();
    let report = grad_check(
        &mut store,
        |g| {
            let x = g.input(random(&[3], 1));
            let y = g.relu(x);
            Ok(g.sum_all(y))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.checked, 0);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, false, 0);
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[3, 2]));
    match g.add(a, b) {
        Err(Error::Shape { expected, actual, .. }) => {
            assert_eq!(expected, "[2, 3]");
            assert_eq!(actual, "[3, 2]");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn dropout_is_identity_at_inference_and_scaled_in_training() {
    let store = ParamStore::<f64>::new();
    let x = Tensor::full(&[1000], 1.0);
    let mut g = Graph::new(&store, false, 0);
    let xv = g.input(x.clone());
    let y = g.dropout(xv, 0.5);
    assert_eq!(g.value(y), &x);
    let mut g = Graph::new(&store, true, 3);
    let xv = g.input(x);
    let y = g.dropout(xv, 0.5);
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    let mean = vals.iter().sum::<f64>() / 1000.0;
    assert!((mean - 1.0).abs() < 0.15);
}

fn toy_model(seed: u64) -> (ParamStore<f32>, Dense, Dense) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed);
    let trunk = Dense::new(&mut store, "trunk", 4, 6, &mut r);
    let head = Dense::new(&mut store, "head", 6, 3, &mut r);
    (store, trunk, head)
}

fn train_toy(store: &mut ParamStore<f32>, trunk: &Dense, head: &Dense, steps: usize) -> Vec<f64> {
    let x = Tensor::<f32>::from_f64(&[6, 4], &rng::normals(&mut rng::stream(5), 24)).unwrap();
    let targets = [0, 1, 2, 0, 1, 2];
    let mut adam = Adam::new(0.05);
    let mut losses = Vec::new();
    for step in 0..steps {
        let grads = {
            let mut g = Graph::new(store, true, step as u64);
            let xv = g.input(x.clone());
            let h = trunk.forward(&mut g, xv).unwrap();
            let h = g.relu(h);
            let h = g.dropout(h, 0.1);
            let y = head.forward(&mut g, h).unwrap();
            let l = g.cross_entropy(y, &targets).unwrap();
            losses.push(g.value(l).item());
            g.backward(l)
        };
        store.accumulate(&grads);
        adam.step(store).unwrap();
    }
    losses
}

#[test]
fn freeze_all_except_head_keeps_trunk_bit_identical() {
    let (mut store, trunk, head) = toy_model(1);
    store.freeze_all_except(&["head"]).unwrap();
    let before = store.values();
    train_toy(&mut store, &trunk, &head, 10);
    for (p, b) in store.iter().zip(&before) {
        if p.name.starts_with("trunk") {
            assert!(p.frozen);
            assert_eq!(&p.value, b, "{}", p.name);
        } else {
            assert!(!p.frozen);
            assert_ne!(&p.value, b, "{}", p.name);
        }
    }
}

#[test]
fn freeze_guards() {
    let (mut store, _, _) = toy_model(1);
    assert!(matches!(store.freeze_all_except(&[]), Err(Error::Name(_))));
    assert!(matches!(store.freeze_all_except(&["nope"]), Err(Error::Name(_))));
    assert!(matches!(store.freeze_all_except(&["hea"]), Err(Error::Name(_))));
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let (mut a, ta, ha) = toy_model(9);
    let (mut b, tb, hb) = toy_model(9);
    let la = train_toy(&mut a, &ta, &ha, 30);
    let lb = train_toy(&mut b, &tb, &hb, 30);
    assert_eq!(la, lb);
    assert_eq!(a, b);
    assert!(la.last().unwrap() < &la[0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 1..40), width in 1usize..8) {
        let rows = vals.len() / width;
        prop_assume!(rows > 0);
        let data = vals[..rows * width].to_vec();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false, 0);
        let x = g.input(Tensor::new(&[rows, width], data).unwrap());
        let y = g.softmax_last(x);
        for row in g.value(y).data().chunks(width) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_gradients_random_shapes(b in 1usize..3, cin in 1usize..4, cout in 1usize..4, l in 4usize..12, k in 1usize..4, stride in 1usize..3, seed in 0u64..1000) {
        let (mut store, x) = input_store(&[b, cin, l], seed);
        let w = store.add("w", random(&[cout, cin, k], seed + 1));
        let pad = (k - 1) / 2;
        let report = grad_check(&mut store, |g| {
            let xv = g.param(x);
            let wv = g.param(w);
            let y = g.conv1d(xv, wv, stride, 1, pad, k - 1 - pad)?;
            probe(g, y, seed)
        }, GradCheckOptions::default()).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn dense_gradients_random_shapes(rows in 1usize..5, input in 1usize..6, output in 1usize..6, seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let d = Dense::new(&mut store, "d", input, output, &mut rng::stream(seed));
        let x = random(&[rows, input], seed + 3);
        let report = grad_check(&mut store, |g| {
            let xv = g.input(x.clone());
            let y = d.forward(g, xv)?;
            probe(g, y, seed)
        }, GradCheckOptions::default()).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }
}

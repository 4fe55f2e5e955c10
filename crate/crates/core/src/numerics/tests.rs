use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0, rng)
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for p in 0..a.cols() {
                s += a.get(i, p) * b.get(p, j);
            }
            out[i * b.cols() + j] = s;
        }
    }
    out
}

fn naive_conv(x: &Tensor, k: &Tensor, bias: f64) -> Vec<Vec<f64>> {
    let oh = x.rows() - k.rows() + 1;
    let ow = x.cols() - k.cols() + 1;
    let mut out = vec![vec![0.0; ow]; oh];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for a in 0..k.rows() {
                for b in 0..k.cols() {
                    s += k.get(a, b) * x.get(i + a, j + b);
                }
            }
            *cell = s + bias;
        }
    }
    out
}

fn naive_pool(x: &Tensor, l: usize) -> Vec<Vec<f64>> {
    let ph = x.rows().div_ceil(l);
    let pw = x.cols().div_ceil(l);
    let mut out = vec![vec![f64::NEG_INFINITY; pw]; ph];
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let cell = &mut out[i / l][j / l];
            *cell = cell.max(x.get(i, j));
        }
    }
    out
}

fn single(name: &str, t: Tensor) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(name, t);
    s
}

/// Checks `build` by contracting its output with fixed random weights.
fn grad_check(store: &ParamStore, seed: u64, build: impl Fn(&mut Tape, &ParamStore) -> Result<Var>) -> f64 {
    let mut probe = Tape::new();
    let out = build(&mut probe, store).unwrap();
    let shape = probe.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::uniform(&shape, 1.0, &mut rng);

    let eval = |s: &ParamStore| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let out = build(&mut tape, s)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        Ok((tape, loss))
    };
    let (tape, loss) = eval(store).unwrap();
    let grads = tape.backward(loss, store).unwrap();
    let report = finite_diff_check(
        |s| {
            let (t, l) = eval(s)?;
            Ok(t.value(l).data()[0])
        },
        store,
        &grads,
        1e-5,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn matmul_identity_and_projector() {
    let store = ParamStore::new();
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let c = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
    let v = t.constant(Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap());
    let c = t.matmul(p, v).unwrap();
    assert_eq!(t.value(c).data(), &[5.0, 0.0]);
    let _ = store;
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        for (x, y) in t.value(c).data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn activations_at_known_points() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert_eq!(Activation::Tanh.apply(0.0), 0.0);
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(vec![-1.0, 2.0]));
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 2.0]);
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(vec![0.0, 0.0]));
    let s = t.softmax(x).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    for c in [-3.0, 0.0, 1e3] {
        let x = t.constant(Tensor::row(vec![c]));
        let s = t.softmax(x).unwrap();
        assert_eq!(t.value(s).data(), &[1.0]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = rng.gen_range(1..12);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v + 100.0).collect();
        let a = softmax_slice(&x);
        let b = softmax_slice(&shifted);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (p, q) in a.iter().zip(&b) {
            assert!(*p > 0.0);
            assert!((p - q).abs() < 1e-9);
        }
    }
}

#[test]
fn softmax_rejects_empty() {
    // Tensors cannot be empty, so the error surfaces from construction.
    assert!(Tensor::new(vec![1, 0], vec![]).is_err());
}

#[test]
fn conv_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[5, 5]));
    let k = t.constant(Tensor::filled(&[3, 3], 0.7));
    let b = t.constant(Tensor::scalar(0.0));
    let y = t.conv2d_valid(x, k, b).unwrap();
    assert_eq!(t.shape(y), &[3, 3]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = rand_tensor(&mut rng, 4, 6);
    let x = t.constant(input.clone());
    let one = t.constant(Tensor::scalar(1.0));
    let y = t.conv2d_valid(x, one, b).unwrap();
    assert_eq!(t.value(y), &input);

    let small = t.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(t.conv2d_valid(small, k, b), Err(DuaError::Dimension { .. })));
}

#[test]
fn conv_matches_quadruple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, 6, 6);
        let k = rand_tensor(&mut rng, 3, 3);
        let bias = rng.gen_range(-1.0..1.0);
        let out = conv2d_forward(&x, &k, bias);
        let expected = naive_conv(&x, &k, bias);
        for (i, row) in expected.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((out.get(i, j) - v).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn pool_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::filled(&[6, 6], 3.0));
    let y = t.maxpool2d(x, (3, 3)).unwrap();
    assert_eq!(t.value(y), &Tensor::filled(&[2, 2], 3.0));

    let x = t.constant(Tensor::zeros(&[48, 48]));
    let y = t.maxpool2d(x, (3, 3)).unwrap();
    assert_eq!(t.shape(y), &[16, 16]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let input = rand_tensor(&mut rng, 7, 7);
        let x = t.constant(input.clone());
        let y = t.maxpool2d(x, (3, 3)).unwrap();
        assert_eq!(t.shape(y), &[3, 3]);
        let expected = naive_pool(&input, 3);
        for (i, row) in expected.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(t.value(y).get(i, j), v);
            }
        }
    }
}

#[test]
fn pool_ties_route_gradient_to_first_cell() {
    let store = single("x", Tensor::filled(&[3, 3], 1.0));
    let mut t = Tape::new();
    let x = t.param(&store, "x").unwrap();
    let y = t.maxpool2d(x, (3, 3)).unwrap();
    let loss = t.sum(y);
    let g = t.backward(loss, &store).unwrap();
    let expected: Vec<f64> = (0..9).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    assert_eq!(g.get("x").unwrap().data(), &expected[..]);
}

#[test]
fn backward_examples() {
    let store = single("x", Tensor::row(vec![0.3, -1.0, 2.0]));
    let mut t = Tape::new();
    let x = t.param(&store, "x").unwrap();
    let loss = t.sum(x);
    let g = t.backward(loss, &store).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[1.0, 1.0, 1.0]);

    let store = single("x", Tensor::row(vec![1.0, 2.0]));
    let mut t = Tape::new();
    let x = t.param(&store, "x").unwrap();
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    let g = t.backward(loss, &store).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_zero_fills_unused_params_and_rejects_non_scalar() {
    let mut store = single("x", Tensor::row(vec![1.0]));
    store.insert("unused", Tensor::zeros(&[2, 3]));
    let mut t = Tape::new();
    let x = t.param(&store, "x").unwrap();
    let loss = t.sum(x);
    let g = t.backward(loss, &store).unwrap();
    assert_eq!(g.get("unused").unwrap(), &Tensor::zeros(&[2, 3]));

    let store = single("x", Tensor::row(vec![1.0, 2.0]));
    let mut t = Tape::new();
    let x = t.param(&store, "x").unwrap();
    assert!(matches!(t.backward(x, &store), Err(DuaError::Contract(_))));
}

#[test]
fn finite_diff_scalar_examples() {
    let store = single("t", Tensor::scalar(3.0));
    let analytic: Gradients = [("t".to_string(), Tensor::scalar(6.0))].into_iter().collect();
    let r = finite_diff_check(|s| Ok(s.get("t")?.data()[0].powi(2)), &store, &analytic, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");

    let store = single("t", Tensor::scalar(0.0));
    let analytic: Gradients = [("t".to_string(), Tensor::scalar(0.25))].into_iter().collect();
    let r = finite_diff_check(|s| Ok(sigmoid(s.get("t")?.data()[0])), &store, &analytic, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn finite_diff_detects_nondeterminism() {
    let store = single("t", Tensor::scalar(1.0));
    let analytic = Gradients::zeros_like(&store);
    let mut calls = 0.0;
    let res = finite_diff_check(
        |_| {
            calls += 1.0;
            Ok(calls)
        },
        &store,
        &analytic,
        1e-5,
    );
    assert!(matches!(res, Err(DuaError::Contract(_))));
    assert!(finite_diff_check(|_| Ok(0.0), &store, &analytic, 0.0).is_err());
}

#[test]
fn every_primitive_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(&mut rng, 3, 4));
    store.insert("b", rand_tensor(&mut rng, 4, 2));
    store.insert("c", rand_tensor(&mut rng, 3, 4));
    store.insert("row", rand_tensor(&mut rng, 1, 4));
    store.insert("img", rand_tensor(&mut rng, 7, 7));
    store.insert("k", rand_tensor(&mut rng, 3, 3));
    store.insert("bias", Tensor::scalar(0.1));
    store.insert("logits", rand_tensor(&mut rng, 1, 3));

    type Build = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;
    let p = |t: &mut Tape, s: &ParamStore, n: &str| t.param(s, n);
    let cases: Vec<(&str, Build)> = vec![
        ("matmul", Box::new(move |t, s| {
            let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
            t.matmul(a, b)
        })),
        ("add", Box::new(move |t, s| {
            let (a, c) = (p(t, s, "a")?, p(t, s, "c")?);
            t.add(a, c)
        })),
        ("mul", Box::new(move |t, s| {
            let (a, c) = (p(t, s, "a")?, p(t, s, "c")?);
            t.mul(a, c)
        })),
        ("add_row", Box::new(move |t, s| {
            let (a, r) = (p(t, s, "a")?, p(t, s, "row")?);
            t.add_row(a, r)
        })),
        ("mul_row", Box::new(move |t, s| {
            let (a, r) = (p(t, s, "a")?, p(t, s, "row")?);
            t.mul_row(a, r)
        })),
        ("one_minus+scale", Box::new(move |t, s| {
            let a = p(t, s, "a")?;
            let o = t.one_minus(a)?;
            t.scale(o, -1.7)
        })),
        ("sigmoid", Box::new(move |t, s| {
            let a = p(t, s, "a")?;
            t.sigmoid(a)
        })),
        ("tanh", Box::new(move |t, s| {
            let a = p(t, s, "a")?;
            t.tanh(a)
        })),
        ("relu", Box::new(move |t, s| {
            let a = p(t, s, "a")?;
            t.relu(a)
        })),
        ("softmax", Box::new(move |t, s| {
            let r = p(t, s, "row")?;
            t.softmax(r)
        })),
        ("concat_cols", Box::new(move |t, s| {
            let (a, c) = (p(t, s, "a")?, p(t, s, "c")?);
            t.concat_cols(a, c)
        })),
        ("repeat_rows", Box::new(move |t, s| {
            let r = p(t, s, "row")?;
            t.repeat_rows(r, 3)
        })),
        ("stack_rows", Box::new(move |t, s| {
            let (a, r) = (p(t, s, "a")?, p(t, s, "row")?);
            t.stack_rows(&[a, r, a])
        })),
        ("concat_flat", Box::new(move |t, s| {
            let (a, b) = (p(t, s, "a")?, p(t, s, "b")?);
            t.concat_flat(&[b, a])
        })),
        ("select_rows", Box::new(move |t, s| {
            let a = p(t, s, "a")?;
            t.select_rows(a, &[2, 0, 2])
        })),
        ("slice_rows", Box::new(move |t, s| {
            let a = p(t, s, "a")?;
            t.slice_rows(a, 1, 2)
        })),
        ("transpose", Box::new(move |t, s| {
            let a = p(t, s, "a")?;
            t.transpose(a)
        })),
        ("pad_to", Box::new(move |t, s| {
            let a = p(t, s, "a")?;
            t.pad_to(a, 5, 6)
        })),
        ("conv2d_valid", Box::new(move |t, s| {
            let (x, k, b) = (p(t, s, "img")?, p(t, s, "k")?, p(t, s, "bias")?);
            t.conv2d_valid(x, k, b)
        })),
        ("maxpool2d", Box::new(move |t, s| {
            let x = p(t, s, "img")?;
            t.maxpool2d(x, (3, 3))
        })),
        ("cross_entropy", Box::new(move |t, s| {
            let l = p(t, s, "logits")?;
            t.cross_entropy(l, 2)
        })),
    ];
    for (i, (name, build)) in cases.iter().enumerate() {
        let err = grad_check(&store, 100 + i as u64, build);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn non_finite_guard_names_the_op() {
    let mut t = Tape::new().with_guard(true);
    let x = t.constant(Tensor::row(vec![f64::MAX]));
    let err = t.scale(x, 10.0).unwrap_err();
    assert!(matches!(err, DuaError::NonFinite { op: "scale" }));
}

#[test]
fn replay_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(&mut rng, 4, 4));
    let run = || {
        let mut t = Tape::new();
        let a = t.param(&store, "a").unwrap();
        let m = t.matmul(a, a).unwrap();
        let h = t.tanh(m).unwrap();
        let s = t.softmax(h).unwrap();
        let l = t.sum(s);
        let g = t.backward(l, &store).unwrap();
        g.get("a").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

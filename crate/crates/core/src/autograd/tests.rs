use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Runs `grad_check` on `loss = sum(op(inputs) ∘ W)` for a random constant `W`.
fn check_op(
    seed: u64,
    shapes: &[(usize, usize)],
    positive: bool,
    op: impl Fn(&mut Graph, &[Var]) -> crate::Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        let mut t = rand_tensor(&mut rng, r, c);
        if positive {
            t = t.map(|x| x.abs() + 0.5);
        }
        store.insert(format!("in{i}"), t);
    }
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = (0..shapes.len())
            .map(|i| g.param(&store, &format!("in{i}")).unwrap())
            .collect();
        let o = op(&mut g, &vars).unwrap();
        g.value(o).shape()
    };
    let w = rand_tensor(&mut rng, out_shape.0, out_shape.1);
    let f = |g: &mut Graph, s: &ParamStore| {
        let vars: Vec<Var> = (0..shapes.len())
            .map(|i| g.param(s, &format!("in{i}")))
            .collect::<crate::Result<_>>()?;
        let o = op(g, &vars)?;
        let wv = g.constant(w.clone());
        let p = g.mul(o, wv)?;
        Ok(g.sum(p))
    };
    let rep = grad_check(f, &store, &GradCheckConfig::default()).unwrap();
    assert!(rep.pass(), "seed {seed}\n{rep}");
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, 4, 3);
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(4));
    let av = g.constant(a.clone());
    let p = g.matmul(i, av).unwrap();
    assert_eq!(g.value(p), &a);
}

#[test]
fn softmax_single_element_row() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::column(&[3.7, -1.0]));
    let s = g.softmax_rows(x);
    assert_eq!(g.value(s).data(), &[1.0, 1.0]);
}

#[test]
fn segment_max_records_argmax() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::column(&[3.0, 5.0, -1.0]));
    let m = g.segment_max(x, &[0, 0, 1], 2).unwrap();
    assert_eq!(g.value(m).data(), &[5.0, -1.0]);
    assert_eq!(g.segment_argmax(m).unwrap(), &[1, 2]);
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 1.0]);
}

#[test]
fn segment_max_ties_go_to_lowest_index() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::column(&[2.0, 2.0, 2.0]));
    let m = g.segment_max(x, &[0, 0, 0], 1).unwrap();
    assert_eq!(g.segment_argmax(m).unwrap(), &[0]);
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::column(&[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::InvalidParameter(_))));
}

#[test]
fn shape_mismatch_names_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 2));
    match g.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, (2, 3));
            assert_eq!(rhs, (2, 2));
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
    assert!(matches!(g.add(a, b), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn sum_of_matmul_matches_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, 3, 4);
    let b = rand_tensor(&mut rng, 4, 2);
    let mut g = Graph::new();
    let av = g.variable(a);
    let bv = g.constant(b.clone());
    let p = g.matmul(av, bv).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    let da = grads.wrt(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b.get(k, j)).sum();
            assert!((da.get(i, k) - expect).abs() < 1e-14);
        }
    }
    check_op(7, &[(3, 4), (4, 2)], false, |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn grad_check_linear_function_is_exact() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::column(&[0.3, -2.0, 5.0]));
    let c = Tensor::column(&[1.5, 2.5, -0.5]);
    let f = |g: &mut Graph, s: &ParamStore| {
        let w = g.param(s, "w")?;
        let cv = g.constant(c.clone());
        let p = g.mul(w, cv)?;
        Ok(g.sum(p))
    };
    let rep = grad_check(f, &store, &GradCheckConfig::default()).unwrap();
    assert!(rep.pass());
    assert!(rep.block("w").unwrap().max_abs_err <= 1e-9, "{rep}");
}

#[test]
fn grad_check_flags_relu_kink() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::column(&[0.0, 0.7, -0.4]));
    let f = |g: &mut Graph, s: &ParamStore| {
        let x = g.param(s, "x")?;
        let r = g.relu(x);
        Ok(g.sum(r))
    };
    let rep = grad_check(f, &store, &GradCheckConfig::default()).unwrap();
    assert_eq!(rep.block("x").unwrap().kinks, vec![0]);
    assert!(rep.pass());

    // perturbed off the kink, every entry is checked
    store.get_mut("x").unwrap().data_mut()[0] = 1e-3;
    let rep = grad_check(f, &store, &GradCheckConfig::default()).unwrap();
    assert_eq!(rep.total_kinks(), 0);
    assert_eq!(rep.block("x").unwrap().checked, 3);
    assert!(rep.pass());
}

#[test]
fn identical_passes_are_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, 5, 8);
        let w = rand_tensor(&mut rng, 8, 8);
        let mut g = Graph::new();
        let av = g.variable(a);
        let wv = g.variable(w);
        let h = g.matmul(av, wv).unwrap();
        let h = g.layer_norm(h);
        let h = g.gelu(h);
        let h = g.softmax_rows(h);
        let s = g.sum(h);
        let s2 = g.mul(s, s).unwrap();
        let grads = g.backward(s2).unwrap();
        (g.value(s2).clone(), grads.wrt_or_zero(av), grads.wrt_or_zero(wv))
    };
    assert_eq!(run(), run());
}

#[test]
fn neighbor_attention_self_only() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::from_rows(&[[1.0, 2.0]]));
    let v = g.constant(Tensor::from_rows(&[[0.5, -3.0]]));
    let o = g
        .neighbor_attention(q, q, v, Rc::new(vec![vec![]]), 0.5)
        .unwrap();
    assert_eq!(g.value(o).data(), &[0.5, -3.0]);
    let (keys, w) = g.attention_weights(o).unwrap();
    assert_eq!(keys[0], vec![0]);
    assert_eq!(w[0], vec![1.0]);
}

#[test]
fn positional_encoding_of_zero_alternates() {
    let e = positional_encoding([0.0; 3], 4, false);
    assert_eq!(e.len(), 24);
    for (k, v) in e.iter().enumerate() {
        assert_eq!(*v, if k % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert_eq!(positional_encoding([0.0; 3], 4, true).len(), 27);
}

mod fd {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn elementwise_binary(seed in 0u64..1_000_000) {
            check_op(seed, &[(3, 4), (3, 4)], false, |g, v| g.add(v[0], v[1]));
            check_op(seed, &[(3, 4), (3, 4)], false, |g, v| g.sub(v[0], v[1]));
            check_op(seed, &[(3, 4), (3, 4)], false, |g, v| g.mul(v[0], v[1]));
            check_op(seed, &[(3, 4), (3, 4)], true, |g, v| g.div(v[0], v[1]));
        }

        #[test]
        fn broadcasts(seed in 0u64..1_000_000) {
            check_op(seed, &[(4, 3), (1, 3)], false, |g, v| g.add_row(v[0], v[1]));
            check_op(seed, &[(4, 3), (1, 3)], false, |g, v| g.mul_row(v[0], v[1]));
            check_op(seed, &[(4, 3), (4, 1)], false, |g, v| g.mul_col(v[0], v[1]));
            check_op(seed, &[(4, 3)], false, |g, v| Ok(g.scale(v[0], -1.7)));
            check_op(seed, &[(4, 3)], false, |g, v| Ok(g.add_scalar(v[0], 0.3)));
        }

        #[test]
        fn structural(seed in 0u64..1_000_000) {
            check_op(seed, &[(3, 5), (5, 2)], false, |g, v| g.matmul(v[0], v[1]));
            check_op(seed, &[(3, 5)], false, |g, v| Ok(g.transpose(v[0])));
            check_op(seed, &[(3, 2), (3, 4)], false, |g, v| g.concat(&[v[0], v[1], v[0]]));
            check_op(seed, &[(3, 6)], false, |g, v| g.slice_cols(v[0], 1, 4));
            check_op(seed, &[(3, 4)], false, |g, v| g.reshape(v[0], 6, 2));
            check_op(seed, &[(4, 3)], false, |g, v| g.gather_rows(v[0], &[3, 0, 0, 2]));
        }

        #[test]
        fn segments(seed in 0u64..1_000_000) {
            let seg = [0usize, 2, 1, 0, 2, 2];
            check_op(seed, &[(6, 3)], false, |g, v| g.segment_sum(v[0], &seg, 3));
            check_op(seed, &[(6, 3)], false, |g, v| g.segment_mean(v[0], &seg, 3));
            check_op(seed, &[(6, 3)], false, |g, v| g.segment_max(v[0], &seg, 3));
        }

        #[test]
        fn row_reductions(seed in 0u64..1_000_000) {
            check_op(seed, &[(4, 5)], false, |g, v| Ok(g.softmax_rows(v[0])));
            check_op(seed, &[(4, 5)], false, |g, v| Ok(g.layer_norm(v[0])));
            check_op(seed, &[(4, 3)], false, |g, v| Ok(g.l2_norm(v[0])));
            check_op(seed, &[(4, 4)], false, |g, v| Ok(g.normalize_rows(v[0])));
            check_op(seed, &[(4, 3)], false, |g, v| Ok(g.sum(v[0])));
            check_op(seed, &[(4, 3)], false, |g, v| Ok(g.mean(v[0])));
        }

        #[test]
        fn unary(seed in 0u64..1_000_000) {
            check_op(seed, &[(3, 4)], false, |g, v| Ok(g.relu(v[0])));
            check_op(seed, &[(3, 4)], false, |g, v| Ok(g.gelu(v[0])));
            check_op(seed, &[(3, 4)], false, |g, v| Ok(g.sigmoid(v[0])));
            check_op(seed, &[(3, 4)], false, |g, v| Ok(g.tanh(v[0])));
            check_op(seed, &[(3, 4)], false, |g, v| Ok(g.exp(v[0])));
            check_op(seed, &[(3, 4)], true, |g, v| Ok(g.log(v[0])));
            check_op(seed, &[(3, 4)], false, |g, v| Ok(g.sin(v[0])));
            check_op(seed, &[(3, 4)], false, |g, v| Ok(g.cos(v[0])));
            check_op(seed, &[(3, 4)], false, |g, v| Ok(g.abs(v[0])));
            check_op(seed, &[(3, 4)], false, |g, v| Ok(g.clamp(v[0], -0.5, 0.5)));
        }

        #[test]
        fn encodings_and_attention(seed in 0u64..1_000_000) {
            check_op(seed, &[(4, 3)], false, |g, v| g.positional_encoding(v[0], 3, true));
            let nb = Rc::new(vec![vec![1, 2], vec![0], vec![3, 0, 1], vec![]]);
            check_op(seed, &[(4, 3), (4, 3), (4, 2)], false, |g, v| {
                g.neighbor_attention(v[0], v[1], v[2], nb.clone(), 0.7)
            });
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        /// Periodicity at the base frequency: γ(x) = γ(x + 2).
        #[test]
        fn positional_encoding_is_two_periodic(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let a = positional_encoding([x, y, z], 6, false);
            let b = positional_encoding([x + 2.0, y + 2.0, z + 2.0], 6, false);
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

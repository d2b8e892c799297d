use mstgnn::config::ClipMode;
use mstgnn::conv::{spatial_graph_conv, temporal_graph_conv};
use mstgnn::data::{window_count, windows, MotionSequence};
use mstgnn::graphs::{cartesian_product, graph_power_value};
use mstgnn::losses::{entropy_loss, gram_matrix_loss};
use mstgnn::metrics::mae;
use mstgnn::optim::{clip, global_norm};
use mstgnn::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn dims3() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..4)
}

fn stochastic(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.01f64..1.0, rows * cols).prop_map(move |d| {
        Tensor::from_fn(&[rows, cols], |i| {
            d[i[0] * cols + i[1]] / d[i[0] * cols..(i[0] + 1) * cols].iter().sum::<f64>()
        })
    })
}

fn eval(f: impl FnOnce(&mut Tape) -> mstgnn::Var) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| tensor(vec![r, c]))) {
        let y = eval(|t| {
            let v = t.constant(x.clone());
            t.softmax_rows(v).unwrap()
        });
        for row in y.data().chunks(y.cols()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn merge_then_unmerge_is_identity(x in dims3().prop_flat_map(|(a, b, c)| tensor(vec![a, b, c]))) {
        let frames = x.shape()[0];
        let y = eval(|t| {
            let v = t.constant(x.clone());
            let m = t.merge_dims_13(v).unwrap();
            t.unmerge_dims_13(m, frames).unwrap()
        });
        prop_assert_eq!(y, x);
    }

    #[test]
    fn graph_powers_add(g in (1usize..5).prop_flat_map(|n| tensor(vec![n, n])), a in 0i32..4, b in 0i32..4) {
        let g = g.map(|v| v / 3.0);
        let lhs = graph_power_value(&g, a + b).unwrap();
        let rhs = graph_power_value(&g, a).unwrap().matmul(&graph_power_value(&g, b).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn kronecker_sum_has_product_size(s in (1usize..4).prop_flat_map(|n| tensor(vec![n, n])),
                                      tg in (1usize..4).prop_flat_map(|n| tensor(vec![n, n]))) {
        let p = cartesian_product(&s, &tg).unwrap();
        let n = s.rows() * tg.rows();
        prop_assert_eq!(p.shape(), &[n, n][..]);
        // Trace of a Kronecker sum: T·tr(S) + M·tr(T).
        let tr = |m: &Tensor| (0..m.rows()).map(|i| m.at2(i, i)).sum::<f64>();
        let expected = tg.rows() as f64 * tr(&s) + s.rows() as f64 * tr(&tg);
        prop_assert!((tr(&p) - expected).abs() < 1e-9);
    }

    #[test]
    fn spatial_conv_is_linear(
        (x, y, g, w) in (1usize..4, 1usize..4, 1usize..3).prop_flat_map(|(t, m, d)| (
            tensor(vec![t, m, d]), tensor(vec![t, m, d]), tensor(vec![m, m]), tensor(vec![3, d, 2]))),
        a in -2.0f64..2.0,
    ) {
        let conv = |input: &Tensor| eval(|t| {
            let (xv, gv, wv) = (t.constant(input.clone()), t.constant(g.clone()), t.constant(w.clone()));
            spatial_graph_conv(t, xv, gv, wv, 2).unwrap()
        });
        let combo = x.zip_map(&y, |p, q| a * p + q).unwrap();
        let expected = conv(&x).zip_map(&conv(&y), |p, q| a * p + q).unwrap();
        prop_assert!(conv(&combo).max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn temporal_conv_is_linear(
        (x, y, g, w) in (2usize..5, 1usize..4, 1usize..3).prop_flat_map(|(t, m, d)| (
            tensor(vec![t, m, d]), tensor(vec![t, m, d]), tensor(vec![t, t]), tensor(vec![3, d, 2]))),
        a in -2.0f64..2.0,
    ) {
        let conv = |input: &Tensor| eval(|t| {
            let (xv, gv, wv) = (t.constant(input.clone()), t.constant(g.clone()), t.constant(w.clone()));
            temporal_graph_conv(t, xv, gv, wv, 1).unwrap()
        });
        let combo = x.zip_map(&y, |p, q| a * p + q).unwrap();
        let expected = conv(&x).zip_map(&conv(&y), |p, q| a * p + q).unwrap();
        prop_assert!(conv(&combo).max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn entropy_ignores_row_and_cluster_order(psi in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| stochastic(r, c)),
                                             shift in 0usize..6) {
        let (r, c) = (psi.rows(), psi.cols());
        let permuted = Tensor::from_fn(&[r, c], |i| psi.at2((i[0] + shift) % r, (i[1] + shift) % c));
        let h = |p: &Tensor| eval(|t| {
            let v = t.constant(p.clone());
            entropy_loss(t, &[v]).unwrap()
        }).item();
        prop_assert!((h(&psi) - h(&permuted)).abs() < 1e-12);
    }

    #[test]
    fn mae_ignores_joint_order(
        (p, q) in dims3().prop_flat_map(|(a, b, c)| (tensor(vec![a, b, c]), tensor(vec![a, b, c]))),
        shift in 0usize..5,
    ) {
        let m = p.shape()[1];
        let roll = |x: &Tensor| Tensor::from_fn(x.shape(), |i| x.at3(i[0], (i[1] + shift) % m, i[2]));
        let a = mae(&p, &q).unwrap();
        let b = mae(&roll(&p), &roll(&q)).unwrap();
        for (x, y) in a.per_horizon.iter().zip(&b.per_horizon) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_the_norm(grads in prop::collection::vec((1usize..5).prop_flat_map(|n| tensor(vec![n])), 1..4),
                                max in 0.01f64..5.0) {
        let mut g = grads.clone();
        clip(&mut g, max, ClipMode::Global).unwrap();
        prop_assert!(global_norm(&g) <= max * (1.0 + 1e-12));
        if global_norm(&grads) <= max {
            prop_assert_eq!(&g, &grads);
        }
        let mut g = grads;
        clip(&mut g, max, ClipMode::PerTensor).unwrap();
        for t in &g {
            prop_assert!(t.sq_norm().sqrt() <= max * (1.0 + 1e-12));
        }
    }

    #[test]
    fn window_count_matches_windows(len in 2usize..30, obs in 1usize..6, pred in 1usize..6, stride in 1usize..4) {
        let seq = MotionSequence::new("radians", Tensor::zeros(&[len, 2, 3])).unwrap();
        let w = windows(&seq, obs, pred, stride).unwrap();
        prop_assert_eq!(w.len(), window_count(len, obs, pred, stride));
        let expected = if len >= obs + pred { (len - obs - pred) / stride + 1 } else { 0 };
        prop_assert_eq!(w.len(), expected);
    }

    #[test]
    fn gram_loss_is_sign_invariant(
        (p, q, l) in (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(n, m, c)| (
            tensor(vec![n, m, c]), tensor(vec![n, m, c]), tensor(vec![m, c]))),
    ) {
        let neg = |x: &Tensor| x.map(|v| -v);
        let flip0 = |x: &Tensor| {
            let c = x.shape()[x.rank() - 1];
            let mut y = x.clone();
            y.data_mut().iter_mut().step_by(c).for_each(|v| *v = -*v);
            y
        };
        let g = |a: &Tensor, b: &Tensor, c: &Tensor| eval(|t| {
            let (av, bv, cv) = (t.constant(a.clone()), t.constant(b.clone()), t.constant(c.clone()));
            gram_matrix_loss(t, av, bv, cv).unwrap()
        }).item();
        let base = g(&p, &q, &l);
        let tol = 1e-9 * base.max(1.0);
        prop_assert!((g(&neg(&p), &neg(&q), &neg(&l)) - base).abs() <= tol);
        prop_assert!((g(&flip0(&p), &flip0(&q), &flip0(&l)) - base).abs() <= tol);
    }

    #[test]
    fn csv_round_trip_is_lossless(x in dims3().prop_flat_map(|(a, b, c)| tensor(vec![a, b, c]))) {
        let seq = MotionSequence::new("radians", x).unwrap();
        let back = MotionSequence::parse_csv(&seq.to_csv(), "roundtrip").unwrap();
        prop_assert_eq!(back, seq);
    }
}

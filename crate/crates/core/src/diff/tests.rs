use std::sync::Arc;

use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::<f64>::new();
    for &(n, r, c) in shapes {
        s.add_uniform(n, r, c, 1.0, &mut rng);
    }
    s
}

fn check<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    gradient_check(store, f, H).unwrap().max_error()
}

/// Reduces any node to a scalar through a fixed random weighting, so each
/// output entry receives a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var) -> Var {
    let (r, c) = tape.shape(x);
    let w = Array2::from_shape_fn((r, c), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
    let w = tape.constant(w);
    let m = tape.mul(x, w);
    tape.sum(m)
}

#[test]
fn square_value_and_gradient() {
    let mut s = ParamStore::<f64>::new();
    s.add("w", array![[3.0]]);
    let (v, g) = evaluate_with_gradients(&s, |t, p| Ok(t.mul(p[0], p[0]))).unwrap();
    assert_eq!(v, 9.0);
    assert_eq!(g.grads[0].as_ref().unwrap()[[0, 0]], 6.0);
}

#[test]
fn tanh_at_zero() {
    let mut s = ParamStore::<f64>::new();
    s.add("w", array![[0.0]]);
    let (v, g) = evaluate_with_gradients(&s, |t, p| Ok(t.tanh(p[0]))).unwrap();
    assert_eq!(v, 0.0);
    assert_eq!(g.grads[0].as_ref().unwrap()[[0, 0]], 1.0);
}

#[test]
fn finite_difference_examples() {
    let mut s = ParamStore::<f64>::new();
    s.add("w", array![[3.0]]);
    let g = finite_difference_gradient(&s, |t, p| Ok(t.mul(p[0], p[0])), 1e-4).unwrap();
    assert!((g.grads[0].as_ref().unwrap()[[0, 0]] - 6.0).abs() < 1e-8);

    let mut s = ParamStore::<f64>::new();
    s.add("w", array![[0.0]]);
    let g = finite_difference_gradient(&s, |t, p| Ok(t.abs(p[0])), 1e-4).unwrap();
    assert_eq!(g.grads[0].as_ref().unwrap()[[0, 0]], 0.0);

    let mut s = ParamStore::<f64>::new();
    s.add("w", array![[1.0]]);
    let g = finite_difference_gradient(&s, |t, p| Ok(t.exp(p[0])), 1e-4).unwrap();
    assert!((g.grads[0].as_ref().unwrap()[[0, 0]] - std::f64::consts::E).abs() < 1e-6);

    assert!(finite_difference_gradient(&s, |t, p| Ok(t.exp(p[0])), 0.0).is_err());
}

#[test]
fn frozen_parameters_have_no_gradient() {
    let mut s = store_with(&[("a", 2, 2), ("b", 2, 2)], 1);
    let b = s.id("b").unwrap();
    s.set_requires_grad(b, false);
    let (_, g) = evaluate_with_gradients(&s, |t, p| {
        let m = t.matmul(p[0], p[1]);
        Ok(t.sum(m))
    })
    .unwrap();
    assert!(g.get(b).is_none());
    assert!(g.get(s.id("a").unwrap()).is_some());
}

#[test]
fn non_finite_names_the_primitive() {
    let mut s = ParamStore::<f64>::new();
    s.add("w", array![[-1.0]]);
    let err = evaluate_with_gradients(&s, |t, p| Ok(t.ln(p[0]))).unwrap_err();
    match err {
        Error::NonFiniteValue { op } => assert_eq!(op, "ln"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    let s = store_with(&[("x", 5, 4), ("w1", 4, 6), ("w2", 6, 3), ("w3", 3, 1)], 7);
    let err = check(&s, |t, p| {
        let h = t.matmul(p[0], p[1]);
        let h = t.leaky_relu(h, 0.2);
        let h = t.matmul(h, p[2]);
        let h = t.tanh(h);
        let h = t.matmul(h, p[3]);
        let h = t.sigmoid(h);
        Ok(t.mean(h))
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn binary_ops_gradients() {
    let s = store_with(&[("a", 3, 4), ("b", 3, 4), ("r", 1, 4), ("c", 3, 1), ("k", 1, 1)], 3);
    let err = check(&s, |t, p| {
        let x = t.add(p[0], p[1]);
        let y = t.sub(x, p[1]);
        let y = t.mul(y, p[1]);
        let y = t.add_row(y, p[2]);
        let y = t.mul_row(y, p[2]);
        let y = t.mul_col(y, p[3]);
        let y = t.scale_by(y, p[4]);
        let y = t.scale(y, 1.7);
        let y = t.add_scalar(y, 0.3);
        Ok(weighted_sum(t, y))
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn matmul_nt_gradients() {
    let s = store_with(&[("a", 3, 5), ("b", 4, 5)], 11);
    let err = check(&s, |t, p| {
        let m = t.matmul_nt(p[0], p[1]);
        Ok(weighted_sum(t, m))
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn pointwise_gradients() {
    let s = store_with(&[("a", 4, 3)], 5);
    let err = check(&s, |t, p| {
        let e = t.exp(p[0]);
        let l = t.ln(e);
        let a = t.abs(l);
        let q = t.add_scalar(a, 0.5);
        let q = t.sqrt(q);
        let n = t.neg(q);
        let r = t.relu(p[0]);
        let y = t.add(n, r);
        Ok(weighted_sum(t, y))
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn reduction_gradients() {
    let s = store_with(&[("a", 5, 4)], 9);
    let err = check(&s, |t, p| {
        let r = t.sum_rows(p[0]);
        let m = t.mean_rows(p[0]);
        let x = t.max_rows(p[0]);
        let c = t.sum_cols(p[0]);
        let a = weighted_sum(t, r);
        let b = weighted_sum(t, m);
        let d = weighted_sum(t, x);
        let e = weighted_sum(t, c);
        let s1 = t.add(a, b);
        let s2 = t.add(d, e);
        Ok(t.add(s1, s2))
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn structural_gradients() {
    let s = store_with(&[("a", 4, 3), ("b", 4, 2), ("c", 3, 5)], 13);
    let idx = Arc::new(vec![3, 0, 0, 2, 1]);
    let sparse = Arc::new(SparseRows::from_rows(
        &[vec![(0, 0.5), (3, -1.0)], vec![], vec![(1, 2.0), (1, 0.25), (2, 1.0)]],
        4,
    ));
    let err = check(&s, |t, p| {
        let cat = t.concat_cols(&[p[0], p[1]]);
        let g = t.gather_rows(cat, idx.clone());
        let sl = t.slice_cols(g, 1, 4);
        let sp = t.sparse_mul(sparse.clone(), p[0]);
        let ct = t.transpose(p[2]);
        let rows = t.concat_rows(&[sp, ct]);
        let a = weighted_sum(t, sl);
        let b = weighted_sum(t, rows);
        Ok(t.add(a, b))
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn normalization_gradients() {
    let s = store_with(&[("a", 6, 4)], 17);
    let err = check(&s, |t, p| {
        let n = t.l2_normalize_rows(p[0], 1e-12);
        let i = t.instance_norm(p[0], 1e-5);
        let a = weighted_sum(t, n);
        let b = weighted_sum(t, i);
        Ok(t.add(a, b))
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let s = store_with(&[("a", 3, 3), ("b", 3, 3)], 21);
    let f = |t: &mut Tape<f64>, p: &[Var]| {
        let m = t.matmul(p[0], p[1]);
        let m = t.tanh(m);
        Ok(t.sum(m))
    };
    let g = |t: &mut Tape<f64>, p: &[Var]| {
        let m = t.mul(p[0], p[1]);
        let m = t.exp(m);
        Ok(t.mean(m))
    };
    let (_, gf) = evaluate_with_gradients(&s, f).unwrap();
    let (_, gg) = evaluate_with_gradients(&s, g).unwrap();
    let (_, gs) = evaluate_with_gradients(&s, |t, p| {
        let a = f(t, p)?;
        let b = g(t, p)?;
        Ok(t.add(a, b))
    })
    .unwrap();
    let mut sum = gf.clone();
    sum.accumulate(&gg);
    for (a, b) in sum.grads.iter().flatten().zip(gs.grads.iter().flatten()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn repeated_evaluation_is_bitwise_identical() {
    let s = store_with(&[("a", 8, 8), ("b", 8, 8)], 23);
    let f = |t: &mut Tape<f64>, p: &[Var]| {
        let m = t.matmul(p[0], p[1]);
        let m = t.instance_norm(m, 1e-5);
        let m = t.sigmoid(m);
        Ok(t.sum(m))
    };
    let (v1, g1) = evaluate_with_gradients(&s, f).unwrap();
    let (v2, g2) = evaluate_with_gradients(&s, f).unwrap();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1.grads, g2.grads);
}

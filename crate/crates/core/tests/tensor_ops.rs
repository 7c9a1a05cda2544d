mod common;

use common::Mat;
use mgcma::tensor::Tensor;
use mgcma::{grad_check, Error, Graph, ParameterStore};
use proptest::prelude::*;

fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

fn rows_of(t: &Tensor<f64>) -> Mat {
    (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
}

fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(n in 1usize..6, k in 1usize..6, m in 1usize..6, seed in 0u64..1000) {
        let mut rng = common::rng(seed);
        let a = common::random_mat(&mut rng, n, k);
        let b = common::random_mat(&mut rng, k, m);
        let mut g = Graph::new();
        let (an, bn) = (g.constant(tensor(&a)), g.constant(tensor(&b)));
        let c = g.matmul(an, bn).unwrap();
        prop_assert!(max_diff(&rows_of(g.value(c)), &common::matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn softmax_rows_match_and_sum_to_one(n in 1usize..5, m in 1usize..7, seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut rng = common::rng(seed);
        let a: Mat = common::random_mat(&mut rng, n, m)
            .into_iter()
            .map(|r| r.into_iter().map(|x| x * scale).collect())
            .collect();
        let mut g = Graph::new();
        let x = g.constant(tensor(&a));
        let s = g.softmax_rows(x).unwrap();
        let expected: Mat = a.iter().map(|r| common::softmax(r)).collect();
        prop_assert!(max_diff(&rows_of(g.value(s)), &expected) < 1e-12);
        for r in rows_of(g.value(s)) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_and_normalize_match(n in 1usize..6, m in 1usize..6, seed in 0u64..1000) {
        let mut rng = common::rng(seed);
        let a = common::random_mat(&mut rng, n, m);
        let mut g = Graph::new();
        let x = g.constant(tensor(&a));
        let pooled = g.mean_pool(x).unwrap();
        let unit = g.l2_normalize(pooled).unwrap();
        let mean = common::mean_rows(&a);
        let nrm = common::norm(&mean);
        prop_assert!(g.value(pooled).data().iter().zip(&mean).all(|(u, v)| (u - v).abs() < 1e-12));
        prop_assert!(g.value(unit).data().iter().zip(&mean).all(|(u, v)| (u - v / nrm).abs() < 1e-12));
    }
}

#[test]
fn linear_matches_oracle() {
    let mut rng = common::rng(5);
    let x = common::random_mat(&mut rng, 4, 3);
    let w = common::random_mat(&mut rng, 3, 2);
    let b = vec![0.5, -1.5];
    let mut g = Graph::new();
    let (xn, wn) = (g.constant(tensor(&x)), g.constant(tensor(&w)));
    let bn = g.constant(Tensor::vector(b.clone()));
    let y = g.linear(xn, wn, Some(bn)).unwrap();
    let expected: Mat = common::matmul(&x, &w)
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(u, v)| u + v).collect())
        .collect();
    assert!(max_diff(&rows_of(g.value(y)), &expected) < 1e-14);
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1000.0, 1000.0, -1000.0]]).unwrap());
    let s = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.0]);
}

#[test]
fn softplus_matches_and_is_positive() {
    let xs = vec![-50.0, -3.0, 0.0, 2.5, 40.0];
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(xs.clone()));
    let y = g.softplus(x).unwrap();
    for (v, x) in g.value(y).data().iter().zip(&xs) {
        assert!(*v > 0.0);
        assert!((v - common::softplus(*x)).abs() <= 1e-12 * common::softplus(*x).max(1.0));
    }
}

#[test]
fn shape_and_degenerate_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    let empty = g.constant(Tensor::zeros(&[0, 3]));
    assert!(matches!(g.mean_pool(empty), Err(Error::EmptySequence(_))));
    let zero = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.l2_normalize(zero), Err(Error::Degenerate { .. })));
    let nan = g.constant(Tensor::vector(vec![f64::NAN]));
    assert!(matches!(g.softplus(nan), Err(Error::NonFinite(_))));
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(a), Err(Error::Contract(_))));
}

fn store_with(tensors: Vec<(&str, Tensor<f64>)>) -> ParameterStore<f64> {
    let mut store = ParameterStore::new(0);
    for (n, t) in tensors {
        store.insert(n, t).unwrap();
    }
    store
}

/// `sum(out ⊙ R)` for a fixed random `R`, so every output entry carries a
/// distinct weight.
fn project(g: &mut Graph<f64>, out: mgcma::NodeId, seed: u64) -> mgcma::Result<mgcma::NodeId> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = common::rng(seed);
    let w: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let r = g.constant(Tensor::new(shape, w).unwrap());
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

type OpFn = fn(&mut Graph<f64>, &[mgcma::NodeId]) -> mgcma::Result<mgcma::NodeId>;

#[test]
fn op_gradients_match_finite_differences() {
    let mut rng = common::rng(11);
    let store = store_with(vec![
        ("a", tensor(&common::random_mat(&mut rng, 3, 4))),
        ("b", tensor(&common::random_mat(&mut rng, 4, 2))),
        ("c", tensor(&common::random_mat(&mut rng, 3, 2))),
        ("r", Tensor::vector(vec![0.3, -0.7])),
        ("e", tensor(&common::random_mat(&mut rng, 3, 4))),
    ]);
    let ops: Vec<(&str, OpFn)> = vec![
        ("matmul", |g, p| g.matmul(p[0], p[1])),
        ("transpose", |g, p| g.transpose(p[0])),
        ("add", |g, p| g.add(p[0], p[4])),
        ("sub", |g, p| g.sub(p[0], p[4])),
        ("mul", |g, p| g.mul(p[0], p[4])),
        ("add_row", |g, p| g.add_row(p[2], p[3])),
        ("scale", |g, p| g.scale(p[0], -2.5)),
        ("shift", |g, p| g.shift(p[0], 0.75)),
        ("softmax_rows", |g, p| g.softmax_rows(p[0])),
        ("softplus", |g, p| g.softplus(p[0])),
        ("mean_pool", |g, p| g.mean_pool(p[0])),
        ("l2_normalize", |g, p| {
            let v = g.mean_pool(p[0])?;
            g.l2_normalize(v)
        }),
        ("layer_norm_rows", |g, p| g.layer_norm_rows(p[0], 1e-5)),
        ("concat_cols", |g, p| g.concat_cols(&[p[0], p[4]])),
        ("stack_rows", |g, p| {
            let v = g.mean_pool(p[0])?;
            let w = g.mean_pool(p[4])?;
            g.stack_rows(&[v, w, v])
        }),
        ("sq_dist", |g, p| g.sq_dist(p[0], p[4])),
        ("linear", |g, p| g.linear(p[0], p[1], Some(p[3]))),
        ("cross_entropy", |g, p| g.cross_entropy(p[0], &[3, 0, 1])),
    ];
    for (i, (name, op)) in ops.into_iter().enumerate() {
        let report = grad_check(&store, 1e-5, |g, p| {
            let out = op(g, p)?;
            project(g, out, i as u64)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{name}: {report:?}");
    }
}

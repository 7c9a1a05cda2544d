mod common;

use common::Mat;
use mgcma::attention::AttentionConfig;
use mgcma::distribution::{
    construct_distribution, construct_distribution_nodes, distribution_contrastive_loss,
    distribution_contrastive_loss_nodes, similarity, wasserstein2_sq, ContrastiveConfig,
    DistributionConstructorParams, GaussianEmbedding,
};
use mgcma::tensor::Tensor;
use mgcma::{grad_check, Error, ParameterStore};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn rows_of(t: &Tensor<f64>) -> Mat {
    (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> GaussianEmbedding<f64> {
    let mu = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let sigma = (0..d).map(|_| rng.random_range(0.01..3.0)).collect();
    GaussianEmbedding::new(mu, sigma).unwrap()
}

fn cfg(p: f64, q: f64, tau: f64) -> ContrastiveConfig<f64> {
    ContrastiveConfig { p, q, tau }
}

/// Logits `(-p W(s_i, t_j) + q) / tau` fed to the reference InfoNCE.
fn loss_oracle(s: &[GaussianEmbedding<f64>], t: &[GaussianEmbedding<f64>], c: &ContrastiveConfig<f64>) -> f64 {
    let w = |a: &GaussianEmbedding<f64>, b: &GaussianEmbedding<f64>| {
        let m: f64 = a.mu().iter().zip(b.mu()).map(|(x, y)| (x - y).powi(2)).sum();
        let v: f64 = a.sigma().iter().zip(b.sigma()).map(|(x, y)| (x - y).powi(2)).sum();
        m + v
    };
    let logits: Mat = s
        .iter()
        .map(|si| t.iter().map(|tj| (-c.p * w(si, tj) + c.q) / c.tau).collect())
        .collect();
    common::symmetric_info_nce(&logits)
}

#[test]
fn wasserstein_hand_cases() {
    let a = GaussianEmbedding::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let b = GaussianEmbedding::new(vec![1.0, 0.0], vec![2.0, 1.0]).unwrap();
    assert_eq!(wasserstein2_sq(&a, &b).unwrap(), 2.0);
    assert_eq!(wasserstein2_sq(&a, &a).unwrap(), 0.0);
    let c = GaussianEmbedding::new(vec![0.0], vec![1.0]).unwrap();
    assert!(matches!(wasserstein2_sq(&a, &c), Err(Error::Dimension { .. })));
}

#[test]
fn embedding_rejects_bad_sigma() {
    assert!(GaussianEmbedding::new(vec![0.0], vec![0.0]).is_err());
    assert!(GaussianEmbedding::new(vec![0.0], vec![-1.0]).is_err());
    assert!(GaussianEmbedding::new(vec![f64::NAN], vec![1.0]).is_err());
    assert!(GaussianEmbedding::new(vec![0.0, 1.0], vec![1.0]).is_err());
}

#[test]
fn wasserstein_matches_rotated_matrix_form() {
    let mut rng = common::rng(3);
    for d in 1..=5 {
        for _ in 0..20 {
            let a = random_gaussian(&mut rng, d);
            let b = random_gaussian(&mut rng, d);
            let rot = common::random_orthogonal(&mut rng, d);
            let rotate_mean = |m: &[f64]| -> Vec<f64> {
                rot.iter().map(|r| r.iter().zip(m).map(|(x, y)| x * y).sum()).collect()
            };
            let rotate_cov = |s: &[f64]| -> Mat {
                let var: Vec<f64> = s.iter().map(|x| x * x).collect();
                common::matmul(&common::matmul(&rot, &common::diag(&var)), &common::transpose(&rot))
            };
            let general = common::wasserstein2_sq_general(
                &rotate_mean(a.mu()),
                &rotate_cov(a.sigma()),
                &rotate_mean(b.mu()),
                &rotate_cov(b.sigma()),
            );
            let fast = wasserstein2_sq(&a, &b).unwrap();
            assert!((general - fast).abs() < 1e-9, "d={d}: {general} vs {fast}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn wasserstein_metric_properties(seed in 0u64..100_000, d in 1usize..8) {
        let mut rng = common::rng(seed);
        let (a, b, c) = (random_gaussian(&mut rng, d), random_gaussian(&mut rng, d), random_gaussian(&mut rng, d));
        let ab = wasserstein2_sq(&a, &b).unwrap();
        prop_assert_eq!(ab, wasserstein2_sq(&b, &a).unwrap());
        prop_assert!(ab > 0.0);
        let bc = wasserstein2_sq(&b, &c).unwrap();
        let ac = wasserstein2_sq(&a, &c).unwrap();
        prop_assert!(ac.sqrt() <= ab.sqrt() + bc.sqrt() + 1e-9);
    }

    #[test]
    fn contrastive_loss_matches_oracle(seed in 0u64..100_000, n in 1usize..6, tau in 0.05f64..2.0) {
        let mut rng = common::rng(seed);
        let s: Vec<_> = (0..n).map(|_| random_gaussian(&mut rng, 3)).collect();
        let t: Vec<_> = (0..n).map(|_| random_gaussian(&mut rng, 3)).collect();
        let c = cfg(1.0, 0.0, tau);
        let got = distribution_contrastive_loss(&s, &t, &c).unwrap().loss;
        let want = loss_oracle(&s, &t, &c);
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn batch_permutation_invariance(seed in 0u64..100_000, n in 2usize..6) {
        let mut rng = common::rng(seed);
        let s: Vec<_> = (0..n).map(|_| random_gaussian(&mut rng, 4)).collect();
        let t: Vec<_> = (0..n).map(|_| random_gaussian(&mut rng, 4)).collect();
        let c = cfg(1.0, 0.0, 0.5);
        let base = distribution_contrastive_loss(&s, &t, &c).unwrap().loss;
        let mut sp = s.clone();
        let mut tp = t.clone();
        sp.rotate_left(1);
        tp.rotate_left(1);
        let permuted = distribution_contrastive_loss(&sp, &tp, &c).unwrap().loss;
        prop_assert!((base - permuted).abs() < 1e-12);
    }
}

#[test]
fn similarity_hand_cases() {
    let a = GaussianEmbedding::new(vec![0.0], vec![1.0]).unwrap();
    let b = GaussianEmbedding::new(vec![1.0], vec![2.0]).unwrap();
    assert_eq!(similarity(&a, &a, &cfg(1.0, 0.0, 1.0)).unwrap(), 0.0);
    assert_eq!(similarity(&a, &b, &cfg(0.5, 1.0, 1.0)).unwrap(), 0.0);
    assert!(similarity(&a, &b, &cfg(0.0, 0.0, 1.0)).is_err());
}

#[test]
fn seeded_three_pair_loss_matches_direct_evaluation() {
    let mut rng = common::rng(42);
    let s: Vec<_> = (0..3).map(|_| random_gaussian(&mut rng, 4)).collect();
    let t: Vec<_> = (0..3).map(|_| random_gaussian(&mut rng, 4)).collect();
    let c = ContrastiveConfig::default();
    let got = distribution_contrastive_loss(&s, &t, &c).unwrap();
    let want = loss_oracle(&s, &t, &c);
    assert!((got.loss - want).abs() <= 1e-12 * want.max(1.0), "{} vs {want}", got.loss);
    let mean_s2t = got.s2t.iter().sum::<f64>() / 3.0;
    let mean_t2s = got.t2s.iter().sum::<f64>() / 3.0;
    assert!((0.5 * (mean_s2t + mean_t2s) - got.loss).abs() < 1e-12);
}

#[test]
fn raising_a_positive_similarity_lowers_its_term() {
    let mut rng = common::rng(8);
    let s: Vec<_> = (0..3).map(|_| random_gaussian(&mut rng, 2)).collect();
    let t: Vec<_> = (0..3).map(|_| random_gaussian(&mut rng, 2)).collect();
    let c = cfg(1.0, 0.0, 1.0);
    let before = distribution_contrastive_loss(&s, &t, &c).unwrap().s2t[1];
    // Moving t_1 toward s_1 changes only the (1, 1) entry of row 1.
    let mut moved = t.clone();
    let sigma: Vec<f64> = t[1]
        .sigma()
        .iter()
        .zip(s[1].sigma())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    moved[1] = GaussianEmbedding::new(t[1].mu().to_vec(), sigma).unwrap();
    let w_old = wasserstein2_sq(&s[1], &t[1]).unwrap();
    let w_new = wasserstein2_sq(&s[1], &moved[1]).unwrap();
    assert!(w_new < w_old);
    let after = distribution_contrastive_loss(&s, &moved, &c).unwrap().s2t[1];
    assert!(after < before);
}

fn small_constructor(seed: u64) -> (ParameterStore<f64>, DistributionConstructorParams) {
    let mut store = ParameterStore::new(seed);
    let params =
        DistributionConstructorParams::register(&mut store, "dam", AttentionConfig::new(8, 2).unwrap(), 1).unwrap();
    (store, params)
}

#[test]
fn constructor_matches_step_by_step_oracle() {
    let (store, params) = small_constructor(9);
    let mut rng = common::rng(9);
    let x = common::random_mat(&mut rng, 4, 8);
    let got = construct_distribution(&store, &params, &Tensor::from_rows(&x).unwrap()).unwrap();

    let m = |id: mgcma::ParamId| rows_of(store.get(id));
    let a = &params.attention;
    let mut concat: Mat = vec![Vec::new(); 4];
    for h in 0..2 {
        let q = common::matmul(&x, &m(a.query[h]));
        let k = common::matmul(&x, &m(a.key[h]));
        let v = common::matmul(&x, &m(a.value[h]));
        for (row, head) in concat.iter_mut().zip(common::attention(&q, &k, &v)) {
            row.extend(head);
        }
    }
    let hidden = common::add(&x, &common::matmul(&concat, &m(a.output)));
    let branch = |layer: &mgcma::distribution::LinearParams| -> Vec<f64> {
        let bias = store.get(layer.bias).data().to_vec();
        let out: Mat = common::matmul(&hidden, &m(layer.weight))
            .into_iter()
            .map(|r| r.iter().zip(&bias).map(|(u, b)| u + b).collect())
            .collect();
        common::mean_rows(&out)
    };
    let mu = branch(&params.mu_branch[0]);
    let sigma: Vec<f64> = branch(&params.sigma_branch[0])
        .into_iter()
        .map(|v| common::softplus(v) + 1e-6)
        .collect();
    for (g, w) in got.mu().iter().zip(&mu).chain(got.sigma().iter().zip(&sigma)) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn constructor_is_permutation_invariant_over_tokens() {
    let (store, params) = small_constructor(2);
    let mut rng = common::rng(2);
    let x = common::random_mat(&mut rng, 5, 8);
    let mut reversed = x.clone();
    reversed.reverse();
    let a = construct_distribution(&store, &params, &Tensor::from_rows(&x).unwrap()).unwrap();
    let b = construct_distribution(&store, &params, &Tensor::from_rows(&reversed).unwrap()).unwrap();
    for (u, v) in a.mu().iter().zip(b.mu()).chain(a.sigma().iter().zip(b.sigma())) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn constructor_rejects_empty_and_wrong_width() {
    let (store, params) = small_constructor(1);
    assert!(matches!(
        construct_distribution(&store, &params, &Tensor::zeros(&[0, 8])),
        Err(Error::EmptySequence(_))
    ));
    assert!(construct_distribution(&store, &params, &Tensor::zeros(&[3, 5])).is_err());
}

#[test]
fn constructor_and_loss_gradients() {
    let mut store = ParameterStore::new(6);
    let config = AttentionConfig::new(8, 2).unwrap();
    let sp = DistributionConstructorParams::register(&mut store, "s", config, 1).unwrap();
    let tp = DistributionConstructorParams::register(&mut store, "t", config, 2).unwrap();
    let mut rng = common::rng(6);
    let speech: Vec<Tensor<f64>> = (0..3)
        .map(|_| Tensor::from_rows(&common::random_mat(&mut rng, 4, 8)).unwrap())
        .collect();
    let text: Vec<Tensor<f64>> = (0..3)
        .map(|_| Tensor::from_rows(&common::random_mat(&mut rng, 3, 8)).unwrap())
        .collect();
    let c = cfg(1.0, 0.0, 0.5);
    let report = grad_check(&store, 1e-5, |g, bound| {
        let mut s = Vec::new();
        let mut t = Vec::new();
        for (a, b) in speech.iter().zip(&text) {
            let an = g.constant(a.clone());
            let bn = g.constant(b.clone());
            s.push(construct_distribution_nodes(g, bound, &sp, an)?);
            t.push(construct_distribution_nodes(g, bound, &tp, bn)?);
        }
        Ok(distribution_contrastive_loss_nodes(g, &s, &t, &c)?.loss)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

//! Naive reference implementations used as oracles by the integration tests.
#![allow(dead_code)]

use mgcma::data::{DatasetManifest, LabeledPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn zeros(rows: usize, cols: usize) -> Mat {
    vec![vec![0.0; cols]; rows]
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = zeros(n, m);
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            for l in 0..k {
                out[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn mean_rows(a: &Mat) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise attention softmax(q kᵀ / sqrt(d)) v.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let w = softmax(&scores);
            (0..v[0].len())
                .map(|c| w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum())
                .collect()
        })
        .collect()
}

/// Mean cross-entropy of `logits` rows against `targets`.
pub fn cross_entropy(logits: &Mat, targets: &[usize]) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(row, t)| -softmax(row)[*t].ln())
        .sum::<f64>()
        / logits.len() as f64
}

/// 0.5 * (CE(S) + CE(Sᵀ)) with the diagonal as targets.
pub fn symmetric_info_nce(logits: &Mat) -> f64 {
    let targets: Vec<usize> = (0..logits.len()).collect();
    0.5 * (cross_entropy(logits, &targets) + cross_entropy(&transpose(logits), &targets))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut a = a.clone();
    let mut v = zeros(n, n);
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrtm(a: &Mat) -> Mat {
    let (vals, vecs) = symmetric_eigen(a);
    let n = a.len();
    let mut out = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[i][j] = (0..n).map(|k| vecs[i][k] * vals[k].max(0.0).sqrt() * vecs[j][k]).sum();
        }
    }
    out
}

pub fn trace(a: &Mat) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

/// General squared 2-Wasserstein distance between N(m1, c1) and N(m2, c2):
/// |m1 - m2|^2 + tr(c1 + c2 - 2 (c2^½ c1 c2^½)^½).
pub fn wasserstein2_sq_general(m1: &[f64], c1: &Mat, m2: &[f64], c2: &Mat) -> f64 {
    let d: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b) * (a - b)).sum();
    let r2 = sqrtm(c2);
    let cross = sqrtm(&matmul(&matmul(&r2, c1), &r2));
    d + trace(c1) + trace(c2) - 2.0 * trace(&cross)
}

/// Random orthogonal matrix from Gram-Schmidt on a random square matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let mut basis: Mat = Vec::new();
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let nv = norm(&v);
        if nv > 1e-3 {
            basis.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    basis
}

pub fn diag(v: &[f64]) -> Mat {
    let mut out = zeros(v.len(), v.len());
    for (i, x) in v.iter().enumerate() {
        out[i][i] = *x;
    }
    out
}

/// WA and UA by direct counting over (truth, prediction) pairs.
pub fn count_wa_ua(truth: &[usize], pred: &[usize], classes: usize) -> (f64, f64) {
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    let mut recalls = Vec::new();
    for c in 0..classes {
        let support = truth.iter().filter(|t| **t == c).count();
        if support > 0 {
            let hits = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count();
            recalls.push(hits as f64 / support as f64);
        }
    }
    (
        correct as f64 / truth.len() as f64,
        recalls.iter().sum::<f64>() / recalls.len() as f64,
    )
}

/// Concatenated mean-pooled speech and text features.
pub fn pooled_features(pair: &LabeledPair<f64>) -> Vec<f64> {
    let mean = |t: &mgcma::Tensor64| -> Vec<f64> {
        let rows: Mat = (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect();
        mean_rows(&rows)
    };
    let mut v = mean(&pair.speech.tokens);
    v.extend(mean(&pair.text.tokens));
    v
}

/// Multinomial logistic regression fit by full-batch gradient descent.
pub struct SoftmaxRegression {
    weights: Mat,
    bias: Vec<f64>,
}

impl SoftmaxRegression {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, steps: usize, lr: f64, l2: f64) -> Self {
        let d = x[0].len();
        let mut weights = zeros(classes, d);
        let mut bias = vec![0.0; classes];
        let n = x.len() as f64;
        for _ in 0..steps {
            let mut gw = zeros(classes, d);
            let mut gb = vec![0.0; classes];
            for (xi, yi) in x.iter().zip(y) {
                let logits: Vec<f64> = (0..classes)
                    .map(|c| bias[c] + weights[c].iter().zip(xi).map(|(w, v)| w * v).sum::<f64>())
                    .collect();
                let p = softmax(&logits);
                for c in 0..classes {
                    let err = p[c] - if c == *yi { 1.0 } else { 0.0 };
                    gb[c] += err / n;
                    for (g, v) in gw[c].iter_mut().zip(xi) {
                        *g += err * v / n;
                    }
                }
            }
            for c in 0..classes {
                bias[c] -= lr * gb[c];
                for (w, g) in weights[c].iter_mut().zip(&gw[c]) {
                    *w -= lr * (g + l2 * *w);
                }
            }
        }
        Self { weights, bias }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let scores: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect();
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Leave-one-session-out pooled UA of the logistic-regression baseline.
pub fn logistic_oracle_ua(manifest: &DatasetManifest, classes: usize) -> f64 {
    let pairs = manifest.load_all::<f64>().unwrap();
    let feats: Vec<Vec<f64>> = pairs.iter().map(pooled_features).collect();
    let labels: Vec<usize> = pairs.iter().map(|p| p.label.code()).collect();
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for session in 1..=5u32 {
        let (train, test): (Vec<usize>, Vec<usize>) =
            (0..pairs.len()).partition(|i| pairs[*i].speech.session != session);
        let x: Vec<Vec<f64>> = train.iter().map(|i| feats[*i].clone()).collect();
        let y: Vec<usize> = train.iter().map(|i| labels[*i]).collect();
        let model = SoftmaxRegression::fit(&x, &y, classes, 300, 0.5, 1e-3);
        for i in test {
            truth.push(labels[i]);
            pred.push(model.predict(&feats[i]));
        }
    }
    count_wa_ua(&truth, &pred, classes).1
}

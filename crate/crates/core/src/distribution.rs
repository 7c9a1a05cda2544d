//! Distribution-level alignment.
//!
//! Each utterance is summarized per modality as a diagonal Gaussian
//! `N(mu, diag(sigma^2))`. The constructor runs residual multi-head
//! self-attention over the tokens, projects every token through a `mu` and a
//! `sigma` branch, and mean-pools each branch over the sequence. `sigma` is
//! kept strictly positive with `softplus(.) + 1e-6`.
//!
//! Between diagonal Gaussians the squared 2-Wasserstein distance reduces to
//! `|mu1 - mu2|^2 + |sigma1 - sigma2|^2`. Similarity is `-p * W + q` and the
//! batch loss is a symmetric InfoNCE over those similarities at temperature
//! `tau`.

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, AttentionConfig, AttentionParams};
use crate::contrastive::symmetric_info_nce;
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, ParamId, ParameterStore, Tensor};

/// Lower bound added after the softplus on the `sigma` branch.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Utterance-level diagonal Gaussian; `sigma` holds standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmbedding<T> {
    mu: Vec<T>,
    sigma: Vec<T>,
}

impl<T: Scalar> GaussianEmbedding<T> {
    pub fn new(mu: Vec<T>, sigma: Vec<T>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(dim_err("GaussianEmbedding", format!("{} vs {}", mu.len(), sigma.len())));
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GaussianEmbedding"));
        }
        if sigma.iter().any(|s| *s <= T::zero()) {
            return Err(Error::Degenerate {
                op: "GaussianEmbedding",
                detail: "sigma must be strictly positive".into(),
            });
        }
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Parameters of the similarity `-p * W + q` and the softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig<T> {
    pub p: T,
    pub q: T,
    pub tau: T,
}

impl<T: Scalar> Default for ContrastiveConfig<T> {
    fn default() -> Self {
        Self {
            p: T::one(),
            q: T::zero(),
            tau: T::lit(0.07),
        }
    }
}

impl<T: Scalar> ContrastiveConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > T::zero()) || !(self.tau > T::zero()) || !self.q.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "need p > 0, tau > 0 and finite q (p={}, q={}, tau={})",
                self.p, self.q, self.tau
            )));
        }
        Ok(())
    }
}

/// One dense layer as `(weight, bias)` ids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_weight(format!("{prefix}.w"), fan_in, fan_out)?,
            bias: store.add_bias(format!("{prefix}.b"), fan_out)?,
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, bound: &[NodeId], x: NodeId) -> Result<NodeId> {
        g.linear(x, bound[self.weight.0], Some(bound[self.bias.0]))
    }
}

/// Self-attention plus the `mu` and `sigma` branch linears of one
/// distribution constructor.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionConstructorParams {
    pub attention: AttentionParams,
    pub mu_branch: Vec<LinearParams>,
    pub sigma_branch: Vec<LinearParams>,
}

impl DistributionConstructorParams {
    /// `branch_layers` dense `D × D` layers per branch, applied in sequence.
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        config: AttentionConfig,
        branch_layers: usize,
    ) -> Result<Self> {
        if branch_layers == 0 {
            return Err(Error::InvalidConfig("branch_layers must be at least 1".into()));
        }
        let attention = AttentionParams::register(store, &format!("{prefix}.attn"), config)?;
        let d = config.model_dim;
        let mu_branch = (0..branch_layers)
            .map(|i| LinearParams::register(store, &format!("{prefix}.mu{i}"), d, d))
            .collect::<Result<_>>()?;
        let sigma_branch = (0..branch_layers)
            .map(|i| LinearParams::register(store, &format!("{prefix}.sigma{i}"), d, d))
            .collect::<Result<_>>()?;
        Ok(Self {
            attention,
            mu_branch,
            sigma_branch,
        })
    }
}

/// `mu` and `sigma` of one utterance as graph nodes (each a `D` vector).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianNodes {
    pub mu: NodeId,
    pub sigma: NodeId,
}

impl GaussianNodes {
    pub fn embedding<T: Scalar>(&self, g: &Graph<T>) -> Result<GaussianEmbedding<T>> {
        GaussianEmbedding::new(g.value(self.mu).data().to_vec(), g.value(self.sigma).data().to_vec())
    }
}

/// Builds the Gaussian of one `L × D` token sequence on the tape.
pub fn construct_distribution_nodes<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    params: &DistributionConstructorParams,
    x: NodeId,
) -> Result<GaussianNodes> {
    if g.value(x).rows()? == 0 {
        return Err(Error::EmptySequence("construct_distribution"));
    }
    let attended = multi_head(g, bound, &params.attention, x, x)?;
    let hidden = g.add(x, attended)?;
    let mut mu_tokens = hidden;
    for layer in &params.mu_branch {
        mu_tokens = layer.apply(g, bound, mu_tokens)?;
    }
    let mut sigma_tokens = hidden;
    for layer in &params.sigma_branch {
        sigma_tokens = layer.apply(g, bound, sigma_tokens)?;
    }
    let mu = g.mean_pool(mu_tokens)?;
    let sigma_pre = g.mean_pool(sigma_tokens)?;
    let sigma_pos = g.softplus(sigma_pre)?;
    let sigma = g.shift(sigma_pos, T::lit(SIGMA_FLOOR))?;
    Ok(GaussianNodes { mu, sigma })
}

/// Evaluates the constructor outside of training.
pub fn construct_distribution<T: Scalar>(
    store: &ParameterStore<T>,
    params: &DistributionConstructorParams,
    tokens: &Tensor<T>,
) -> Result<GaussianEmbedding<T>> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = g.constant(tokens.clone());
    construct_distribution_nodes(&mut g, &bound, params, x)?.embedding(&g)
}

/// Squared 2-Wasserstein distance between diagonal Gaussians.
pub fn wasserstein2_sq<T: Scalar>(a: &GaussianEmbedding<T>, b: &GaussianEmbedding<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(dim_err("wasserstein2_sq", format!("{} vs {}", a.dim(), b.dim())));
    }
    let sq = |x: &[T], y: &[T]| x.iter().zip(y).map(|(u, v)| (*u - *v) * (*u - *v)).sum::<T>();
    Ok(sq(&a.mu, &b.mu) + sq(&a.sigma, &b.sigma))
}

/// `-p * W(a, b) + q`.
pub fn similarity<T: Scalar>(
    a: &GaussianEmbedding<T>,
    b: &GaussianEmbedding<T>,
    cfg: &ContrastiveConfig<T>,
) -> Result<T> {
    cfg.validate()?;
    Ok(-cfg.p * wasserstein2_sq(a, b)? + cfg.q)
}

/// Scalar loss with its per-pair direction terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTerms<T> {
    pub loss: T,
    pub s2t: Vec<T>,
    pub t2s: Vec<T>,
}

/// Distribution loss on the tape for paired Gaussians (`speech[i]` and
/// `text[i]` come from the same utterance).
pub fn distribution_contrastive_loss_nodes<T: Scalar>(
    g: &mut Graph<T>,
    speech: &[GaussianNodes],
    text: &[GaussianNodes],
    cfg: &ContrastiveConfig<T>,
) -> Result<crate::contrastive::InfoNceNodes<T>> {
    cfg.validate()?;
    if speech.is_empty() {
        return Err(Error::EmptyBatch("distribution_contrastive_loss"));
    }
    if speech.len() != text.len() {
        return Err(dim_err(
            "distribution_contrastive_loss",
            format!("{} speech vs {} text", speech.len(), text.len()),
        ));
    }
    let stack = |g: &mut Graph<T>, f: &dyn Fn(&GaussianNodes) -> NodeId, xs: &[GaussianNodes]| {
        let ids: Vec<NodeId> = xs.iter().map(f).collect();
        g.stack_rows(&ids)
    };
    let mu_s = stack(g, &|n| n.mu, speech)?;
    let mu_t = stack(g, &|n| n.mu, text)?;
    let sigma_s = stack(g, &|n| n.sigma, speech)?;
    let sigma_t = stack(g, &|n| n.sigma, text)?;
    let d_mu = g.sq_dist(mu_s, mu_t)?;
    let d_sigma = g.sq_dist(sigma_s, sigma_t)?;
    let distance = g.add(d_mu, d_sigma)?;
    let scaled = g.scale(distance, -cfg.p)?;
    let sim = g.shift(scaled, cfg.q)?;
    let logits = g.scale(sim, T::one() / cfg.tau)?;
    symmetric_info_nce(g, logits)
}

/// Distribution loss over already-constructed Gaussians.
pub fn distribution_contrastive_loss<T: Scalar>(
    speech: &[GaussianEmbedding<T>],
    text: &[GaussianEmbedding<T>],
    cfg: &ContrastiveConfig<T>,
) -> Result<ContrastiveTerms<T>> {
    let mut g = Graph::new();
    let mut place = |e: &GaussianEmbedding<T>| GaussianNodes {
        mu: g.constant(Tensor::vector(e.mu.clone())),
        sigma: g.constant(Tensor::vector(e.sigma.clone())),
    };
    let s: Vec<_> = speech.iter().map(&mut place).collect();
    let t: Vec<_> = text.iter().map(&mut place).collect();
    let out = distribution_contrastive_loss_nodes(&mut g, &s, &t, cfg)?;
    Ok(ContrastiveTerms {
        loss: g.value(out.loss).item()?,
        s2t: out.s2t,
        t2s: out.t2s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(mu: &[f64], sigma: &[f64]) -> GaussianEmbedding<f64> {
        GaussianEmbedding::new(mu.to_vec(), sigma.to_vec()).unwrap()
    }

    #[test]
    fn wasserstein_hand_cases() {
        let a = gauss(&[0.0, 0.0], &[1.0, 1.0]);
        let b = gauss(&[1.0, 0.0], &[2.0, 1.0]);
        assert_eq!(wasserstein2_sq(&a, &a).unwrap(), 0.0);
        assert_eq!(wasserstein2_sq(&a, &b).unwrap(), 2.0);
        let c = gauss(&[0.0], &[1.0]);
        assert!(matches!(wasserstein2_sq(&a, &c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn similarity_hand_cases() {
        let a = gauss(&[0.0, 0.0], &[1.0, 1.0]);
        let b = gauss(&[1.0, 0.0], &[2.0, 1.0]);
        let id = ContrastiveConfig { p: 1.0, q: 0.0, tau: 0.07 };
        assert_eq!(similarity(&a, &a, &id).unwrap(), 0.0);
        let cfg = ContrastiveConfig { p: 0.5, q: 1.0, tau: 0.07 };
        assert_eq!(similarity(&a, &b, &cfg).unwrap(), 0.0);
        let bad = ContrastiveConfig { p: 0.0, q: 0.0, tau: 0.07 };
        assert!(similarity(&a, &b, &bad).is_err());
    }

    #[test]
    fn sigma_must_be_positive() {
        assert!(GaussianEmbedding::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianEmbedding::new(vec![0.0], vec![-1.0]).is_err());
        assert!(GaussianEmbedding::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let a = gauss(&[0.3, -1.0], &[0.5, 2.0]);
        let b = gauss(&[2.0, 1.0], &[1.5, 0.1]);
        let out = distribution_contrastive_loss(&[a], &[b], &ContrastiveConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn equal_similarities_give_ln2() {
        let a = gauss(&[1.0, 2.0], &[0.5, 0.5]);
        let speech = vec![a.clone(), a.clone()];
        let text = vec![a.clone(), a];
        let out = distribution_contrastive_loss(&speech, &text, &ContrastiveConfig::default()).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_errors() {
        let a = gauss(&[1.0], &[1.0]);
        let cfg = ContrastiveConfig::default();
        assert!(matches!(
            distribution_contrastive_loss::<f64>(&[], &[], &cfg),
            Err(Error::EmptyBatch(_))
        ));
        assert!(distribution_contrastive_loss(&[a.clone(), a.clone()], &[a], &cfg).is_err());
    }

    #[test]
    fn zero_sigma_branch_gives_softplus_of_zero() {
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let mut store = ParameterStore::<f64>::new(5);
        let params = DistributionConstructorParams::register(&mut store, "dam", cfg, 1).unwrap();
        for layer in &params.sigma_branch {
            store.get_mut(layer.weight).data_mut().fill(0.0);
            store.get_mut(layer.bias).data_mut().fill(0.0);
        }
        let tokens = Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let emb = construct_distribution(&store, &params, &tokens).unwrap();
        assert_eq!(emb.dim(), 8);
        for s in emb.sigma() {
            assert!((s - (2f64.ln() + 1e-6)).abs() < 1e-15);
        }
        let empty = Tensor::zeros(&[0, 8]);
        assert!(construct_distribution(&store, &params, &empty).is_err());
    }
}

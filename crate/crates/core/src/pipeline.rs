//! Model composition: alignment stages in a configurable order followed by a
//! pooled linear classifier.
//!
//! The distribution (DAM) and instance (IAM) stages only attach a loss and
//! pass the running speech/text sequences through untouched; the token stage
//! (TAM) replaces them with their aligned versions. The objective is the
//! unweighted sum `l_da + l_ia + l_ce`, with disabled stages contributing an
//! exact zero.

use std::collections::HashSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::data::{FeatureSequence, LabeledPair, Modality, PairBatch};
use crate::distribution::{
    construct_distribution_nodes, distribution_contrastive_loss_nodes, ContrastiveConfig,
    DistributionConstructorParams, LinearParams,
};
use crate::error::{dim_err, Error, Result};
use crate::instance::{instance_contrastive_loss_nodes, pool_instance_node};
use crate::scalar::Scalar;
use crate::tensor::{grad_check_many, GradCheckReport, Graph, NodeId, ParameterStore, Tensor};
use crate::token::{token_align_nodes, TokenAlignmentParams};

/// Emotion classes with stable integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Angry = 0,
    Happy = 1,
    Sad = 2,
    Neutral = 3,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 4] = [Self::Angry, Self::Happy, Self::Sad, Self::Neutral];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("label code {code} out of range 0..4")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Angry => "angry",
            Self::Happy => "happy",
            Self::Sad => "sad",
            Self::Neutral => "neutral",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Dam,
    Tam,
    Iam,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Dam => "DAM",
            Stage::Tam => "TAM",
            Stage::Iam => "IAM",
        })
    }
}

/// Architecture and loss settings. A stage is enabled exactly when it
/// appears in `stage_order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub stage_order: Vec<Stage>,
    pub model_dim: usize,
    pub num_heads: usize,
    pub n_blocks: usize,
    pub tau: f64,
    pub p: f64,
    pub q: f64,
    pub num_classes: usize,
    /// Unit-normalize pooled vectors before the instance loss.
    pub normalize_instances: bool,
    /// Speech and text branches of the token stage share attention weights.
    pub share_token_branches: bool,
    /// Layer norm after each residual in the token stage.
    pub token_layer_norm: bool,
    /// Dense layers per `mu` / `sigma` branch in the distribution constructor.
    pub branch_layers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stage_order: vec![Stage::Dam, Stage::Tam, Stage::Iam],
            model_dim: 64,
            num_heads: 4,
            n_blocks: 2,
            tau: 0.07,
            p: 1.0,
            q: 0.0,
            num_classes: 4,
            normalize_instances: true,
            share_token_branches: false,
            token_layer_norm: false,
            branch_layers: 1,
        }
    }
}

impl PipelineConfig {
    /// Width 768, 12 heads, 6 token blocks.
    pub fn full_scale() -> Self {
        Self {
            model_dim: 768,
            num_heads: 12,
            n_blocks: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.stage_order {
            if !seen.insert(*s) {
                return Err(Error::InvalidConfig(format!("stage {s} listed twice")));
            }
        }
        self.attention()?;
        if self.n_blocks == 0 || self.branch_layers == 0 {
            return Err(Error::InvalidConfig("n_blocks and branch_layers must be positive".into()));
        }
        if !(1..=EmotionLabel::ALL.len()).contains(&self.num_classes) {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be in 1..=4, got {}",
                self.num_classes
            )));
        }
        ContrastiveConfig {
            p: self.p,
            q: self.q,
            tau: self.tau,
        }
        .validate()
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.model_dim, self.num_heads)
    }

    pub fn enabled(&self, stage: Stage) -> bool {
        self.stage_order.contains(&stage)
    }

    pub fn enabled_stages(&self) -> Vec<Stage> {
        self.stage_order.clone()
    }

    pub fn contrastive<T: Scalar>(&self) -> ContrastiveConfig<T> {
        ContrastiveConfig {
            p: T::lit(self.p),
            q: T::lit(self.q),
            tau: T::lit(self.tau),
        }
    }

    /// Human-readable stage sequence, e.g. `DAM + TAM + IAM`.
    pub fn describe_stages(&self) -> String {
        if self.stage_order.is_empty() {
            return "none".into();
        }
        self.stage_order.iter().map(Stage::to_string).collect::<Vec<_>>().join(" + ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionStageParams {
    pub speech: DistributionConstructorParams,
    pub text: DistributionConstructorParams,
}

/// Every parameter group of the model as ids into its store.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    pub dam: Option<DistributionStageParams>,
    pub tam: Option<TokenAlignmentParams>,
    pub classifier: LinearParams,
}

impl PipelineParams {
    /// Registers parameters for the enabled stages in a fixed order
    /// (DAM, TAM, classifier) regardless of `stage_order`, so reordered
    /// variants start from identical weights.
    pub fn register<T: Scalar>(store: &mut ParameterStore<T>, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let att = cfg.attention()?;
        let dam = if cfg.enabled(Stage::Dam) {
            Some(DistributionStageParams {
                speech: DistributionConstructorParams::register(store, "dam.speech", att, cfg.branch_layers)?,
                text: DistributionConstructorParams::register(store, "dam.text", att, cfg.branch_layers)?,
            })
        } else {
            None
        };
        let tam = if cfg.enabled(Stage::Tam) {
            Some(TokenAlignmentParams::register(
                store,
                "tam",
                att,
                cfg.n_blocks,
                cfg.share_token_branches,
                cfg.token_layer_norm,
            )?)
        } else {
            None
        };
        let classifier = LinearParams::register(store, "classifier", 2 * cfg.model_dim, cfg.num_classes)?;
        Ok(Self { dam, tam, classifier })
    }
}

/// The four objective terms plus every per-pair direction term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub l_da: T,
    pub l_ia: T,
    pub l_ce: T,
    pub total: T,
    pub da_s2t: Vec<T>,
    pub da_t2s: Vec<T>,
    pub ia_s2t: Vec<T>,
    pub ia_t2s: Vec<T>,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes<T> {
    pub logits: NodeId,
    pub l_da: NodeId,
    pub l_ia: NodeId,
    pub l_ce: NodeId,
    pub total: NodeId,
    pub breakdown: LossBreakdown<T>,
    /// Running `(speech, text)` sequences after the last stage.
    pub representations: Vec<(NodeId, NodeId)>,
}

/// Utterance vectors at the three export points.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationTaps<T> {
    /// Mean of the raw input tokens.
    pub encoder: (Vec<T>, Vec<T>),
    /// Mean of the sequences after every stage ran (classifier input).
    pub post_alignment: (Vec<T>, Vec<T>),
    /// `post_alignment` scaled to unit norm, as scored by the instance loss.
    pub pooled: (Vec<T>, Vec<T>),
}

/// Configuration, parameter store and parameter layout.
#[derive(Debug, Clone)]
pub struct MgcmaModel<T> {
    config: PipelineConfig,
    store: ParameterStore<T>,
    params: PipelineParams,
}

impl<T: Scalar> MgcmaModel<T> {
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        let mut store = ParameterStore::new(seed);
        let params = PipelineParams::register(&mut store, &config)?;
        Ok(Self { config, store, params })
    }

    /// Rebuilds the layout for `config` and adopts `store`, which must hold
    /// exactly the expected names and shapes in layout order.
    pub fn from_store(config: PipelineConfig, store: ParameterStore<T>) -> Result<Self> {
        let reference = Self::new(config, store.rng_seed())?;
        if reference.store.len() != store.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                reference.store.len(),
                store.len()
            )));
        }
        for ((_, na, ta), (_, nb, tb)) in reference.store.iter().zip(store.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected {na} {:?}, found {nb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(Self {
            config: reference.config,
            store,
            params: reference.params,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    pub fn params(&self) -> &PipelineParams {
        &self.params
    }

    fn token_node(&self, g: &mut Graph<T>, seq: &FeatureSequence<T>) -> Result<NodeId> {
        let (l, d) = seq.tokens.matrix_dims()?;
        if l == 0 {
            return Err(Error::EmptySequence("forward"));
        }
        if d != self.config.model_dim {
            return Err(dim_err(
                "forward",
                format!("{} features have width {d}, model_dim is {}", seq.utterance_id, self.config.model_dim),
            ));
        }
        Ok(g.constant(seq.tokens.clone()))
    }

    /// Runs every stage and the classifier on the tape.
    pub fn forward_nodes(
        &self,
        g: &mut Graph<T>,
        bound: &[NodeId],
        pairs: &[LabeledPair<T>],
    ) -> Result<ForwardNodes<T>> {
        if pairs.is_empty() {
            return Err(Error::EmptyBatch("forward"));
        }
        let cfg = &self.config;
        let mut reps = Vec::with_capacity(pairs.len());
        for pair in pairs {
            reps.push((self.token_node(g, &pair.speech)?, self.token_node(g, &pair.text)?));
        }
        let zero = g.constant(Tensor::scalar(T::zero()));
        let (mut l_da, mut l_ia) = (zero, zero);
        let mut breakdown = LossBreakdown {
            l_da: T::zero(),
            l_ia: T::zero(),
            l_ce: T::zero(),
            total: T::zero(),
            da_s2t: Vec::new(),
            da_t2s: Vec::new(),
            ia_s2t: Vec::new(),
            ia_t2s: Vec::new(),
        };
        for stage in &cfg.stage_order {
            match stage {
                Stage::Dam => {
                    let dam = self.params.dam.as_ref().ok_or_else(|| missing(Stage::Dam))?;
                    let mut speech = Vec::with_capacity(reps.len());
                    let mut text = Vec::with_capacity(reps.len());
                    for (s, t) in &reps {
                        speech.push(construct_distribution_nodes(g, bound, &dam.speech, *s)?);
                        text.push(construct_distribution_nodes(g, bound, &dam.text, *t)?);
                    }
                    let out = distribution_contrastive_loss_nodes(g, &speech, &text, &cfg.contrastive())?;
                    l_da = out.loss;
                    breakdown.da_s2t = out.s2t;
                    breakdown.da_t2s = out.t2s;
                }
                Stage::Tam => {
                    let tam = self.params.tam.as_ref().ok_or_else(|| missing(Stage::Tam))?;
                    for rep in reps.iter_mut() {
                        let aligned = token_align_nodes(g, bound, tam, rep.0, rep.1)?;
                        *rep = (aligned.speech, aligned.text);
                    }
                }
                Stage::Iam => {
                    let mut speech = Vec::with_capacity(reps.len());
                    let mut text = Vec::with_capacity(reps.len());
                    for (s, t) in &reps {
                        speech.push(pool_instance_node(g, *s, cfg.normalize_instances)?);
                        text.push(pool_instance_node(g, *t, cfg.normalize_instances)?);
                    }
                    let out = instance_contrastive_loss_nodes(g, &speech, &text, T::lit(cfg.tau))?;
                    l_ia = out.loss;
                    breakdown.ia_s2t = out.s2t;
                    breakdown.ia_t2s = out.t2s;
                }
            }
        }

        let mut rows = Vec::with_capacity(reps.len());
        for (s, t) in &reps {
            let ps = g.mean_pool(*s)?;
            let pt = g.mean_pool(*t)?;
            let joint = g.concat_cols(&[ps, pt])?;
            rows.push(self.params.classifier.apply(g, bound, joint)?);
        }
        let logits = g.stack_rows(&rows)?;
        let targets = pairs
            .iter()
            .map(|p| {
                let code = p.label.code();
                if code >= cfg.num_classes {
                    Err(Error::InvalidArgument(format!(
                        "label {} outside the model's {} classes",
                        p.label, cfg.num_classes
                    )))
                } else {
                    Ok(code)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let l_ce = g.cross_entropy(logits, &targets)?;
        let align = g.add(l_da, l_ia)?;
        let total = g.add(align, l_ce)?;
        breakdown.l_da = g.value(l_da).item()?;
        breakdown.l_ia = g.value(l_ia).item()?;
        breakdown.l_ce = g.value(l_ce).item()?;
        breakdown.total = g.value(total).item()?;
        Ok(ForwardNodes {
            logits,
            l_da,
            l_ia,
            l_ce,
            total,
            breakdown,
            representations: reps,
        })
    }

    /// Logits (`N × num_classes`) and the loss breakdown for a batch.
    pub fn forward(&self, batch: &PairBatch<T>) -> Result<(Tensor<T>, LossBreakdown<T>)> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let out = self.forward_nodes(&mut g, &bound, batch.pairs())?;
        Ok((g.value(out.logits).clone(), out.breakdown))
    }

    /// Forward pass plus gradients of the total loss, in store order.
    pub fn loss_and_gradients(
        &self,
        pairs: &[LabeledPair<T>],
    ) -> Result<(Tensor<T>, LossBreakdown<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let out = self.forward_nodes(&mut g, &bound, pairs)?;
        let grads = g.backward(out.total)?.wrt(&bound);
        Ok((g.value(out.logits).clone(), out.breakdown, grads))
    }

    /// Utterance vectors for one pair at every export point.
    pub fn representation_taps(&self, pair: &LabeledPair<T>) -> Result<RepresentationTaps<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let out = self.forward_nodes(&mut g, &bound, std::slice::from_ref(pair))?;
        let (s, t) = out.representations[0];
        let vec_of = |g: &mut Graph<T>, x: NodeId, normalize: bool| -> Result<Vec<T>> {
            let v = pool_instance_node(g, x, normalize)?;
            Ok(g.value(v).data().to_vec())
        };
        let raw_s = g.constant(pair.speech.tokens.clone());
        let raw_t = g.constant(pair.text.tokens.clone());
        Ok(RepresentationTaps {
            encoder: (vec_of(&mut g, raw_s, false)?, vec_of(&mut g, raw_t, false)?),
            post_alignment: (vec_of(&mut g, s, false)?, vec_of(&mut g, t, false)?),
            pooled: (vec_of(&mut g, s, true)?, vec_of(&mut g, t, true)?),
        })
    }
}

fn missing(stage: Stage) -> Error {
    Error::Contract(format!("stage {stage} has no registered parameters"))
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (r, c) = logits.matrix_dims()?;
    if c == 0 {
        return Err(dim_err("predict", "no classes"));
    }
    Ok((0..r)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Random batch of `n` pairs for gradient checking.
pub fn random_batch<T: Scalar>(
    n: usize,
    dim: usize,
    len_speech: usize,
    len_text: usize,
    num_classes: usize,
    seed: u64,
) -> Result<PairBatch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |l: usize| -> Result<Tensor<T>> {
        let data = (0..l * dim)
            .map(|_| T::lit(StandardNormal.sample(&mut rng)))
            .collect();
        Tensor::new(vec![l, dim], data)
    };
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("rand_{i:04}");
        let session = (i % 5) as u32 + 1;
        pairs.push(LabeledPair {
            speech: FeatureSequence::new(id.clone(), Modality::Speech, draw(len_speech)?, session)?,
            text: FeatureSequence::new(id, Modality::Text, draw(len_text)?, session)?,
            label: EmotionLabel::from_code(i % num_classes)?,
        });
    }
    PairBatch::new(pairs)
}

/// Gradient check of `l_da`, `l_ia`, `l_ce` and the total on a small seeded
/// model (width 16, 2 heads, 1 token block, 3 pairs).
pub fn gradient_check_suite(seed: u64, step: f64) -> Result<Vec<(&'static str, GradCheckReport<f64>)>> {
    let config = PipelineConfig {
        model_dim: 16,
        num_heads: 2,
        n_blocks: 1,
        ..PipelineConfig::default()
    };
    let model = MgcmaModel::<f64>::new(config, seed)?;
    let batch = random_batch::<f64>(3, 16, 4, 3, 4, seed.wrapping_add(1))?;
    let reports = grad_check_many(model.store(), step, |g, bound| {
        let out = model.forward_nodes(g, bound, batch.pairs())?;
        Ok(vec![out.l_da, out.l_ia, out.l_ce, out.total])
    })?;
    Ok(["l_da", "l_ia", "l_ce", "total"].into_iter().zip(reports).collect())
}

//! Token-level alignment: a stack of blocks, each running self-attention
//! within every modality followed by cross-attention where speech queries
//! attend to text and text queries attend to speech.
//!
//! Block `i` feeds its self-attention from block `i - 1`'s cross-attention
//! outputs and its cross-attention from its own self-attention outputs.
//! Every sublayer is wrapped in a residual connection.

use crate::attention::{multi_head, AttentionConfig, AttentionParams};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, ParameterStore, Tensor};

/// Attention instances of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlockParams {
    pub speech_self: AttentionParams,
    pub speech_cross: AttentionParams,
    pub text_self: AttentionParams,
    pub text_cross: AttentionParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenAlignmentParams {
    pub blocks: Vec<TokenBlockParams>,
    /// Apply parameter-free layer norm after each residual sum.
    pub layer_norm: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl TokenAlignmentParams {
    /// With `share_branches` the text branch reuses the speech branch's
    /// attention weights.
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        config: AttentionConfig,
        n_blocks: usize,
        share_branches: bool,
        layer_norm: bool,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::InvalidConfig("n_blocks must be at least 1".into()));
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let speech_self = AttentionParams::register(store, &format!("{prefix}.block{b}.speech_self"), config)?;
            let speech_cross = AttentionParams::register(store, &format!("{prefix}.block{b}.speech_cross"), config)?;
            let (text_self, text_cross) = if share_branches {
                (speech_self.clone(), speech_cross.clone())
            } else {
                (
                    AttentionParams::register(store, &format!("{prefix}.block{b}.text_self"), config)?,
                    AttentionParams::register(store, &format!("{prefix}.block{b}.text_cross"), config)?,
                )
            };
            blocks.push(TokenBlockParams {
                speech_self,
                speech_cross,
                text_self,
                text_cross,
            });
        }
        Ok(Self { blocks, layer_norm })
    }
}

/// Text-aware speech and speech-aware text sequences as graph nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedNodes {
    pub speech: NodeId,
    pub text: NodeId,
}

/// Text-aware speech and speech-aware text representations.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair<T> {
    pub speech: Tensor<T>,
    pub text: Tensor<T>,
}

fn residual<T: Scalar>(
    g: &mut Graph<T>,
    input: NodeId,
    update: NodeId,
    layer_norm: bool,
) -> Result<NodeId> {
    let sum = g.add(input, update)?;
    if layer_norm {
        g.layer_norm_rows(sum, T::lit(LAYER_NORM_EPS))
    } else {
        Ok(sum)
    }
}

pub fn token_align_nodes<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    params: &TokenAlignmentParams,
    speech: NodeId,
    text: NodeId,
) -> Result<AlignedNodes> {
    let (ls, ds) = g.value(speech).matrix_dims()?;
    let (lt, dt) = g.value(text).matrix_dims()?;
    if ls == 0 || lt == 0 {
        return Err(Error::EmptySequence("token_align"));
    }
    if ds != dt {
        return Err(dim_err("token_align", format!("speech width {ds}, text width {dt}")));
    }
    let (mut s, mut t) = (speech, text);
    for block in &params.blocks {
        let s_att = multi_head(g, bound, &block.speech_self, s, s)?;
        let t_att = multi_head(g, bound, &block.text_self, t, t)?;
        let s_self = residual(g, s, s_att, params.layer_norm)?;
        let t_self = residual(g, t, t_att, params.layer_norm)?;
        let s_cross = multi_head(g, bound, &block.speech_cross, s_self, t_self)?;
        let t_cross = multi_head(g, bound, &block.text_cross, t_self, s_self)?;
        s = residual(g, s_self, s_cross, params.layer_norm)?;
        t = residual(g, t_self, t_cross, params.layer_norm)?;
    }
    Ok(AlignedNodes { speech: s, text: t })
}

/// Evaluates the stack outside of training.
pub fn token_align<T: Scalar>(
    store: &ParameterStore<T>,
    params: &TokenAlignmentParams,
    speech: &Tensor<T>,
    text: &Tensor<T>,
) -> Result<AlignedPair<T>> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let s = g.constant(speech.clone());
    let t = g.constant(text.clone());
    let out = token_align_nodes(&mut g, &bound, params, s, t)?;
    Ok(AlignedPair {
        speech: g.value(out.speech).clone(),
        text: g.value(out.text).clone(),
    })
}

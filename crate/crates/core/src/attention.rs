//! Scaled dot-product and multi-head attention on the tape.
//!
//! Each head owns its own `D × d` query, key and value projections; the
//! concatenated heads pass through a `D × D` output projection. No masking
//! and no positional terms: inputs are already contextual encoder states.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, ParamId, ParameterStore};

/// Model width and head count. The head width is `model_dim / num_heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        let cfg = Self {
            model_dim,
            num_heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 {
            return Err(Error::InvalidConfig("model_dim and num_heads must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Projection matrices of one attention instance, as ids into a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub config: AttentionConfig,
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
}

impl AttentionParams {
    /// Registers `num_heads` projection triples and one output projection
    /// under `prefix`.
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        config: AttentionConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (dm, dh) = (config.model_dim, config.head_dim());
        let mut query = Vec::with_capacity(config.num_heads);
        let mut key = Vec::with_capacity(config.num_heads);
        let mut value = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            query.push(store.add_weight(format!("{prefix}.head{h}.wq"), dm, dh)?);
            key.push(store.add_weight(format!("{prefix}.head{h}.wk"), dm, dh)?);
            value.push(store.add_weight(format!("{prefix}.head{h}.wv"), dm, dh)?);
        }
        let output = store.add_weight(format!("{prefix}.wo"), dm, dm)?;
        Ok(Self {
            config,
            query,
            key,
            value,
            output,
        })
    }
}

/// `softmax(Q·Kᵀ / sqrt(d)) · V` for `Q: Lq × d`, `K, V: Lk × d`.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let (_, dq) = g.value(q).matrix_dims()?;
    let (lk, dk) = g.value(k).matrix_dims()?;
    let (lv, _) = g.value(v).matrix_dims()?;
    if lk == 0 {
        return Err(Error::EmptySequence("scaled_dot_attention"));
    }
    if dq != dk || lk != lv {
        return Err(dim_err(
            "scaled_dot_attention",
            format!("q width {dq}, k {lk}x{dk}, v rows {lv}"),
        ));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, T::one() / T::from_usize_lossy(dq).sqrt())?;
    let weights = g.softmax_rows(scaled)?;
    g.matmul(weights, v)
}

/// Multi-head attention with queries from `x_q` and keys/values from `x_kv`.
/// Passing the same node twice gives self-attention.
pub fn multi_head<T: Scalar>(
    g: &mut Graph<T>,
    bound: &[NodeId],
    params: &AttentionParams,
    x_q: NodeId,
    x_kv: NodeId,
) -> Result<NodeId> {
    let dm = params.config.model_dim;
    for (name, x) in [("query input", x_q), ("key/value input", x_kv)] {
        let (rows, cols) = g.value(x).matrix_dims()?;
        if rows == 0 {
            return Err(Error::EmptySequence("multi_head"));
        }
        if cols != dm {
            return Err(dim_err("multi_head", format!("{name} width {cols}, model_dim {dm}")));
        }
    }
    let mut heads = Vec::with_capacity(params.config.num_heads);
    for h in 0..params.config.num_heads {
        let q = g.matmul(x_q, bound[params.query[h].0])?;
        let k = g.matmul(x_kv, bound[params.key[h].0])?;
        let v = g.matmul(x_kv, bound[params.value[h].0])?;
        heads.push(scaled_dot_attention(g, q, k, v)?);
    }
    let concat = g.concat_cols(&heads)?;
    g.matmul(concat, bound[params.output.0])
}

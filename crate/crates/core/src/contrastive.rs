//! Symmetric in-batch InfoNCE shared by the distribution- and
//! instance-level objectives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{cross_entropy_terms, Graph, NodeId};

/// Loss node plus the per-pair direction terms that make it up.
#[derive(Debug, Clone)]
pub struct InfoNceNodes<T> {
    /// `(1/2N) Σ (s2t_i + t2s_i)`.
    pub loss: NodeId,
    pub s2t: Vec<T>,
    pub t2s: Vec<T>,
}

/// `logits[i][n]` scores speech `i` against text `n`; the diagonal holds
/// the positives. Rows give the speech-to-text direction and columns the
/// text-to-speech direction.
pub fn symmetric_info_nce<T: Scalar>(g: &mut Graph<T>, logits: NodeId) -> Result<InfoNceNodes<T>> {
    let (n, m) = g.value(logits).matrix_dims()?;
    if n == 0 {
        return Err(Error::EmptyBatch("symmetric_info_nce"));
    }
    if n != m {
        return Err(Error::Contract(format!("similarity matrix must be square, got {n}x{m}")));
    }
    let targets: Vec<usize> = (0..n).collect();
    let s2t = g.cross_entropy(logits, &targets)?;
    let transposed = g.transpose(logits)?;
    let t2s = g.cross_entropy(transposed, &targets)?;
    let both = g.add(s2t, t2s)?;
    let loss = g.scale(both, T::lit(0.5))?;
    Ok(InfoNceNodes {
        loss,
        s2t: cross_entropy_terms(g.value(logits), &targets)?,
        t2s: cross_entropy_terms(g.value(transposed), &targets)?,
    })
}

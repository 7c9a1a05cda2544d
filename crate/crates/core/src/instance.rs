//! Instance-level alignment: one vector per utterance and modality (mean
//! over tokens, then unit-normalized), scored by dot product in a symmetric
//! InfoNCE at temperature `tau`.

use crate::contrastive::{symmetric_info_nce, InfoNceNodes};
use crate::distribution::ContrastiveTerms;
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, Tensor};

/// Deviation from unit norm tolerated when a vector is flagged normalized.
const UNIT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceVector<T> {
    v: Vec<T>,
    normalized: bool,
}

impl<T: Scalar> InstanceVector<T> {
    /// Wraps a raw vector; it is not considered normalized.
    pub fn raw(v: Vec<T>) -> Self {
        Self { v, normalized: false }
    }

    /// Scales `v` to unit Euclidean norm.
    pub fn normalized(v: Vec<T>) -> Result<Self> {
        let norm = v.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if !(norm > T::zero()) {
            return Err(Error::Degenerate {
                op: "InstanceVector::normalized",
                detail: "zero vector".into(),
            });
        }
        Ok(Self {
            v: v.into_iter().map(|x| x / norm).collect(),
            normalized: true,
        })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.v
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// Mean over tokens followed by unit normalization.
pub fn pool_instance<T: Scalar>(tokens: &Tensor<T>) -> Result<InstanceVector<T>> {
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let v = pool_instance_node(&mut g, x, true)?;
    Ok(InstanceVector {
        v: g.value(v).data().to_vec(),
        normalized: true,
    })
}

pub fn pool_instance_node<T: Scalar>(g: &mut Graph<T>, tokens: NodeId, normalize: bool) -> Result<NodeId> {
    let pooled = g.mean_pool(tokens)?;
    if normalize {
        g.l2_normalize(pooled)
    } else {
        Ok(pooled)
    }
}

/// Instance loss on the tape; `speech[i]` and `text[i]` are `D` vectors of
/// the same utterance.
pub fn instance_contrastive_loss_nodes<T: Scalar>(
    g: &mut Graph<T>,
    speech: &[NodeId],
    text: &[NodeId],
    tau: T,
) -> Result<InfoNceNodes<T>> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidConfig("tau must be positive".into()));
    }
    if speech.is_empty() {
        return Err(Error::EmptyBatch("instance_contrastive_loss"));
    }
    if speech.len() != text.len() {
        return Err(dim_err(
            "instance_contrastive_loss",
            format!("{} speech vs {} text", speech.len(), text.len()),
        ));
    }
    let s = g.stack_rows(speech)?;
    let t = g.stack_rows(text)?;
    let tt = g.transpose(t)?;
    let dots = g.matmul(s, tt)?;
    let logits = g.scale(dots, T::one() / tau)?;
    symmetric_info_nce(g, logits)
}

/// Instance loss over pooled vectors. Every input must be normalized.
pub fn instance_contrastive_loss<T: Scalar>(
    speech: &[InstanceVector<T>],
    text: &[InstanceVector<T>],
    tau: T,
) -> Result<ContrastiveTerms<T>> {
    for v in speech.iter().chain(text) {
        let norm = v.v.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if !v.normalized || (norm - T::one()).abs() > T::lit(UNIT_TOLERANCE) {
            return Err(Error::Contract(
                "instance_contrastive_loss requires unit-normalized vectors".into(),
            ));
        }
    }
    let mut g = Graph::new();
    let s: Vec<_> = speech.iter().map(|v| g.constant(Tensor::vector(v.v.clone()))).collect();
    let t: Vec<_> = text.iter().map(|v| g.constant(Tensor::vector(v.v.clone()))).collect();
    let out = instance_contrastive_loss_nodes(&mut g, &s, &t, tau)?;
    Ok(ContrastiveTerms {
        loss: g.value(out.loss).item()?,
        s2t: out.s2t,
        t2s: out.t2s,
    })
}

//! Matching scores between two feature maps and the attention-weighted
//! context they induce.
//!
//! Feature maps are `hidden x positions`. For a target map `Hx` (`d x m`)
//! and context map `Hy` (`d x n`) the raw scores form an `m x n` matrix
//! `E`, the weights `A` are the masked row softmax of `E`, and the attentive
//! context is `Hy * A^T` (`d x m`), column `i` being the weighted average of
//! the context columns for target position `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMethod {
    /// `hx_i . hy_j`
    #[default]
    Dot,
    /// `hx_i^T W_e hy_j`
    Bilinear,
    /// `score_vector . tanh(W_e hx_i + U_e hy_j)`
    Additive,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchParams {
    pub method: MatchMethod,
    pub size: usize,
    pub weight: Option<ParamId>,
    pub context_weight: Option<ParamId>,
    pub score_vector: Option<ParamId>,
}

impl MatchParams {
    /// Registers the tensors `method` needs at hidden size `size` under
    /// `prefix` (none for dot product).
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        method: MatchMethod,
        size: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        let mut p = MatchParams {
            method,
            size,
            weight: None,
            context_weight: None,
            score_vector: None,
        };
        match method {
            MatchMethod::Dot => {}
            MatchMethod::Bilinear => {
                p.weight = Some(store.add(format!("{prefix}.weight"), init.glorot(size, size))?);
            }
            MatchMethod::Additive => {
                p.weight = Some(store.add(format!("{prefix}.weight"), init.glorot(size, size))?);
                p.context_weight = Some(store.add(format!("{prefix}.context_weight"), init.glorot(size, size))?);
                let limit = (6.0 / (size + 1) as f64).sqrt();
                p.score_vector = Some(store.add(format!("{prefix}.score_vector"), init.uniform(&[size], limit))?);
            }
        }
        Ok(p)
    }

    /// Looks the tensors up by name in an already-populated store.
    pub fn lookup(store: &ParamStore, prefix: &str, method: MatchMethod, size: usize) -> Result<Self> {
        let get = |s: &str| {
            let name = format!("{prefix}.{s}");
            store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let mut p = MatchParams {
            method,
            size,
            weight: None,
            context_weight: None,
            score_vector: None,
        };
        match method {
            MatchMethod::Dot => {}
            MatchMethod::Bilinear => p.weight = Some(get("weight")?),
            MatchMethod::Additive => {
                p.weight = Some(get("weight")?);
                p.context_weight = Some(get("context_weight")?);
                p.score_vector = Some(get("score_vector")?);
            }
        }
        Ok(p)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.weight, self.context_weight, self.score_vector]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Raw `m x n` matching scores between the columns of `hx` and `hy`.
pub fn match_scores(g: &mut Graph<'_>, hx: NodeId, hy: NodeId, params: &MatchParams) -> Result<NodeId> {
    let (dx, dy) = (g.value(hx).rows(), g.value(hy).rows());
    if dx != dy {
        return Err(Error::dim(
            "match_scores",
            format!("target hidden size {dx} vs context hidden size {dy}"),
        ));
    }
    if params.method != MatchMethod::Dot && dx != params.size {
        return Err(Error::dim(
            "match_scores",
            format!("hidden size {dx} vs matching size {}", params.size),
        ));
    }
    let missing = || Error::Contract("matching parameters not registered".into());
    match params.method {
        MatchMethod::Dot => {
            let xt = g.transpose(hx);
            g.matmul(xt, hy)
        }
        MatchMethod::Bilinear => {
            let w = g.param(params.weight.ok_or_else(missing)?);
            let xt = g.transpose(hx);
            let wy = g.matmul(w, hy)?;
            g.matmul(xt, wy)
        }
        MatchMethod::Additive => {
            let w = g.param(params.weight.ok_or_else(missing)?);
            let u = g.param(params.context_weight.ok_or_else(missing)?);
            let v = g.param(params.score_vector.ok_or_else(missing)?);
            let a = g.matmul(w, hx)?;
            let b = g.matmul(u, hy)?;
            g.additive_scores(a, b, v)
        }
    }
}

/// Which context positions each target position may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub columns: Vec<bool>,
    pub exclude_diagonal: bool,
}

impl AttentionMask {
    pub fn all(n: usize) -> Self {
        AttentionMask {
            columns: vec![true; n],
            exclude_diagonal: false,
        }
    }

    pub fn columns(mask: &[bool]) -> Self {
        AttentionMask {
            columns: mask.to_vec(),
            exclude_diagonal: false,
        }
    }

    pub fn without_diagonal(mut self) -> Self {
        self.exclude_diagonal = true;
        self
    }

    /// Row-major `m x n` mask.
    pub fn expand(&self, m: usize) -> Vec<bool> {
        let n = self.columns.len();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(self.columns[j] && !(self.exclude_diagonal && i == j));
            }
        }
        out
    }
}

/// Graph nodes of one attention step.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub scores: NodeId,
    pub weights: NodeId,
    /// `d x m` attentive context.
    pub context: NodeId,
}

/// Softmax-normalizes `scores` over unmasked context positions and averages
/// the columns of `hy` with those weights.
pub fn attentive_context(g: &mut Graph<'_>, scores: NodeId, hy: NodeId, mask: &AttentionMask) -> Result<Attended> {
    let (m, n) = (g.value(scores).rows(), g.value(scores).cols());
    if g.value(hy).cols() != n || mask.columns.len() != n {
        return Err(Error::dim(
            "attentive_context",
            format!(
                "scores {m}x{n}, context {} columns, mask {}",
                g.value(hy).cols(),
                mask.columns.len()
            ),
        ));
    }
    if !mask.columns.iter().any(|&b| b) {
        return Err(Error::EmptyContext("every context position is masked".into()));
    }
    let weights = g.masked_softmax_rows(scores, &mask.expand(m))?;
    let wt = g.transpose(weights);
    let context = g.matmul(hy, wt)?;
    Ok(Attended {
        scores,
        weights,
        context,
    })
}

/// Materialized scores and normalized weights, target length by context length.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub scores: Tensor,
    pub weights: Tensor,
    pub mask: Vec<bool>,
}

impl AttentionMatrix {
    pub fn from_graph(g: &Graph<'_>, att: &Attended, mask: &AttentionMask) -> Self {
        let scores = g.value(att.scores).as_matrix();
        let m = scores.rows();
        AttentionMatrix {
            scores,
            weights: g.value(att.weights).as_matrix(),
            mask: mask.expand(m),
        }
    }

    pub fn rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn cols(&self) -> usize {
        self.weights.cols()
    }
}

//! Hierarchical history encoder: utterance vectors, the self-attentive
//! session aggregator, and the stacked history memory.

use crate::config::ModelConfig;
use crate::data::PAD;
use crate::error::{HahtError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{encoder_stack, Dropout, EncoderLayerWeights, StackWeights};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AggregatorWeights {
    /// `d_a x d`
    pub w_q: Var,
    /// `1 x d_a`
    pub w_k: Var,
}

impl AggregatorWeights {
    pub fn load(g: &mut Graph) -> Self {
        Self {
            w_q: g.param("agg.wq"),
            w_k: g.param("agg.wk"),
        }
    }
}

/// The `M x d` memory and the per-session attention weights that built it.
#[derive(Debug, Clone)]
pub struct HistoryMemory {
    pub c: Var,
    pub alpha: Vec<Vec<f64>>,
}

/// One utterance vector: embed, run the encoder with PAD positions masked,
/// max-pool over the non-PAD rows.
///
/// Only the prefix up to the last non-PAD id is materialized. Masked rows
/// can neither be attended to nor win the pooling, so trailing PAD rows do
/// not change the result.
pub fn encode_utterance(
    g: &mut Graph,
    ids: &[usize],
    embed: Var,
    stack: &StackWeights<EncoderLayerWeights>,
    n_heads: usize,
    dropout: &mut Dropout,
) -> Result<Var> {
    let len = ids
        .iter()
        .rposition(|&id| id != PAD)
        .map(|p| p + 1)
        .ok_or(HahtError::AllMasked("utterance"))?;
    let ids = &ids[..len];
    let mask: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
    let mask = mask.iter().any(|b| !b).then_some(mask.as_slice());
    let x = g.gather(embed, ids);
    let h = encoder_stack(g, x, mask, stack, n_heads, dropout)?;
    g.max_pool(h, mask)
}

/// `alpha = softmax(W_k tanh(W_q U^T))`, `c = alpha U`.
///
/// Returns `(c, alpha)` as `1 x d` and `1 x n` nodes.
pub fn aggregate_session(g: &mut Graph, u: Var, agg: &AggregatorWeights) -> Result<(Var, Var)> {
    let hidden = g.matmul_nt(agg.w_q, u);
    let hidden = g.tanh(hidden);
    let scores = g.matmul(agg.w_k, hidden);
    let alpha = g.softmax(scores, None)?;
    let c = g.matmul(alpha, u);
    Ok((c, alpha))
}

/// Encodes every session into one memory row. `sessions[i][j]` holds the
/// role-prefixed, padded ids of utterance `j` in session `i`.
pub fn encode_history(
    g: &mut Graph,
    cfg: &ModelConfig,
    sessions: &[Vec<Vec<usize>>],
    embed: Var,
    stack: &StackWeights<EncoderLayerWeights>,
    agg: &AggregatorWeights,
    dropout: &mut Dropout,
) -> Result<HistoryMemory> {
    if sessions.is_empty() {
        let c = g.constant(Tensor::zeros(0, cfg.d));
        return Ok(HistoryMemory { c, alpha: vec![] });
    }
    let mut rows = Vec::with_capacity(sessions.len());
    let mut alphas = Vec::with_capacity(sessions.len());
    for session in sessions {
        if session.is_empty() {
            return Err(HahtError::EmptySession);
        }
        let utterances = session
            .iter()
            .map(|ids| encode_utterance(g, ids, embed, stack, cfg.n_heads, dropout))
            .collect::<Result<Vec<_>>>()?;
        let u = g.concat_rows(&utterances);
        let (c, alpha) = aggregate_session(g, u, agg)?;
        alphas.push(g.value(alpha).data().to_vec());
        rows.push(c);
    }
    let c = g.concat_rows(&rows);
    Ok(HistoryMemory { c, alpha: alphas })
}

//! History-aware context encoder.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::{Session, Utterance, Vocabulary};
use crate::error::{HahtError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{encoder_stack, sinusoidal_positions, Dropout, EncoderLayerWeights, StackWeights};

/// Concatenated, role-prefixed context ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContextTokens {
    pub ids: Vec<usize>,
    /// Start offset of each utterance that survived truncation.
    pub boundaries: Vec<usize>,
}

impl ContextTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Joins utterances (each led by its role id) and keeps the most recent
/// `l_ctx` ids.
pub fn prepare_context_tokens(
    context: &Session,
    vocab: &Vocabulary,
    l_ctx: usize,
) -> Result<ContextTokens> {
    if context.is_empty() {
        return Err(HahtError::EmptySession);
    }
    Ok(join_utterances(context.utterances.iter(), vocab, l_ctx))
}

pub(crate) fn join_utterances<'a>(
    utterances: impl Iterator<Item = &'a Utterance>,
    vocab: &Vocabulary,
    l_ctx: usize,
) -> ContextTokens {
    let mut ids = Vec::new();
    let mut starts = Vec::new();
    for u in utterances {
        starts.push(ids.len());
        ids.push(Vocabulary::role_id(u.role));
        ids.extend(u.tokens.iter().map(|t| vocab.id(t)));
    }
    let drop = ids.len().saturating_sub(l_ctx);
    let ids = ids.split_off(drop);
    let boundaries = starts
        .into_iter()
        .filter(|&s| s >= drop)
        .map(|s| s - drop)
        .collect();
    ContextTokens { ids, boundaries }
}

/// Encoder output over `[C; S]`: memory rows first, then context tokens.
#[derive(Debug, Clone)]
pub struct ContextEncoding {
    pub output: Var,
    pub memory_rows: usize,
    pub context_rows: usize,
    /// Session aggregator weights, when a hierarchical memory was built.
    pub alpha: Vec<Vec<f64>>,
}

impl ContextEncoding {
    /// Context-updated history memory, `M x d`.
    pub fn memory(&self, g: &mut Graph) -> Var {
        g.slice_rows(self.output, 0, self.memory_rows)
    }

    /// History-aware context encoding, `n_x x d`.
    pub fn context(&self, g: &mut Graph) -> Var {
        g.slice_rows(self.output, self.memory_rows, self.context_rows)
    }
}

/// Embeds the context with positions, stacks the history memory above it
/// (no positions on memory rows) and runs full self-attention over both.
pub fn encode_context(
    g: &mut Graph,
    cfg: &ModelConfig,
    memory: Var,
    ctx: &ContextTokens,
    embed: Var,
    stack: &StackWeights<EncoderLayerWeights>,
    dropout: &mut Dropout,
) -> Result<ContextEncoding> {
    if ctx.is_empty() {
        return Err(HahtError::EmptySession);
    }
    let memory_rows = g.shape(memory)[0];
    let tokens = g.gather(embed, &ctx.ids);
    let pos = g.constant(sinusoidal_positions(ctx.len(), cfg.d));
    let tokens = g.add(tokens, pos);
    let tokens = dropout.apply(g, tokens);
    let joined = if memory_rows == 0 {
        tokens
    } else {
        g.concat_rows(&[memory, tokens])
    };
    let output = encoder_stack(g, joined, None, stack, cfg.n_heads, dropout)?;
    Ok(ContextEncoding {
        output,
        memory_rows,
        context_rows: ctx.len(),
        alpha: vec![],
    })
}

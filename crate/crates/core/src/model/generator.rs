//! Response generator: decoder, generic and history distributions, the
//! generate/copy switch, and greedy and beam decoding.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::{HistoryVocabMask, BOS, EOS, PAD, ROLE_ASSISTANT, ROLE_USER};
use crate::error::{HahtError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{decoder_stack, sinusoidal_positions, DecoderLayerWeights, Dropout, StackWeights};
use crate::tensor::Tensor;

use super::context::ContextEncoding;

/// Decoder states for a BOS-led prefix, cross-attending to `[C_s; S_c]`.
pub fn decoder_hidden(
    g: &mut Graph,
    cfg: &ModelConfig,
    enc: &ContextEncoding,
    prefix: &[usize],
    embed: Var,
    stack: &StackWeights<DecoderLayerWeights>,
    dropout: &mut Dropout,
) -> Result<Var> {
    assert_eq!(
        prefix.first(),
        Some(&BOS),
        "decoder prefix must start with BOS"
    );
    let x = g.gather(embed, prefix);
    let pos = g.constant(sinusoidal_positions(prefix.len(), cfg.d));
    let x = g.add(x, pos);
    let x = dropout.apply(g, x);
    decoder_stack(g, x, enc.output, None, stack, cfg.n_heads, dropout)
}

/// `softmax(FC1(o))` per row of `o`.
pub fn generic_distribution(g: &mut Graph, o: Var) -> Result<Var> {
    let (w, b) = (g.param("fc1.w"), g.param("fc1.b"));
    let logits = g.matmul(o, w);
    let logits = g.add_row(logits, b);
    g.softmax(logits, None)
}

/// Max-pooled context-updated memory, `1 x d`. Errors when `M = 0`.
pub fn pooled_memory(g: &mut Graph, c_s: Var) -> Result<Var> {
    g.max_pool(c_s, None)
        .map_err(|_| HahtError::Config("history distribution needs at least one memory row".into()))
}

/// `softmax(FC2(maxpool(C_s)))` restricted to the history vocabulary.
pub fn history_distribution(g: &mut Graph, c_s: Var, mask: &HistoryVocabMask) -> Result<Var> {
    let pooled = pooled_memory(g, c_s)?;
    history_distribution_pooled(g, pooled, mask)
}

pub(crate) fn history_distribution_pooled(
    g: &mut Graph,
    pooled: Var,
    mask: &HistoryVocabMask,
) -> Result<Var> {
    if mask.is_empty() {
        return Err(HahtError::AllMasked("history vocabulary"));
    }
    let (w, b) = (g.param("fc2.w"), g.param("fc2.b"));
    let logits = g.matmul(pooled, w);
    let logits = g.add_row(logits, b);
    g.softmax(logits, Some(mask.as_slice()))
}

/// `[alpha_vg, alpha_vh] = softmax(FC3([o; maxpool(C_s)]))` per row of `o`.
pub fn switch_probabilities(g: &mut Graph, o: Var, c_s: Var) -> Result<Var> {
    let pooled = pooled_memory(g, c_s)?;
    switch_probabilities_pooled(g, o, pooled)
}

pub(crate) fn switch_probabilities_pooled(g: &mut Graph, o: Var, pooled: Var) -> Result<Var> {
    let n = g.shape(o)[0];
    let ones = g.constant(Tensor::filled(n, 1, 1.0));
    let tiled = g.matmul(ones, pooled);
    let joined = g.concat_cols(&[o, tiled]);
    let (w, b) = (g.param("fc3.w"), g.param("fc3.b"));
    let logits = g.matmul(joined, w);
    let logits = g.add_row(logits, b);
    g.softmax(logits, None)
}

/// `P = alpha_vg * P_vg + alpha_vh * P_vh`, with `P_vh` shared by all rows.
pub fn mix(g: &mut Graph, p_vg: Var, p_vh: Var, alpha: Var) -> Var {
    let a_g = g.slice_cols(alpha, 0, 1);
    let a_h = g.slice_cols(alpha, 1, 1);
    let generic = g.mul_col(p_vg, a_g);
    let copied = g.matmul(a_h, p_vh);
    g.add(generic, copied)
}

/// Nodes produced for one decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct Distributions {
    /// Final next-token distribution, one row per prefix position.
    pub p: Var,
    pub p_vg: Var,
    /// Present only when the switch is active.
    pub p_vh: Option<Var>,
    pub alpha: Option<Var>,
}

/// One greedy step's diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub token: usize,
    pub token_text: String,
    pub alpha_vg: Option<f64>,
    pub alpha_vh: Option<f64>,
    pub copied: bool,
    pub top_generic: Vec<(String, f64)>,
    pub top_history: Vec<(String, f64)>,
    pub top_mixture: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationOutput {
    /// Emitted ids, without BOS and without the terminating EOS.
    pub ids: Vec<usize>,
    pub ended_with_eos: bool,
    pub steps: Vec<StepDiagnostics>,
}

/// What a greedy step needs from a model: the three distributions for the
/// last position of `prefix`.
pub struct StepDistribution {
    pub p: Vec<f64>,
    pub p_vg: Vec<f64>,
    pub p_vh: Option<Vec<f64>>,
    pub alpha: Option<(f64, f64)>,
}

fn excluded_from_argmax(id: usize) -> bool {
    matches!(id, PAD | BOS | ROLE_USER | ROLE_ASSISTANT)
}

/// Argmax over allowed ids; ties go to the lowest id.
pub fn argmax_token(p: &[f64]) -> usize {
    let mut best = EOS;
    let mut best_p = f64::NEG_INFINITY;
    for (id, &v) in p.iter().enumerate() {
        if excluded_from_argmax(id) {
            continue;
        }
        if v > best_p {
            best = id;
            best_p = v;
        }
    }
    best
}

pub fn top_k(p: &[f64], k: usize, token_text: &dyn Fn(usize) -> String) -> Vec<(String, f64)> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|i| (token_text(i), p[i]))
        .collect()
}

/// Greedy decoding from BOS until EOS or `max_len` emitted tokens.
pub fn greedy_decode_with<F>(
    mut next: F,
    max_len: usize,
    token_text: &dyn Fn(usize) -> String,
) -> Result<GenerationOutput>
where
    F: FnMut(&[usize]) -> Result<StepDistribution>,
{
    let mut prefix = vec![BOS];
    let mut steps = Vec::new();
    let mut ended = false;
    while prefix.len() - 1 < max_len {
        let d = next(&prefix)?;
        let tok = argmax_token(&d.p);
        let copied = match (&d.p_vh, d.alpha) {
            (Some(p_vh), Some((a_g, a_h))) => a_h * p_vh[tok] > a_g * d.p_vg[tok],
            _ => false,
        };
        steps.push(StepDiagnostics {
            token: tok,
            token_text: token_text(tok),
            alpha_vg: d.alpha.map(|a| a.0),
            alpha_vh: d.alpha.map(|a| a.1),
            copied,
            top_generic: top_k(&d.p_vg, 5, token_text),
            top_history: d
                .p_vh
                .as_deref()
                .map(|p| top_k(p, 5, token_text))
                .unwrap_or_default(),
            top_mixture: top_k(&d.p, 5, token_text),
        });
        if tok == EOS {
            ended = true;
            break;
        }
        prefix.push(tok);
    }
    Ok(GenerationOutput {
        ids: prefix[1..].to_vec(),
        ended_with_eos: ended,
        steps,
    })
}

/// Beam search ranked by length-normalized log-probability (EOS counts as a
/// token). Hypotheses still open after `max_len` tokens compete with the
/// finished ones. Step diagnostics are not recorded.
pub fn beam_search_with<F>(mut next: F, width: usize, max_len: usize) -> Result<GenerationOutput>
where
    F: FnMut(&[usize]) -> Result<StepDistribution>,
{
    if width == 0 {
        return Err(HahtError::Config("beam width must be at least 1".into()));
    }
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    // (tokens without BOS or EOS, normalized score, ended with EOS)
    let mut finished: Vec<(Vec<usize>, f64, bool)> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (b, (prefix, logp)) in beams.iter().enumerate() {
            let d = next(prefix)?;
            for (tok, &p) in d.p.iter().enumerate() {
                if p > 0.0 && !excluded_from_argmax(tok) {
                    candidates.push((b, tok, logp + p.ln()));
                }
            }
        }
        // stable: equal scores keep beam order, then lower token id
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut grown = Vec::new();
        for (b, tok, logp) in candidates.into_iter().take(width) {
            let prefix = &beams[b].0;
            if tok == EOS {
                finished.push((prefix[1..].to_vec(), logp / prefix.len() as f64, true));
            } else {
                let mut p = prefix.clone();
                p.push(tok);
                grown.push((p, logp));
            }
        }
        beams = grown;
        if beams.is_empty() || finished.len() >= width {
            break;
        }
    }
    for (prefix, logp) in beams {
        let n = (prefix.len() - 1).max(1) as f64;
        finished.push((prefix[1..].to_vec(), logp / n, false));
    }
    let best = finished
        .into_iter()
        .reduce(|best, h| if h.1 > best.1 { h } else { best })
        .expect("at least one hypothesis");
    Ok(GenerationOutput {
        ids: best.0,
        ended_with_eos: best.2,
        steps: Vec::new(),
    })
}

//! Transformer building blocks on top of [`Graph`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HahtError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Dropout state for one forward pass. A zero rate or a missing generator
/// makes every dropout call the identity.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if self.rate <= 0.0 {
            return x;
        }
        let [r, c] = g.shape(x);
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        g.mul_const(x, Tensor::from_vec(r, c, mask))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

impl AttentionWeights {
    pub fn load(g: &mut Graph, prefix: &str) -> Self {
        Self {
            q: g.param(&format!("{prefix}.q")),
            k: g.param(&format!("{prefix}.k")),
            v: g.param(&format!("{prefix}.v")),
            o: g.param(&format!("{prefix}.o")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormWeights {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNormWeights {
    pub fn load(g: &mut Graph, prefix: &str) -> Self {
        Self {
            gain: g.param(&format!("{prefix}.g")),
            bias: g.param(&format!("{prefix}.b")),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.layer_norm(x, self.gain, self.bias)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FeedForwardWeights {
    pub fn load(g: &mut Graph, prefix: &str) -> Self {
        Self {
            w1: g.param(&format!("{prefix}.w1")),
            b1: g.param(&format!("{prefix}.b1")),
            w2: g.param(&format!("{prefix}.w2")),
            b2: g.param(&format!("{prefix}.b2")),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.matmul(x, self.w1);
        let h = g.add_row(h, self.b1);
        let h = g.gelu(h);
        let h = g.matmul(h, self.w2);
        g.add_row(h, self.b2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerWeights {
    pub ln1: LayerNormWeights,
    pub attn: AttentionWeights,
    pub ln2: LayerNormWeights,
    pub ff: FeedForwardWeights,
}

impl EncoderLayerWeights {
    pub fn load(g: &mut Graph, prefix: &str) -> Self {
        Self {
            ln1: LayerNormWeights::load(g, &format!("{prefix}.ln1")),
            attn: AttentionWeights::load(g, &format!("{prefix}.attn")),
            ln2: LayerNormWeights::load(g, &format!("{prefix}.ln2")),
            ff: FeedForwardWeights::load(g, &format!("{prefix}.ff")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerWeights {
    pub ln1: LayerNormWeights,
    pub self_attn: AttentionWeights,
    pub ln2: LayerNormWeights,
    pub cross_attn: AttentionWeights,
    pub ln3: LayerNormWeights,
    pub ff: FeedForwardWeights,
}

impl DecoderLayerWeights {
    pub fn load(g: &mut Graph, prefix: &str) -> Self {
        Self {
            ln1: LayerNormWeights::load(g, &format!("{prefix}.ln1")),
            self_attn: AttentionWeights::load(g, &format!("{prefix}.self")),
            ln2: LayerNormWeights::load(g, &format!("{prefix}.ln2")),
            cross_attn: AttentionWeights::load(g, &format!("{prefix}.cross")),
            ln3: LayerNormWeights::load(g, &format!("{prefix}.ln3")),
            ff: FeedForwardWeights::load(g, &format!("{prefix}.ff")),
        }
    }
}

/// Layers of a stack plus the final normalization applied after them.
#[derive(Debug, Clone)]
pub struct StackWeights<L> {
    pub layers: Vec<L>,
    pub final_norm: Option<LayerNormWeights>,
}

impl StackWeights<EncoderLayerWeights> {
    pub fn load_encoder(g: &mut Graph, prefix: &str, n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|l| EncoderLayerWeights::load(g, &format!("{prefix}.{l}")))
            .collect();
        let final_norm =
            (n_layers > 0).then(|| LayerNormWeights::load(g, &format!("{prefix}.ln_f")));
        Self { layers, final_norm }
    }
}

impl StackWeights<DecoderLayerWeights> {
    pub fn load_decoder(g: &mut Graph, prefix: &str, n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|l| DecoderLayerWeights::load(g, &format!("{prefix}.{l}")))
            .collect();
        let final_norm =
            (n_layers > 0).then(|| LayerNormWeights::load(g, &format!("{prefix}.ln_f")));
        Self { layers, final_norm }
    }
}

/// Row-major `n_q x n_k` permission matrix: key `j` is visible to query `i`
/// when it is unmasked and, for causal attention, `j <= i`.
pub fn attention_mask(
    n_q: usize,
    n_k: usize,
    key_mask: Option<&[bool]>,
    causal: bool,
) -> Vec<bool> {
    let mut mask = vec![true; n_q * n_k];
    for i in 0..n_q {
        for j in 0..n_k {
            let visible = key_mask.is_none_or(|m| m[j]) && (!causal || j <= i);
            mask[i * n_k + j] = visible;
        }
    }
    mask
}

/// Scaled dot-product attention over `n_heads` heads, scaling by
/// `1/sqrt(d/n_heads)`, followed by the output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    key_mask: Option<&[bool]>,
    causal: bool,
    w: &AttentionWeights,
    n_heads: usize,
) -> Result<Var> {
    let [n_q, d] = g.shape(queries);
    let [n_k, d_k] = g.shape(keys_values);
    assert_eq!(d, d_k, "query and key widths differ");
    assert!(n_heads > 0 && d % n_heads == 0, "d must divide into heads");
    if let Some(m) = key_mask {
        assert_eq!(m.len(), n_k, "key mask length mismatch");
    }
    let mask = attention_mask(n_q, n_k, key_mask, causal);
    if (0..n_q).any(|i| !mask[i * n_k..(i + 1) * n_k].iter().any(|&b| b)) {
        return Err(HahtError::AllMasked("attention"));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = g.matmul(queries, w.q);
    let k = g.matmul(keys_values, w.k);
    let v = g.matmul(keys_values, w.v);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores, Some(&mask))?;
        heads.push(g.matmul(weights, vh));
    }
    let joined = if n_heads == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    Ok(g.matmul(joined, w.o))
}

/// Pre-norm transformer encoder. Positions with `pad_mask[i] == false` are
/// never attended to, so they cannot influence unmasked outputs.
pub fn encoder_stack(
    g: &mut Graph,
    inputs: Var,
    pad_mask: Option<&[bool]>,
    weights: &StackWeights<EncoderLayerWeights>,
    n_heads: usize,
    dropout: &mut Dropout,
) -> Result<Var> {
    let n = g.shape(inputs)[0];
    if n == 0 || pad_mask.is_some_and(|m| !m.iter().any(|&b| b)) {
        return Err(HahtError::AllMasked("encoder input"));
    }
    let mut x = inputs;
    for layer in &weights.layers {
        let h = layer.ln1.apply(g, x);
        let a = multi_head_attention(g, h, h, pad_mask, false, &layer.attn, n_heads)?;
        let a = dropout.apply(g, a);
        x = g.add(x, a);
        let h = layer.ln2.apply(g, x);
        let f = layer.ff.apply(g, h);
        let f = dropout.apply(g, f);
        x = g.add(x, f);
    }
    Ok(match &weights.final_norm {
        Some(ln) => ln.apply(g, x),
        None => x,
    })
}

/// Pre-norm transformer decoder with causal self-attention and
/// cross-attention over `memory`. An empty memory skips cross-attention.
pub fn decoder_stack(
    g: &mut Graph,
    targets: Var,
    memory: Var,
    memory_mask: Option<&[bool]>,
    weights: &StackWeights<DecoderLayerWeights>,
    n_heads: usize,
    dropout: &mut Dropout,
) -> Result<Var> {
    let has_memory = g.shape(memory)[0] > 0;
    let mut x = targets;
    for layer in &weights.layers {
        let h = layer.ln1.apply(g, x);
        let a = multi_head_attention(g, h, h, None, true, &layer.self_attn, n_heads)?;
        let a = dropout.apply(g, a);
        x = g.add(x, a);
        if has_memory {
            let h = layer.ln2.apply(g, x);
            let c =
                multi_head_attention(g, h, memory, memory_mask, false, &layer.cross_attn, n_heads)?;
            let c = dropout.apply(g, c);
            x = g.add(x, c);
        }
        let h = layer.ln3.apply(g, x);
        let f = layer.ff.apply(g, h);
        let f = dropout.apply(g, f);
        x = g.add(x, f);
    }
    Ok(match &weights.final_norm {
        Some(ln) => ln.apply(g, x),
        None => x,
    })
}

/// Fixed sinusoidal position encodings for positions `0..n`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

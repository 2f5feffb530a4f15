//! Model wirings selectable by name.
//!
//! Every variant shares the embedding table, the context encoder, the
//! decoder and the generic output head. They differ in how history reaches
//! the decoder and whether the generate/copy switch exists:
//!
//! | name      | history input                        | switch |
//! |-----------|--------------------------------------|--------|
//! | `full`    | hierarchical memory matrix           | yes    |
//! | `no-hier` | raw utterances prepended to context  | no     |
//! | `no-hist` | none                                 | no     |
//! | `no-sw`   | hierarchical memory matrix           | no     |

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::config::ModelConfig;
use crate::data::{build_history_vocab, prepend_role_and_pad, MscExample, Vocabulary};
use crate::error::{HahtError, Result};
use crate::graph::Graph;
use crate::model::context::{
    encode_context, join_utterances, prepare_context_tokens, ContextEncoding,
};
use crate::model::history::{encode_history, AggregatorWeights};
use crate::model::{target_ids, Init, ParamSpec, PreparedExample};
use crate::nn::{Dropout, StackWeights};

pub trait Variant: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn summary(&self) -> &'static str;

    /// Whether the decoder output mixes in the history distribution.
    fn has_switch(&self) -> bool;

    /// Parameters this wiring owns beyond the shared core.
    fn extra_params(&self, cfg: &ModelConfig) -> Vec<ParamSpec>;

    /// Token-level inputs for one example.
    fn prepare(
        &self,
        ex: &MscExample,
        vocab: &Vocabulary,
        cfg: &ModelConfig,
    ) -> Result<PreparedExample>;

    /// Encoder side: the rows the decoder cross-attends to.
    fn encode(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        ex: &PreparedExample,
        dropout: &mut Dropout,
    ) -> Result<ContextEncoding>;
}

/// History encoded session by session into a memory matrix, then co-encoded
/// with the context.
#[derive(Debug, Clone, Copy)]
pub struct Hierarchical {
    switch: bool,
}

/// History (optionally) flattened into the context token sequence.
#[derive(Debug, Clone, Copy)]
pub struct Flat {
    include_history: bool,
}

pub const FULL: Hierarchical = Hierarchical { switch: true };
pub const NO_SW: Hierarchical = Hierarchical { switch: false };
pub const NO_HIER: Flat = Flat {
    include_history: true,
};
pub const NO_HIST: Flat = Flat {
    include_history: false,
};

impl Variant for Hierarchical {
    fn name(&self) -> &'static str {
        if self.switch {
            "full"
        } else {
            "no-sw"
        }
    }

    fn summary(&self) -> &'static str {
        if self.switch {
            "hierarchical history memory, history-aware context encoder, generate/copy switch"
        } else {
            "hierarchical history memory without the copy switch"
        }
    }

    fn has_switch(&self) -> bool {
        self.switch
    }

    fn extra_params(&self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = vec![
            ParamSpec::new(
                "agg.wq",
                cfg.d_a,
                cfg.d,
                Init::Normal((cfg.d as f64).powf(-0.5)),
            ),
            ParamSpec::new(
                "agg.wk",
                1,
                cfg.d_a,
                Init::Normal((cfg.d_a as f64).powf(-0.5)),
            ),
        ];
        if !cfg.share_encoder {
            specs.extend(crate::model::encoder_specs("hist_enc", cfg, cfg.n_enc));
        }
        if cfg.session_index_embedding {
            specs.push(ParamSpec::new(
                "mem_pos",
                cfg.max_sessions.max(1),
                cfg.d,
                Init::Normal(0.1),
            ));
        }
        if self.switch {
            let v = cfg.vocab_size;
            specs.push(ParamSpec::new(
                "fc2.w",
                cfg.d,
                v,
                Init::Normal((cfg.d as f64).powf(-0.5)),
            ));
            specs.push(ParamSpec::new("fc2.b", 1, v, Init::Zeros));
            specs.push(ParamSpec::new(
                "fc3.w",
                2 * cfg.d,
                2,
                Init::Normal((2.0 * cfg.d as f64).powf(-0.5)),
            ));
            specs.push(ParamSpec::new("fc3.b", 1, 2, Init::Zeros));
        }
        specs
    }

    fn prepare(
        &self,
        ex: &MscExample,
        vocab: &Vocabulary,
        cfg: &ModelConfig,
    ) -> Result<PreparedExample> {
        let history = ex
            .history
            .iter()
            .map(|s| {
                s.utterances
                    .iter()
                    .map(|u| prepend_role_and_pad(u, vocab, cfg.l_utter))
                    .collect()
            })
            .collect();
        Ok(PreparedExample {
            history,
            context: prepare_context_tokens(&ex.context, vocab, cfg.l_ctx)?,
            mask: build_history_vocab(ex, vocab),
            targets: target_ids(&ex.response, vocab),
            cached_memory: None,
        })
    }

    fn encode(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        ex: &PreparedExample,
        dropout: &mut Dropout,
    ) -> Result<ContextEncoding> {
        let embed = g.param("embed");
        let context_stack = StackWeights::load_encoder(g, "enc", cfg.n_enc);
        let (memory, alpha) = match &ex.cached_memory {
            Some(c) => (g.constant(c.clone()), vec![]),
            None => {
                let history_stack = if cfg.share_encoder {
                    context_stack.clone()
                } else {
                    StackWeights::load_encoder(g, "hist_enc", cfg.n_enc)
                };
                let agg = AggregatorWeights::load(g);
                let mem =
                    encode_history(g, cfg, &ex.history, embed, &history_stack, &agg, dropout)?;
                (mem.c, mem.alpha)
            }
        };
        let m = g.shape(memory)[0];
        let memory = if cfg.session_index_embedding && m > 0 {
            let table = g.param("mem_pos");
            let slots: Vec<usize> = (0..m).map(|i| i.min(cfg.max_sessions.max(1) - 1)).collect();
            let pos = g.gather(table, &slots);
            g.add(memory, pos)
        } else {
            memory
        };
        let mut enc = encode_context(g, cfg, memory, &ex.context, embed, &context_stack, dropout)?;
        enc.alpha = alpha;
        Ok(enc)
    }
}

impl Variant for Flat {
    fn name(&self) -> &'static str {
        if self.include_history {
            "no-hier"
        } else {
            "no-hist"
        }
    }

    fn summary(&self) -> &'static str {
        if self.include_history {
            "history utterances concatenated with the context into one sequence"
        } else {
            "context-only sequence-to-sequence"
        }
    }

    fn has_switch(&self) -> bool {
        false
    }

    fn extra_params(&self, _cfg: &ModelConfig) -> Vec<ParamSpec> {
        vec![]
    }

    fn prepare(
        &self,
        ex: &MscExample,
        vocab: &Vocabulary,
        cfg: &ModelConfig,
    ) -> Result<PreparedExample> {
        if ex.context.is_empty() {
            return Err(HahtError::EmptySession);
        }
        let context = if self.include_history {
            join_utterances(
                ex.history_utterances().chain(&ex.context.utterances),
                vocab,
                cfg.l_ctx,
            )
        } else {
            prepare_context_tokens(&ex.context, vocab, cfg.l_ctx)?
        };
        Ok(PreparedExample {
            history: vec![],
            context,
            mask: build_history_vocab(ex, vocab),
            targets: target_ids(&ex.response, vocab),
            cached_memory: None,
        })
    }

    fn encode(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        ex: &PreparedExample,
        dropout: &mut Dropout,
    ) -> Result<ContextEncoding> {
        let embed = g.param("embed");
        let stack = StackWeights::load_encoder(g, "enc", cfg.n_enc);
        let memory = g.constant(crate::tensor::Tensor::zeros(0, cfg.d));
        encode_context(g, cfg, memory, &ex.context, embed, &stack, dropout)
    }
}

/// Name-indexed collection of variants.
#[derive(Debug, Clone)]
pub struct VariantRegistry {
    variants: BTreeMap<&'static str, Arc<dyn Variant>>,
}

impl VariantRegistry {
    pub fn empty() -> Self {
        Self {
            variants: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, v: Arc<dyn Variant>) {
        self.variants.insert(v.name(), v);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Variant>> {
        self.variants
            .get(name)
            .cloned()
            .ok_or_else(|| HahtError::UnknownVariant(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.variants.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<dyn Variant>> {
        self.variants.values()
    }
}

impl Default for VariantRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(FULL));
        r.register(Arc::new(NO_HIER));
        r.register(Arc::new(NO_HIST));
        r.register(Arc::new(NO_SW));
        r
    }
}

/// Looks up a variant in the default registry.
pub fn variant(name: &str) -> Result<Arc<dyn Variant>> {
    VariantRegistry::default().get(name)
}

/// Canonical order used in reports.
pub const VARIANT_ORDER: [&str; 4] = ["full", "no-hier", "no-hist", "no-sw"];

//! The assembled model: parameter layout, initialization, teacher-forced
//! loss and greedy decoding for any registered variant.

pub mod context;
pub mod generator;
pub mod history;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::{HistoryVocabMask, MscExample, Session, Utterance, Vocabulary, BOS, EOS};
use crate::error::{HahtError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Dropout, StackWeights};
use crate::params::{Gradients, ParameterStore};
use crate::tensor::Tensor;
use crate::variant::Variant;

use self::context::{ContextEncoding, ContextTokens};
use self::generator::{
    argmax_token, beam_search_with, decoder_hidden, generic_distribution, greedy_decode_with,
    history_distribution_pooled, mix, pooled_memory, switch_probabilities_pooled, Distributions,
    GenerationOutput, StepDistribution,
};
use self::history::{encode_history, AggregatorWeights};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }
}

fn fan_in(n: usize) -> Init {
    Init::Normal((n as f64).powf(-0.5))
}

fn layer_norm_specs(prefix: &str, d: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.g"), 1, d, Init::Ones),
        ParamSpec::new(format!("{prefix}.b"), 1, d, Init::Zeros),
    ]
}

fn attention_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    ["q", "k", "v", "o"]
        .iter()
        .map(|m| ParamSpec::new(format!("{prefix}.{m}"), d, d, fan_in(d)))
        .collect()
}

fn feed_forward_specs(prefix: &str, cfg: &ModelConfig) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w1"), cfg.d, cfg.d_ff, fan_in(cfg.d)),
        ParamSpec::new(format!("{prefix}.b1"), 1, cfg.d_ff, Init::Zeros),
        ParamSpec::new(format!("{prefix}.w2"), cfg.d_ff, cfg.d, fan_in(cfg.d_ff)),
        ParamSpec::new(format!("{prefix}.b2"), 1, cfg.d, Init::Zeros),
    ]
}

/// Parameters of an `n`-layer encoder stack under `prefix`.
pub fn encoder_specs(prefix: &str, cfg: &ModelConfig, n: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for l in 0..n {
        let p = format!("{prefix}.{l}");
        specs.extend(layer_norm_specs(&format!("{p}.ln1"), cfg.d));
        specs.extend(attention_specs(&format!("{p}.attn"), cfg.d));
        specs.extend(layer_norm_specs(&format!("{p}.ln2"), cfg.d));
        specs.extend(feed_forward_specs(&format!("{p}.ff"), cfg));
    }
    if n > 0 {
        specs.extend(layer_norm_specs(&format!("{prefix}.ln_f"), cfg.d));
    }
    specs
}

fn decoder_specs(prefix: &str, cfg: &ModelConfig, n: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for l in 0..n {
        let p = format!("{prefix}.{l}");
        specs.extend(layer_norm_specs(&format!("{p}.ln1"), cfg.d));
        specs.extend(attention_specs(&format!("{p}.self"), cfg.d));
        specs.extend(layer_norm_specs(&format!("{p}.ln2"), cfg.d));
        specs.extend(attention_specs(&format!("{p}.cross"), cfg.d));
        specs.extend(layer_norm_specs(&format!("{p}.ln3"), cfg.d));
        specs.extend(feed_forward_specs(&format!("{p}.ff"), cfg));
    }
    if n > 0 {
        specs.extend(layer_norm_specs(&format!("{prefix}.ln_f"), cfg.d));
    }
    specs
}

/// Every parameter of `variant` under `cfg`, sorted by name.
pub fn parameter_layout(variant: &dyn Variant, cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = vec![
        ParamSpec::new("embed", cfg.vocab_size, cfg.d, Init::Normal(1.0)),
        ParamSpec::new("fc1.w", cfg.d, cfg.vocab_size, fan_in(cfg.d)),
        ParamSpec::new("fc1.b", 1, cfg.vocab_size, Init::Zeros),
    ];
    specs.extend(encoder_specs("enc", cfg, cfg.n_enc));
    specs.extend(decoder_specs("dec", cfg, cfg.n_dec));
    specs.extend(variant.extra_params(cfg));
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    specs
}

/// Samples every parameter from one seeded stream, in name order.
pub fn init_parameters(layout: &[ParamSpec], seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = BTreeMap::new();
    let mut sorted: Vec<&ParamSpec> = layout.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for spec in sorted {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(spec.rows, spec.cols),
            Init::Ones => Tensor::filled(spec.rows, spec.cols, 1.0),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                let data = (0..spec.rows * spec.cols)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                Tensor::from_vec(spec.rows, spec.cols, data)
            }
        };
        map.insert(spec.name.clone(), t);
    }
    ParameterStore::new(map)
}

/// Response ids followed by EOS.
pub fn target_ids(response: &Utterance, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids: Vec<usize> = response.tokens.iter().map(|t| vocab.id(t)).collect();
    ids.push(EOS);
    ids
}

/// Token-level view of one example, ready for the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    /// Role-prefixed, padded ids per utterance per history session.
    pub history: Vec<Vec<Vec<usize>>>,
    pub context: ContextTokens,
    pub mask: HistoryVocabMask,
    /// Response ids and EOS.
    pub targets: Vec<usize>,
    /// Precomputed history memory; replaces `history` when present.
    pub cached_memory: Option<Tensor>,
}

impl PreparedExample {
    /// Teacher-forcing input: BOS then every target except the last.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.targets.len());
        ids.push(BOS);
        ids.extend_from_slice(&self.targets[..self.targets.len().saturating_sub(1)]);
        ids
    }

    pub fn history_len(&self) -> usize {
        match &self.cached_memory {
            Some(c) => c.rows(),
            None => self.history.len(),
        }
    }
}

/// Diagnostics for one example's encoder pass.
#[derive(Debug, Clone, Serialize)]
pub struct EncoderDump {
    pub memory_rows: usize,
    pub context_rows: usize,
    pub context_boundaries: Vec<usize>,
    pub session_alpha: Vec<Vec<f64>>,
    pub history_vocab: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: Arc<dyn Variant>,
    pub vocab: Vocabulary,
    pub params: ParameterStore,
}

impl Model {
    /// Freshly initialized model; parameters are drawn from `config.seed`.
    pub fn new(config: ModelConfig, variant: Arc<dyn Variant>, vocab: Vocabulary) -> Result<Self> {
        let layout = parameter_layout(variant.as_ref(), &config);
        let params = init_parameters(&layout, config.seed);
        Self::from_parts(config, variant, vocab, params)
    }

    /// Assembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(
        config: ModelConfig,
        variant: Arc<dyn Variant>,
        vocab: Vocabulary,
        params: ParameterStore,
    ) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(HahtError::VocabularyMismatch(format!(
                "config expects {} tokens, vocabulary has {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let layout = parameter_layout(variant.as_ref(), &config);
        if layout.len() != params.len() {
            return Err(HahtError::Checkpoint(format!(
                "variant {} expects {} parameters, found {}",
                variant.name(),
                layout.len(),
                params.len()
            )));
        }
        for spec in &layout {
            match params.get(&spec.name) {
                Some(t) if t.shape() == [spec.rows, spec.cols] => {}
                Some(t) => {
                    return Err(HahtError::Checkpoint(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        [spec.rows, spec.cols]
                    )))
                }
                None => {
                    return Err(HahtError::Checkpoint(format!(
                        "missing parameter {}",
                        spec.name
                    )))
                }
            }
        }
        Ok(Self {
            config,
            variant,
            vocab,
            params,
        })
    }

    /// The same weights wired as `variant`; parameters the target wiring
    /// does not use are dropped.
    pub fn rewired(&self, variant: Arc<dyn Variant>) -> Result<Self> {
        let layout = parameter_layout(variant.as_ref(), &self.config);
        let mut map = BTreeMap::new();
        for spec in &layout {
            let t = self
                .params
                .get(&spec.name)
                .ok_or_else(|| HahtError::Checkpoint(format!("missing parameter {}", spec.name)))?;
            map.insert(spec.name.clone(), t.clone());
        }
        Self::from_parts(
            self.config.clone(),
            variant,
            self.vocab.clone(),
            ParameterStore::new(map),
        )
    }

    pub fn prepare(&self, ex: &MscExample) -> Result<PreparedExample> {
        self.variant.prepare(ex, &self.vocab, &self.config)
    }

    fn switch_active(&self, enc: &ContextEncoding, ex: &PreparedExample) -> bool {
        self.variant.has_switch() && enc.memory_rows > 0 && !ex.mask.is_empty()
    }

    /// Next-token distributions for every position of `prefix`.
    pub fn distributions(
        &self,
        g: &mut Graph,
        enc: &ContextEncoding,
        ex: &PreparedExample,
        prefix: &[usize],
        dropout: &mut Dropout,
    ) -> Result<Distributions> {
        let embed = g.param("embed");
        let stack = StackWeights::load_decoder(g, "dec", self.config.n_dec);
        let o = decoder_hidden(g, &self.config, enc, prefix, embed, &stack, dropout)?;
        let p_vg = generic_distribution(g, o)?;
        if !self.switch_active(enc, ex) {
            return Ok(Distributions {
                p: p_vg,
                p_vg,
                p_vh: None,
                alpha: None,
            });
        }
        let c_s = enc.memory(g);
        let pooled = pooled_memory(g, c_s)?;
        let p_vh = history_distribution_pooled(g, pooled, &ex.mask)?;
        let alpha = switch_probabilities_pooled(g, o, pooled)?;
        let p = mix(g, p_vg, p_vh, alpha);
        Ok(Distributions {
            p,
            p_vg,
            p_vh: Some(p_vh),
            alpha: Some(alpha),
        })
    }

    fn check_targets(&self, ex: &PreparedExample) -> Result<()> {
        if ex.targets.iter().all(|&t| Vocabulary::is_reserved(t)) {
            return Err(HahtError::EmptyTarget);
        }
        Ok(())
    }

    fn forward_loss<'p>(
        &self,
        g: &mut Graph<'p>,
        ex: &PreparedExample,
        dropout: &mut Dropout,
    ) -> Result<(Var, Distributions)> {
        self.check_targets(ex)?;
        let enc = self.variant.encode(g, &self.config, ex, dropout)?;
        let d = self.distributions(g, &enc, ex, &ex.decoder_input(), dropout)?;
        Ok((g.nll(d.p, &ex.targets), d))
    }

    /// Teacher-forced negative log-likelihood and its gradient, evaluated
    /// with the parameters in `store`.
    pub fn loss_with(
        &self,
        store: &ParameterStore,
        ex: &PreparedExample,
        dropout: &mut Dropout,
    ) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(store);
        let (loss, _) = self.forward_loss(&mut g, ex, dropout)?;
        let value = g.value(loss).get(0, 0);
        Ok((value, g.backward(loss)))
    }

    /// Teacher-forced negative log-likelihood of the reference response.
    pub fn sequence_nll(&self, ex: &PreparedExample) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let (loss, _) = self.forward_loss(&mut g, ex, &mut Dropout::disabled())?;
        Ok(g.value(loss).get(0, 0))
    }

    /// Teacher-forced argmax hits and target count.
    pub fn teacher_forced_accuracy(&self, ex: &PreparedExample) -> Result<(usize, usize)> {
        let mut g = Graph::new(&self.params);
        let (_, d) = self.forward_loss(&mut g, ex, &mut Dropout::disabled())?;
        let p = g.value(d.p);
        let hits = ex
            .targets
            .iter()
            .enumerate()
            .filter(|&(t, &y)| argmax_token(p.row(t)) == y)
            .count();
        Ok((hits, ex.targets.len()))
    }

    /// Distributions at the last position of `prefix`.
    pub fn next_token_distribution(
        &self,
        ex: &PreparedExample,
        prefix: &[usize],
    ) -> Result<StepDistribution> {
        let mut g = Graph::new(&self.params);
        let mut dropout = Dropout::disabled();
        let enc = self
            .variant
            .encode(&mut g, &self.config, ex, &mut dropout)?;
        let d = self.distributions(&mut g, &enc, ex, prefix, &mut dropout)?;
        Ok(last_step(&g, &d))
    }

    /// Greedy decoding; the encoder side and `P_vh` are computed once.
    pub fn greedy_decode(&self, ex: &PreparedExample, max_len: usize) -> Result<GenerationOutput> {
        let vocab = &self.vocab;
        let text = |id: usize| vocab.token(id).to_string();
        self.with_stepper(ex, |next| greedy_decode_with(next, max_len, &text))
    }

    /// Beam search of the given width; see [`beam_search_with`].
    pub fn beam_decode(
        &self,
        ex: &PreparedExample,
        max_len: usize,
        width: usize,
    ) -> Result<GenerationOutput> {
        self.with_stepper(ex, |next| beam_search_with(next, width, max_len))
    }

    /// Encodes `ex` once and hands `run` a function from a BOS-led prefix
    /// to the distributions at its last position.
    fn with_stepper<R>(
        &self,
        ex: &PreparedExample,
        run: impl FnOnce(&mut dyn FnMut(&[usize]) -> Result<StepDistribution>) -> Result<R>,
    ) -> Result<R> {
        let mut g = Graph::new(&self.params);
        let mut dropout = Dropout::disabled();
        let enc = self
            .variant
            .encode(&mut g, &self.config, ex, &mut dropout)?;
        let embed = g.param("embed");
        let stack = StackWeights::load_decoder(&mut g, "dec", self.config.n_dec);
        let switch = if self.switch_active(&enc, ex) {
            let c_s = enc.memory(&mut g);
            let pooled = pooled_memory(&mut g, c_s)?;
            let p_vh = history_distribution_pooled(&mut g, pooled, &ex.mask)?;
            Some((pooled, p_vh))
        } else {
            None
        };
        run(&mut |prefix| {
            let o = decoder_hidden(
                &mut g,
                &self.config,
                &enc,
                prefix,
                embed,
                &stack,
                &mut dropout,
            )?;
            let o = g.slice_rows(o, prefix.len() - 1, 1);
            let p_vg = generic_distribution(&mut g, o)?;
            let d = match switch {
                None => Distributions {
                    p: p_vg,
                    p_vg,
                    p_vh: None,
                    alpha: None,
                },
                Some((pooled, p_vh)) => {
                    let alpha = switch_probabilities_pooled(&mut g, o, pooled)?;
                    let p = mix(&mut g, p_vg, p_vh, alpha);
                    Distributions {
                        p,
                        p_vg,
                        p_vh: Some(p_vh),
                        alpha: Some(alpha),
                    }
                }
            };
            Ok(last_step(&g, &d))
        })
    }

    /// Greedy response as tokens, reserved ids stripped.
    pub fn respond(&self, ex: &MscExample, max_len: usize) -> Result<Vec<String>> {
        let prepared = self.prepare(ex)?;
        let out = self.greedy_decode(&prepared, max_len)?;
        Ok(self.vocab.decode(&out.ids))
    }

    /// One history-memory row for `session`, as produced during encoding.
    pub fn session_memory(&self, session: &Session) -> Result<Tensor> {
        if !self.params.contains("agg.wq") {
            return Err(HahtError::Config(format!(
                "variant {} has no history encoder",
                self.variant.name()
            )));
        }
        let ids: Vec<Vec<usize>> = session
            .utterances
            .iter()
            .map(|u| crate::data::prepend_role_and_pad(u, &self.vocab, self.config.l_utter))
            .collect();
        let mut g = Graph::new(&self.params);
        let embed = g.param("embed");
        let prefix = if self.config.share_encoder {
            "enc"
        } else {
            "hist_enc"
        };
        let stack = StackWeights::load_encoder(&mut g, prefix, self.config.n_enc);
        let agg = AggregatorWeights::load(&mut g);
        let mem = encode_history(
            &mut g,
            &self.config,
            &[ids],
            embed,
            &stack,
            &agg,
            &mut Dropout::disabled(),
        )?;
        Ok(g.value(mem.c).clone())
    }

    /// Encoder-side diagnostics for one example.
    pub fn encoder_dump(&self, ex: &PreparedExample) -> Result<EncoderDump> {
        let mut g = Graph::new(&self.params);
        let enc = self
            .variant
            .encode(&mut g, &self.config, ex, &mut Dropout::disabled())?;
        Ok(EncoderDump {
            memory_rows: enc.memory_rows,
            context_rows: enc.context_rows,
            context_boundaries: ex.context.boundaries.clone(),
            session_alpha: enc.alpha,
            history_vocab: ex
                .mask
                .ids()
                .map(|i| self.vocab.token(i).to_string())
                .collect(),
        })
    }
}

fn last_step(g: &Graph, d: &Distributions) -> StepDistribution {
    let p = g.value(d.p);
    let p_vg = g.value(d.p_vg);
    let last = p.rows() - 1;
    StepDistribution {
        p: p.row(last).to_vec(),
        p_vg: p_vg.row(last).to_vec(),
        p_vh: d.p_vh.map(|v| g.value(v).row(0).to_vec()),
        alpha: d.alpha.map(|a| {
            let a = g.value(a);
            (a.get(a.rows() - 1, 0), a.get(a.rows() - 1, 1))
        }),
    }
}

//! Synthetic persona conversations with a controllable copy requirement.
//!
//! Each example gets a persona of `(attribute, value)` facts whose values
//! come from a pool of made-up words. History sessions state facts, the
//! current context asks about one, and the target either repeats the value
//! (only recoverable from history) or declines.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, MscExample, Session, Split, Utterance};
use crate::error::{HahtError, Result};

pub const ATTRIBUTES: [&str; 10] = [
    "food", "color", "pet", "sport", "city", "drink", "band", "game", "flower", "car",
];
const ACKS: [&str; 3] = ["good to know !", "that is nice !", "cool , tell me more !"];
const MOODS: [&str; 4] = ["fine", "great", "busy", "long"];
const SYLLABLES: [&str; 16] = [
    "ka", "zu", "ri", "mo", "te", "vi", "lo", "ga", "pe", "xo", "nu", "fa", "qi", "ho", "be", "sy",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub examples: usize,
    /// Number of distinct fact values available.
    pub value_pool: usize,
    pub facts_per_persona: usize,
    /// Relative weight of each history length; index is the session count.
    pub session_weights: Vec<f64>,
    /// Probability that an example with history asks for a stated fact.
    pub copy_fraction: f64,
    pub split: Split,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            examples: 64,
            value_pool: 40,
            facts_per_persona: 2,
            session_weights: vec![1.0; 5],
            copy_fraction: 0.8,
            split: Split::Train,
        }
    }
}

impl SyntheticConfig {
    pub fn max_sessions(&self) -> usize {
        self.session_weights.len().saturating_sub(1)
    }

    /// Uniform weights over `0..=max_sessions`.
    pub fn with_max_sessions(mut self, max_sessions: usize) -> Self {
        self.session_weights = vec![1.0; max_sessions + 1];
        self
    }
}

/// Made-up word for pool index `i`; injective and never an English template word.
pub fn value_token(i: usize) -> String {
    let n = SYLLABLES.len();
    let mut s = String::new();
    s.push_str(SYLLABLES[i % n]);
    s.push_str(SYLLABLES[(i / n) % n]);
    s.push_str(SYLLABLES[(i / (n * n)) % n]);
    s
}

pub fn generate_synthetic_corpus(cfg: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    if cfg.value_pool < cfg.facts_per_persona {
        return Err(HahtError::Config(format!(
            "value pool of {} cannot supply {} facts per persona",
            cfg.value_pool, cfg.facts_per_persona
        )));
    }
    if cfg.facts_per_persona == 0 || cfg.facts_per_persona > ATTRIBUTES.len() {
        return Err(HahtError::Config(format!(
            "facts per persona must be in 1..={}",
            ATTRIBUTES.len()
        )));
    }
    if cfg.value_pool > SYLLABLES.len().pow(3) {
        return Err(HahtError::Config("value pool too large".into()));
    }
    if !(0.0..=1.0).contains(&cfg.copy_fraction) {
        return Err(HahtError::Config("copy fraction must lie in [0, 1]".into()));
    }
    let sessions = WeightedIndex::new(&cfg.session_weights)
        .map_err(|e| HahtError::Config(format!("session weights: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..cfg.examples)
        .map(|_| generate_example(cfg, &sessions, &mut rng))
        .collect();
    Ok(Corpus::new(examples, cfg.split))
}

fn generate_example(
    cfg: &SyntheticConfig,
    sessions: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
) -> MscExample {
    let attrs = rand::seq::index::sample(rng, ATTRIBUTES.len(), cfg.facts_per_persona);
    let values = rand::seq::index::sample(rng, cfg.value_pool, cfg.facts_per_persona);
    let facts: Vec<(&str, String)> = attrs
        .iter()
        .zip(values.iter())
        .map(|(a, v)| (ATTRIBUTES[a], value_token(v)))
        .collect();

    let m = sessions.sample(rng);
    let history = (0..m)
        .map(|i| {
            let (attr, value) = &facts[i % facts.len()];
            let mut turns = vec![
                Utterance::user(format!("my {attr} is {value} .")),
                Utterance::assistant(*ACKS.choose(rng).unwrap()),
            ];
            if rng.random_bool(0.5) {
                turns.push(Utterance::user("how was the day ?"));
                turns.push(Utterance::assistant(format!(
                    "it was {} .",
                    MOODS.choose(rng).unwrap()
                )));
            }
            Session::new(turns)
        })
        .collect::<Vec<_>>();

    let stated = m.min(facts.len());
    let copy = stated > 0 && rng.random_bool(cfg.copy_fraction);
    let (attr, response) = if copy {
        let (attr, value) = &facts[rng.random_range(0..stated)];
        (*attr, format!("i remember {value}"))
    } else {
        let attr = ATTRIBUTES[rng.random_range(0..ATTRIBUTES.len())];
        (attr, "sorry , i do not remember .".to_string())
    };

    let mut context = Vec::new();
    if rng.random_bool(0.5) {
        context.push(Utterance::user("hello again !"));
        context.push(Utterance::assistant("hi , good to see you !"));
    }
    context.push(Utterance::user(format!(
        "hey , i have a question . what is my {attr} ?"
    )));

    MscExample {
        history,
        context: Session::new(context),
        response: Utterance::assistant(response),
    }
}

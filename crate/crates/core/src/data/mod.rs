//! Conversations, vocabularies and corpora.

mod corpus;
mod synthetic;
mod tokenize;
mod vocab;

pub use corpus::{filter_session_openings, load_corpus, parse_corpus, write_corpus, Corpus, Split};
pub use synthetic::{generate_synthetic_corpus, SyntheticConfig};
pub use tokenize::tokenize;
pub use vocab::{
    build_history_vocab, prepend_role_and_pad, HistoryVocabMask, Vocabulary, BOS, EOS, PAD,
    RESERVED, ROLE_ASSISTANT, ROLE_USER, UNK,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "user" => Some(Role::User),
            "assistant" => Some(Role::Assistant),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One turn. `tokens` is derived from `text` at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { role, text, tokens }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::new(Role::Assistant, text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Session {
    pub utterances: Vec<Utterance>,
}

impl Session {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Self { utterances }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// A training or evaluation unit: history sessions, the current context and
/// the ground-truth assistant response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MscExample {
    pub history: Vec<Session>,
    pub context: Session,
    pub response: Utterance,
}

impl MscExample {
    /// Number of history sessions.
    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Session number as used for bucketing: history sessions plus one.
    pub fn session_number(&self) -> usize {
        self.history.len() + 1
    }

    pub fn history_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.history.iter().flat_map(|s| s.utterances.iter())
    }
}

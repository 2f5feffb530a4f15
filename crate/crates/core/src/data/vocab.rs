use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, MscExample, Role, Utterance};
use crate::error::{HahtError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const ROLE_USER: usize = 4;
pub const ROLE_ASSISTANT: usize = 5;

/// Surface forms of the reserved ids. None of these can be produced by
/// [`super::tokenize`], which splits off the colon and angle brackets.
pub const RESERVED: [&str; 6] = ["<pad>", "<unk>", "<bos>", "<eos>", "User:", "Assistant:"];

/// Closed generic vocabulary. Ids `0..6` are the reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    min_count: usize,
}

impl Vocabulary {
    /// Counts every token in the corpus; tokens seen at least `min_count`
    /// times get ids in order of descending frequency, ties broken
    /// lexicographically.
    pub fn build(corpus: &Corpus, min_count: usize) -> Result<Self> {
        if corpus.examples.is_empty() {
            return Err(HahtError::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ex in &corpus.examples {
            let utterances = ex
                .history_utterances()
                .chain(&ex.context.utterances)
                .chain(std::iter::once(&ex.response));
            for u in utterances {
                for t in &u.tokens {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens, min_count)
    }

    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(HahtError::VocabularyMismatch(
                "vocabulary must start with the six reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(HahtError::VocabularyMismatch(format!(
                    "duplicate token {t:?}"
                )));
            }
        }
        Ok(Self {
            tokens,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of a token; anything unknown maps to [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Token strings for `ids`, with reserved ids dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !Self::is_reserved(i))
            .map(|&i| self.tokens[i].clone())
            .collect()
    }

    pub fn role_id(role: Role) -> usize {
        match role {
            Role::User => ROLE_USER,
            Role::Assistant => ROLE_ASSISTANT,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
            min_count: self.min_count,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        Self::from_tokens(f.tokens, f.min_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Role id followed by the utterance's token ids, right-truncated and then
/// padded to exactly `l_utter` ids.
pub fn prepend_role_and_pad(u: &Utterance, vocab: &Vocabulary, l_utter: usize) -> Vec<usize> {
    assert!(l_utter >= 2, "l_utter must be at least 2");
    let mut ids = Vec::with_capacity(l_utter);
    ids.push(Vocabulary::role_id(u.role));
    ids.extend(u.tokens.iter().take(l_utter - 1).map(|t| vocab.id(t)));
    ids.resize(l_utter, PAD);
    ids
}

/// Membership mask over the generic vocabulary for tokens that occur in an
/// example's history sessions. Reserved ids (including UNK) never appear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryVocabMask(Vec<bool>);

impl HistoryVocabMask {
    pub fn empty(size: usize) -> Self {
        Self(vec![false; size])
    }

    pub fn from_bools(mask: Vec<bool>) -> Self {
        Self(mask)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn contains(&self, id: usize) -> bool {
        self.0[id]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| i)
    }
}

pub fn build_history_vocab(example: &MscExample, vocab: &Vocabulary) -> HistoryVocabMask {
    let mut mask = vec![false; vocab.len()];
    for u in example.history_utterances() {
        for t in &u.tokens {
            let id = vocab.id(t);
            if !Vocabulary::is_reserved(id) {
                mask[id] = true;
            }
        }
    }
    HistoryVocabMask(mask)
}

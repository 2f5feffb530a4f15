use serde::{Deserialize, Serialize};

use crate::error::{HahtError, Result};

/// Architecture hyperparameters. Stored verbatim in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub l_utter: usize,
    pub l_ctx: usize,
    pub d_a: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Utterance encoder reuses the context encoder's layers.
    #[serde(default = "default_true")]
    pub share_encoder: bool,
    /// Adds a learned per-slot embedding to history memory rows.
    #[serde(default)]
    pub session_index_embedding: bool,
    #[serde(default = "default_max_sessions")]
    pub max_sessions: usize,
}

fn default_true() -> bool {
    true
}

fn default_max_sessions() -> usize {
    4
}

impl ModelConfig {
    /// Desk-scale defaults: small widths, two encoder and two decoder layers.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d: 64,
            d_ff: 128,
            n_heads: 2,
            n_enc: 2,
            n_dec: 2,
            l_utter: 32,
            l_ctx: 256,
            d_a: 64,
            vocab_size,
            dropout: 0.0,
            seed: 0,
            share_encoder: true,
            session_index_embedding: false,
            max_sessions: 4,
        }
    }

    /// Full-size widths and depths: 12 encoder and 12 decoder layers.
    pub fn large(vocab_size: usize) -> Self {
        Self {
            d: 512,
            d_ff: 2048,
            n_heads: 16,
            n_enc: 12,
            n_dec: 12,
            l_utter: 32,
            l_ctx: 256,
            d_a: 512,
            vocab_size,
            dropout: 0.1,
            seed: 0,
            share_encoder: true,
            session_index_embedding: false,
            max_sessions: 4,
        }
    }

    /// Smallest configuration used for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d: 8,
            d_ff: 16,
            n_heads: 2,
            n_enc: 1,
            n_dec: 1,
            l_utter: 8,
            l_ctx: 32,
            d_a: 8,
            vocab_size,
            dropout: 0.0,
            seed: 0,
            share_encoder: true,
            session_index_embedding: false,
            max_sessions: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(HahtError::Config(m.to_string()));
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return fail("d must be a positive multiple of n_heads");
        }
        if self.l_ctx == 0 {
            return fail("l_ctx must be at least 1");
        }
        if self.l_utter < 2 {
            return fail("l_utter must be at least 2");
        }
        if self.d_ff == 0 || self.d_a == 0 {
            return fail("d_ff and d_a must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.vocab_size <= crate::data::RESERVED.len() {
            return fail("vocabulary holds no ordinary tokens");
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::NUM_SPECIAL;

/// Architecture hyperparameters of the encoder-decoder transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub dropout: f32,
    pub max_abs_position: usize,
    /// Maximum number of decoder slots, including the BOS block.
    pub max_len: usize,
    pub tie_embeddings: bool,
    pub label_smoothing: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 256,
            vocab_src: 64,
            vocab_tgt: 64,
            dropout: 0.1,
            max_abs_position: 512,
            max_len: 256,
            tie_embeddings: true,
            label_smoothing: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.dec_layers == 0 {
            return bad("at least one decoder layer is required".into());
        }
        if self.ffn == 0 {
            return bad("ffn width must be positive".into());
        }
        if self.vocab_src <= NUM_SPECIAL || self.vocab_tgt <= NUM_SPECIAL {
            return bad(format!("vocabularies must exceed the {NUM_SPECIAL} reserved symbols"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{MpcError, Result};
use crate::seed::fnv1a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Real interlocutor rows; the table has one more row for the MASK
    /// interlocutor.
    pub max_interlocutors: usize,
    pub dropout: f64,
    /// Margin of the pointer-consistency hinge.
    pub pcd_margin: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            vocab_size: 128,
            max_seq_len: 230,
            max_interlocutors: 16,
            dropout: 0.0,
            pcd_margin: 0.4,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    /// BERT-base shape; a config point only.
    pub fn base(vocab_size: usize) -> Self {
        EncoderConfig {
            d: 768,
            layers: 12,
            heads: 12,
            d_ff: 3072,
            vocab_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(MpcError::invalid("encoder sizes must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(MpcError::invalid(format!("d={} is not divisible by heads={}", self.d, self.heads)));
        }
        if self.vocab_size <= crate::corpus::NUM_SPECIAL || self.max_seq_len == 0 || self.max_interlocutors == 0 {
            return Err(MpcError::invalid("vocabulary, sequence and interlocutor limits must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MpcError::invalid("dropout must lie in [0, 1)"));
        }
        if !(self.pcd_margin > 0.0 && self.pcd_margin < 1.0) {
            return Err(MpcError::invalid("pcd_margin must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Rows of the interlocutor table, MASK row included.
    pub fn speaker_rows(&self) -> usize {
        self.max_interlocutors + 1
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(&serde_json::to_string(self).expect("config serializes"))
    }
}

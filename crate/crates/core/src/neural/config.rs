use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the decoder. The default is a desk-scale model; the GPT-sized
/// configuration (12 blocks, 12 heads, 768/3072) remains expressible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    /// Share the token embedding with the output projection.
    pub tie_embeddings: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_seq_len: 128,
            vocab_size: 0,
            dropout_rate: 0.1,
            tie_embeddings: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Serialized as `key=value` lines, in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_blocks", self.n_blocks.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
        ]
    }

    /// Names of the fields that differ from `other`.
    pub fn differing_fields(&self, other: &Self) -> Vec<String> {
        self.to_kv()
            .into_iter()
            .zip(other.to_kv())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| format!("{k} ({a} vs {b})"))
            .collect()
    }

    /// Same as [`differing_fields`](Self::differing_fields), ignoring dropout,
    /// which may legitimately change between training stages.
    pub fn architecture_mismatch(&self, other: &Self) -> Vec<String> {
        let mut a = self.clone();
        a.dropout_rate = other.dropout_rate;
        a.differing_fields(other)
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether attention and FFN blocks of a layer are gated separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Block,
    Layer,
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::Block => "block",
            Granularity::Layer => "layer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Attention,
    Ffn,
}

/// Identity of one maskable block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub layer: usize,
    pub kind: BlockKind,
}

impl BlockId {
    pub fn attention(layer: usize) -> Self {
        Self {
            layer,
            kind: BlockKind::Attention,
        }
    }

    pub fn ffn(layer: usize) -> Self {
        Self {
            layer,
            kind: BlockKind::Ffn,
        }
    }

    /// Position of this block's gate in a mask of the given granularity.
    pub fn flat_index(&self, granularity: Granularity) -> usize {
        match granularity {
            Granularity::Block => {
                2 * self.layer
                    + match self.kind {
                        BlockKind::Attention => 0,
                        BlockKind::Ffn => 1,
                    }
            }
            Granularity::Layer => self.layer,
        }
    }

    /// Inverse of [`BlockId::flat_index`] at block granularity.
    pub fn from_block_index(index: usize) -> Self {
        if index.is_multiple_of(2) {
            Self::attention(index / 2)
        } else {
            Self::ffn(index / 2)
        }
    }
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            BlockKind::Attention => "attn",
            BlockKind::Ffn => "ffn",
        };
        write!(f, "L{}.{}", self.layer, kind)
    }
}

/// Architecture of the decoder-only model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub kv_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub granularity: Granularity,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 128,
            num_heads: 4,
            head_dim: 32,
            kv_heads: 2,
            ffn_dim: 256,
            vocab_size: super::tokenizer::VOCAB_SIZE,
            max_seq_len: 512,
            granularity: Granularity::Block,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("kv_heads", self.kv_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.num_heads * self.head_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "num_heads ({}) x head_dim ({}) != hidden_dim ({})",
                self.num_heads, self.head_dim, self.hidden_dim
            )));
        }
        if !self.num_heads.is_multiple_of(self.kv_heads) {
            return Err(Error::Config(format!(
                "num_heads ({}) not divisible by kv_heads ({})",
                self.num_heads, self.kv_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "head_dim must be even for rotary encoding".into(),
            ));
        }
        Ok(())
    }

    /// Width of the key/value projections.
    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Number of maskable blocks, always `2L`.
    pub fn num_blocks(&self) -> usize {
        2 * self.num_layers
    }

    /// Mask length under the configured granularity.
    pub fn num_gates(&self) -> usize {
        match self.granularity {
            Granularity::Block => 2 * self.num_layers,
            Granularity::Layer => self.num_layers,
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> {
        (0..self.num_blocks()).map(BlockId::from_block_index)
    }

    pub fn with_granularity(&self, granularity: Granularity) -> Self {
        Self {
            granularity,
            ..self.clone()
        }
    }

    /// Expands a gate-length mask to one value per block.
    pub fn expand_mask<T: Copy>(&self, mask: &[T]) -> Result<Vec<T>> {
        if mask.len() != self.num_gates() {
            return Err(Error::Config(format!(
                "mask length {} does not match {} gates at {} granularity",
                mask.len(),
                self.num_gates(),
                self.granularity
            )));
        }
        Ok(self
            .blocks()
            .map(|b| mask[b.flat_index(self.granularity)])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_indices() {
        assert_eq!(BlockId::attention(3).flat_index(Granularity::Block), 6);
        assert_eq!(BlockId::ffn(3).flat_index(Granularity::Block), 7);
        assert_eq!(BlockId::attention(3).flat_index(Granularity::Layer), 3);
        assert_eq!(BlockId::ffn(3).flat_index(Granularity::Layer), 3);
        for i in 0..10 {
            assert_eq!(
                BlockId::from_block_index(i).flat_index(Granularity::Block),
                i
            );
        }
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            kv_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            head_dim: 16,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn layer_mask_expands_to_duplicated_blocks() {
        let cfg = ModelConfig::default().with_granularity(Granularity::Layer);
        assert_eq!(
            cfg.expand_mask(&[1, 0, 1, 1]).unwrap(),
            vec![1, 1, 0, 0, 1, 1, 1, 1]
        );
        assert!(cfg.expand_mask(&[1, 0]).is_err());
    }
}

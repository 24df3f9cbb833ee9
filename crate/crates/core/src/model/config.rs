use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed ids of the special tokens; they occupy the bottom of the joint id space.
pub mod special {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const IMG_START: usize = 3;
    pub const IMG_END: usize = 4;
    pub const ANS: usize = 5;
    pub const COUNT: usize = 6;
}

/// Hyperparameters of the decoder. The joint vocabulary is laid out as
/// `[specials | text | image]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub text_vocab: usize,
    pub image_vocab: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { depth: 4, heads: 4, dim: 64, text_vocab: 16, image_vocab: 8, max_seq_len: 32, init_seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("heads", self.heads),
            ("dim", self.dim),
            ("text_vocab", self.text_vocab),
            ("image_vocab", self.image_vocab),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.dim
    }

    pub fn vocab_size(&self) -> usize {
        special::COUNT + self.text_vocab + self.image_vocab
    }

    pub fn text_id(&self, i: usize) -> usize {
        debug_assert!(i < self.text_vocab);
        special::COUNT + i
    }

    pub fn image_id(&self, i: usize) -> usize {
        debug_assert!(i < self.image_vocab);
        special::COUNT + self.text_vocab + i
    }

    pub fn is_text(&self, id: usize) -> bool {
        (special::COUNT..special::COUNT + self.text_vocab).contains(&id)
    }

    pub fn is_image(&self, id: usize) -> bool {
        (special::COUNT + self.text_vocab..self.vocab_size()).contains(&id)
    }

    /// Closed-form parameter count:
    /// `2·V·d + S·d + L·(12d² + 13d) + 2d` for joint vocabulary `V`,
    /// max length `S`, depth `L` and width `d` (4d MLP, biased projections,
    /// untied output head without bias).
    pub fn parameter_count(&self) -> usize {
        let (v, s, l, d) = (self.vocab_size(), self.max_seq_len, self.depth, self.dim);
        2 * v * d + s * d + l * (12 * d * d + 13 * d) + 2 * d
    }
}

use serde::{Deserialize, Serialize};

use super::config::{special, ModelConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Text,
    Image,
    Special,
    Pad,
}

impl Modality {
    /// Byte code used by attention dumps.
    pub fn code(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
            Modality::Special => 2,
            Modality::Pad => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Modality::Text,
            1 => Modality::Image,
            2 => Modality::Special,
            3 => Modality::Pad,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Generation,
    Understanding,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Generation, Task::Understanding];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Generation => "generation",
            Task::Understanding => "understanding",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "generation" | "gen" => Ok(Task::Generation),
            "understanding" | "und" => Ok(Task::Understanding),
            other => Err(Error::Input(format!("unknown task {other:?}"))),
        }
    }
}

/// Token ids with per-position modality labels and loss mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub task: Task,
    pub ids: Vec<usize>,
    pub modality: Vec<Modality>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Modality label implied by an id in the joint vocabulary.
    pub fn modality_of(config: &ModelConfig, id: usize) -> Modality {
        if id == special::PAD {
            Modality::Pad
        } else if id < special::COUNT {
            Modality::Special
        } else if config.is_text(id) {
            Modality::Text
        } else {
            Modality::Image
        }
    }

    /// Checks lengths, vocabulary membership, label consistency and
    /// the rule that PAD positions are never supervised.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = self.ids.len();
        if n == 0 {
            return Err(Error::Input("empty sequence".into()));
        }
        if self.modality.len() != n || self.loss_mask.len() != n {
            return Err(Error::Input("ids, modality and loss_mask lengths differ".into()));
        }
        if n > config.max_seq_len {
            return Err(Error::Input(format!("sequence length {n} exceeds max {}", config.max_seq_len)));
        }
        for (i, &id) in self.ids.iter().enumerate() {
            if id >= config.vocab_size() {
                return Err(Error::Input(format!("token id {id} at position {i} outside vocabulary")));
            }
            if self.modality[i] != Self::modality_of(config, id) {
                return Err(Error::Input(format!("modality label at position {i} does not match id {id}")));
            }
            if self.modality[i] == Modality::Pad && self.loss_mask[i] {
                return Err(Error::Input(format!("PAD position {i} is supervised")));
            }
        }
        Ok(())
    }
}

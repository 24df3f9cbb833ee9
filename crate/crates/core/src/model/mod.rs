//! The unified decoder whose cross-modal attention is measured and shaped.

mod checkpoint;
mod config;
mod sequence;
mod transformer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{special, ModelConfig};
pub use sequence::{Modality, Task, TokenSequence};
pub use transformer::{
    attention_mask, build_model, forward_on_graph, ntp_loss_on_graph, parameter_layout, shifted_targets, ForwardVars,
};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};

/// Attention probabilities of one sample: `probs[layer][head]` is a `[Q, K]`
/// matrix with `Q = K = sequence length`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub probs: Vec<Vec<Tensor>>,
    pub modality: Vec<Modality>,
}

impl AttentionRecord {
    pub fn new(probs: Vec<Vec<Tensor>>, modality: Vec<Modality>) -> Result<Self> {
        let rec = Self { probs, modality };
        rec.check_shape()?;
        Ok(rec)
    }

    fn check_shape(&self) -> Result<()> {
        let t = self.modality.len();
        let heads = self.probs.first().map_or(0, Vec::len);
        if self.probs.is_empty() || heads == 0 {
            return Err(Error::Shape("attention record needs at least one layer and head".into()));
        }
        for layer in &self.probs {
            if layer.len() != heads {
                return Err(Error::Shape("ragged head count across layers".into()));
            }
            for m in layer {
                if m.shape() != [t, t] {
                    return Err(Error::Shape(format!("attention matrix {:?} for length {t}", m.shape())));
                }
            }
        }
        Ok(())
    }

    /// `(L, H, Q, K)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let t = self.modality.len();
        (self.probs.len(), self.probs[0].len(), t, t)
    }

    /// Largest deviation from 1 of any non-PAD row sum, and the largest
    /// probability mass found above the diagonal.
    pub fn stochasticity_violation(&self) -> (f64, f64) {
        let t = self.modality.len();
        let mut row_dev: f64 = 0.0;
        let mut upper: f64 = 0.0;
        for m in self.probs.iter().flatten() {
            for q in 0..t {
                let row = m.row(q);
                if self.modality[q] != Modality::Pad {
                    let s: f64 = row.iter().sum();
                    row_dev = row_dev.max((s - 1.0).abs());
                }
                for &v in &row[q + 1..] {
                    upper = upper.max(v.abs());
                }
            }
        }
        (row_dev, upper)
    }
}

/// Runs the decoder on `seq`; returns logits `[T, V]` and, if requested,
/// the attention probabilities of every layer and head.
pub fn forward(
    checkpoint: &Checkpoint,
    seq: &TokenSequence,
    record_attention: bool,
) -> Result<(Tensor, Option<AttentionRecord>)> {
    let mut g = Graph::new();
    let vars = forward_on_graph(&mut g, &checkpoint.config, &checkpoint.tensors, seq)?;
    let logits = g.value(vars.logits).clone();
    let attention = if record_attention {
        let probs = vars.attention.iter().map(|layer| layer.iter().map(|&v| g.value(v).clone()).collect()).collect();
        Some(AttentionRecord::new(probs, seq.modality.clone())?)
    } else {
        None
    };
    Ok((logits, attention))
}

/// Next-token cross entropy over the supervised positions of `seq`.
pub fn ntp_loss(logits: &Tensor, seq: &TokenSequence) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() != seq.len() {
        return Err(Error::Shape(format!("logits {:?} for sequence length {}", logits.shape(), seq.len())));
    }
    let (targets, mask) = shifted_targets(seq);
    crate::numerics::cross_entropy(logits, &targets, &mask)
}

//! Pre-norm causal decoder over the joint text+image vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::sequence::{Modality, TokenSequence};
use super::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

const INIT_STD: f64 = 0.02;
const PER_LAYER: usize = 16;

/// Per-layer tensor slots, in checkpoint order.
#[derive(Clone, Copy)]
enum Slot {
    Ln1Gain,
    Ln1Bias,
    Wq,
    Bq,
    Wk,
    Bk,
    Wv,
    Bv,
    Wo,
    Bo,
    Ln2Gain,
    Ln2Bias,
    W1,
    B1,
    W2,
    B2,
}

const SLOT_NAMES: [&str; PER_LAYER] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

fn layer_slot(layer: usize, slot: Slot) -> usize {
    2 + layer * PER_LAYER + slot as usize
}

/// Names and shapes of every weight tensor in the fixed checkpoint order:
/// `tok_emb, pos_emb, layers.{i}.*, ln_f.gain, ln_f.bias, lm_head`.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v, s, m) = (cfg.dim, cfg.vocab_size(), cfg.max_seq_len, cfg.mlp_dim());
    let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![s, d])];
    for l in 0..cfg.depth {
        let shapes: [Vec<usize>; PER_LAYER] = [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, m],
            vec![m],
            vec![m, d],
            vec![d],
        ];
        for (name, shape) in SLOT_NAMES.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("ln_f.gain".to_string(), vec![d]));
    out.push(("ln_f.bias".to_string(), vec![d]));
    out.push(("lm_head".to_string(), vec![d, v]));
    out
}

/// Deterministic initialization from `cfg.init_seed`: normal(0, 0.02) for
/// embeddings and projections, residual-output projections scaled by
/// `1/sqrt(2L)`, unit layer-norm gains, zero biases.
pub fn build_model(cfg: &ModelConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let layout = parameter_layout(cfg);
    let residual_std = INIT_STD / (2.0 * cfg.depth as f64).sqrt();
    let mut names = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let tensor = if name.ends_with(".gain") {
            Tensor::full(&shape, 1.0)
        } else if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let std = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") { residual_std } else { INIT_STD };
            let normal = Normal::new(0.0, std).expect("positive std");
            let numel = shape.iter().product();
            Tensor::new(shape, (0..numel).map(|_| normal.sample(&mut rng)).collect())?
        };
        names.push(name);
        tensors.push(tensor);
    }
    Ok(Checkpoint { config: cfg.clone(), names, tensors, step: 0 })
}

/// Graph handles produced by one forward pass.
pub struct ForwardVars {
    pub logits: Var,
    /// `attention[layer][head]`, each `[T, T]`.
    pub attention: Vec<Vec<Var>>,
    /// Parameter leaves in checkpoint order.
    pub params: Vec<Var>,
}

/// Attention validity mask: key `k` is visible from query `q` iff `k <= q`
/// and `k` is not PAD. A query with no visible key (leading PAD) sees itself.
pub fn attention_mask(modality: &[Modality]) -> Vec<bool> {
    let t = modality.len();
    let mut mask = vec![false; t * t];
    for q in 0..t {
        let row = &mut mask[q * t..(q + 1) * t];
        for k in 0..=q {
            row[k] = modality[k] != Modality::Pad;
        }
        if !row.iter().any(|&b| b) {
            row[q] = true;
        }
    }
    mask
}

/// Records the forward pass of `seq` on `graph`, reading weights from `weights`.
pub fn forward_on_graph<'a>(
    graph: &mut Graph<'a>,
    cfg: &ModelConfig,
    weights: &'a [Tensor],
    seq: &TokenSequence,
) -> Result<ForwardVars> {
    let t = seq.len();
    if t == 0 || t > cfg.max_seq_len {
        return Err(Error::Input(format!("sequence length {t} outside 1..={}", cfg.max_seq_len)));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&id| id >= cfg.vocab_size()) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size())));
    }
    if seq.modality.len() != t {
        return Err(Error::Input("modality labels do not match sequence length".into()));
    }
    let expected = 2 + cfg.depth * PER_LAYER + 3;
    if weights.len() != expected {
        return Err(Error::Shape(format!("expected {expected} weight tensors, got {}", weights.len())));
    }
    let params: Vec<Var> = weights.iter().map(|w| graph.param(w)).collect();
    let mask = attention_mask(&seq.modality);
    let (h_count, hd) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    let tok = graph.gather(params[0], &seq.ids)?;
    let pos = graph.leading_rows(params[1], t)?;
    let mut h = graph.add(tok, pos)?;
    let mut attention = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let p = |s: Slot| params[layer_slot(l, s)];
        let a = graph.layer_norm(h, p(Slot::Ln1Gain), p(Slot::Ln1Bias))?;
        let q = graph.linear(a, p(Slot::Wq), Some(p(Slot::Bq)))?;
        let k = graph.linear(a, p(Slot::Wk), Some(p(Slot::Bk)))?;
        let v = graph.linear(a, p(Slot::Wv), Some(p(Slot::Bv)))?;
        let mut heads = Vec::with_capacity(h_count);
        let mut contexts = Vec::with_capacity(h_count);
        for head in 0..h_count {
            let qh = graph.slice_cols(q, head * hd, hd)?;
            let kh = graph.slice_cols(k, head * hd, hd)?;
            let vh = graph.slice_cols(v, head * hd, hd)?;
            let scores = graph.matmul_nt(qh, kh, scale)?;
            let probs = graph.masked_softmax(scores, &mask)?;
            contexts.push(graph.matmul(probs, vh)?);
            heads.push(probs);
        }
        let ctx = graph.concat_cols(&contexts)?;
        let o = graph.linear(ctx, p(Slot::Wo), Some(p(Slot::Bo)))?;
        h = graph.add(h, o)?;
        let m = graph.layer_norm(h, p(Slot::Ln2Gain), p(Slot::Ln2Bias))?;
        let up = graph.linear(m, p(Slot::W1), Some(p(Slot::B1)))?;
        let act = graph.gelu(up);
        let down = graph.linear(act, p(Slot::W2), Some(p(Slot::B2)))?;
        h = graph.add(h, down)?;
        attention.push(heads);
    }
    let n = params.len();
    let f = graph.layer_norm(h, params[n - 3], params[n - 2])?;
    let logits = graph.linear(f, params[n - 1], None)?;
    Ok(ForwardVars { logits, attention, params })
}

/// Next-token targets and mask: row `t` predicts `ids[t+1]` when
/// `loss_mask[t+1]` is set. The final row is never supervised.
pub fn shifted_targets(seq: &TokenSequence) -> (Vec<usize>, Vec<bool>) {
    let n = seq.len();
    let mut targets = vec![0; n];
    let mut mask = vec![false; n];
    if n > 1 {
        targets[..n - 1].copy_from_slice(&seq.ids[1..]);
        mask[..n - 1].copy_from_slice(&seq.loss_mask[1..]);
    }
    (targets, mask)
}

/// Records the next-token-prediction loss for `seq` on `graph`.
pub fn ntp_loss_on_graph(graph: &mut Graph<'_>, logits: Var, seq: &TokenSequence) -> Result<Var> {
    let (targets, mask) = shifted_targets(seq);
    graph.cross_entropy(logits, &targets, &mask)
}

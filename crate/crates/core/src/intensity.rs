//! Layer-wise cross-modal interaction intensity.
//!
//! For one sample and one layer, the intensity is the attention mass that
//! query rows of the generated modality place on key columns of the
//! conditioning modality, averaged over heads and query rows:
//!
//! ```text
//! I_l = 1/(H·Q) · Σ_h Σ_{q ∈ queries} Σ_{k ∈ keys} A_l[h][q, k]
//! ```
//!
//! Averaging over `N` samples happens in [`aggregate_profiles`]. Rows are
//! not renormalized over cross-modal keys, so mass on special tokens and on
//! the query's own modality counts toward the denominator.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, Modality, Task, TokenSequence};
use crate::numerics::{deterministic_sum, Graph, Var};

/// Which positions act as queries (rows averaged) and keys (columns summed).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityRoles {
    pub task: Task,
    pub query_mask: Vec<bool>,
    pub key_mask: Vec<bool>,
}

impl ModalityRoles {
    /// Roles from modality labels alone. Generation: image queries over text
    /// keys. Understanding: text positions after the last image position
    /// query image keys.
    pub fn from_labels(task: Task, labels: &[Modality]) -> Result<Self> {
        let (query_mask, key_mask): (Vec<bool>, Vec<bool>) = match task {
            Task::Generation => labels.iter().map(|&m| (m == Modality::Image, m == Modality::Text)).unzip(),
            Task::Understanding => {
                let Some(last_image) = labels.iter().rposition(|&m| m == Modality::Image) else {
                    return Err(Error::Role("understanding sample has no image positions".into()));
                };
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| (m == Modality::Text && i > last_image, m == Modality::Image))
                    .unzip()
            }
        };
        if !query_mask.iter().any(|&b| b) {
            return Err(Error::Role(format!("{task} sample selects no query positions")));
        }
        if !key_mask.iter().any(|&b| b) {
            return Err(Error::Role(format!("{task} sample selects no key positions")));
        }
        Ok(Self { task, query_mask, key_mask })
    }

    pub fn query_positions(&self) -> Vec<usize> {
        positions(&self.query_mask)
    }

    pub fn key_positions(&self) -> Vec<usize> {
        positions(&self.key_mask)
    }

    pub fn len(&self) -> usize {
        self.query_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_mask.is_empty()
    }
}

fn positions(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
}

/// Task of a sample judged from its labels: text before image means
/// generation, image before text means understanding.
pub fn infer_task(labels: &[Modality]) -> Result<Task> {
    let first_text = labels.iter().position(|&m| m == Modality::Text);
    let first_image = labels.iter().position(|&m| m == Modality::Image);
    match (first_text, first_image) {
        (Some(t), Some(i)) if t < i => Ok(Task::Generation),
        (Some(_), Some(_)) => Ok(Task::Understanding),
        _ => Err(Error::Role("sample needs both text and image positions".into())),
    }
}

pub fn modality_roles(seq: &TokenSequence) -> Result<ModalityRoles> {
    let has = |m| seq.modality.contains(&m);
    if !has(Modality::Text) || !has(Modality::Image) {
        return Err(Error::Role(format!("{} sample is missing a modality", seq.task)));
    }
    ModalityRoles::from_labels(seq.task, &seq.modality)
}

/// Per-layer intensities `I_l ∈ [0, 1]` for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityProfile {
    pub task: Task,
    pub values: Vec<f64>,
    /// Number of samples the values average over.
    pub samples: usize,
}

impl IntensityProfile {
    pub fn depth(&self) -> usize {
        self.values.len()
    }

    /// Mean over layers.
    pub fn layer_mean(&self) -> f64 {
        deterministic_sum(self.values.iter().copied()) / self.values.len() as f64
    }
}

/// Single-sample intensity profile of an attention record.
pub fn layer_intensity(attn: &AttentionRecord, roles: &ModalityRoles) -> Result<IntensityProfile> {
    let (_, heads, q_len, _) = attn.dims();
    if roles.len() != q_len {
        return Err(Error::Role(format!("roles cover {} positions, record has {q_len}", roles.len())));
    }
    if roles.query_mask.iter().zip(&roles.key_mask).any(|(&q, &k)| q && k) {
        return Err(Error::Role("query and key masks overlap".into()));
    }
    let queries = roles.query_positions();
    let keys = roles.key_positions();
    if queries.is_empty() || keys.is_empty() {
        return Err(Error::Role("empty query or key mask".into()));
    }
    let norm = (heads * queries.len()) as f64;
    let values = attn
        .probs
        .iter()
        .map(|layer| {
            let per_row = layer.iter().flat_map(|m| queries.iter().map(|&q| deterministic_sum(keys.iter().map(|&k| m.at(q, k)))));
            deterministic_sum(per_row) / norm
        })
        .collect();
    Ok(IntensityProfile { task: roles.task, values, samples: 1 })
}

/// Records the per-layer intensities on `graph` so they stay differentiable.
pub fn intensity_on_graph(graph: &mut Graph<'_>, attention: &[Vec<Var>], roles: &ModalityRoles) -> Result<Vec<Var>> {
    let query: Arc<[usize]> = roles.query_positions().into();
    let key: Arc<[usize]> = roles.key_positions().into();
    if query.is_empty() || key.is_empty() {
        return Err(Error::Role("empty query or key mask".into()));
    }
    Ok(attention
        .iter()
        .map(|heads| {
            let scale = 1.0 / (heads.len() * query.len()) as f64;
            graph.role_mass(heads, query.clone(), key.clone(), scale)
        })
        .collect())
}

/// Mean and population standard deviation across samples, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateProfile {
    pub mean: IntensityProfile,
    pub std: Vec<f64>,
}

pub fn aggregate_profiles(profiles: &[IntensityProfile]) -> Result<AggregateProfile> {
    let first = profiles.first().ok_or_else(|| Error::Aggregation("no profiles to aggregate".into()))?;
    let depth = first.depth();
    for p in profiles {
        if p.depth() != depth {
            return Err(Error::Shape(format!("mixed depths {depth} and {}", p.depth())));
        }
        if p.task != first.task {
            return Err(Error::Aggregation("profiles from different tasks".into()));
        }
    }
    let n = profiles.len() as f64;
    let mut mean = Vec::with_capacity(depth);
    let mut std = Vec::with_capacity(depth);
    for l in 0..depth {
        let (m, s) = mean_std(profiles.iter().map(|p| p.values[l]), n);
        mean.push(m);
        std.push(s);
    }
    let samples = profiles.iter().map(|p| p.samples).sum();
    Ok(AggregateProfile { mean: IntensityProfile { task: first.task, values: mean, samples }, std })
}

/// Population standard deviation of the per-sample layer-mean intensities.
pub fn profile_std_scalar(profiles: &[IntensityProfile]) -> Result<f64> {
    if profiles.len() < 2 {
        return Err(Error::Aggregation(format!("need at least 2 profiles, got {}", profiles.len())));
    }
    let n = profiles.len() as f64;
    Ok(mean_std(profiles.iter().map(IntensityProfile::layer_mean), n).1)
}

// Shifted by the first value so identical inputs give their exact value and a
// zero spread.
fn mean_std(xs: impl Iterator<Item = f64> + Clone, n: f64) -> (f64, f64) {
    let x0 = xs.clone().next().unwrap_or(0.0);
    let d = deterministic_sum(xs.clone().map(|x| x - x0)) / n;
    let var = deterministic_sum(xs.map(|x| (x - x0 - d).powi(2))) / n;
    (x0 + d, var.sqrt())
}

/// Profile CSV: header `layer,task,mean,std,n`, one row per layer, values
/// with 17 significant digits, optional trailing `# scalar_std=` comment.
pub fn profile_csv(agg: &AggregateProfile, scalar_std: Option<f64>) -> String {
    let mut out = String::from("layer,task,mean,std,n\n");
    for (l, (m, s)) in agg.mean.values.iter().zip(&agg.std).enumerate() {
        let _ = writeln!(out, "{l},{},{},{},{}", agg.mean.task, fmt17(*m), fmt17(*s), agg.mean.samples);
    }
    if let Some(s) = scalar_std {
        let _ = writeln!(out, "# scalar_std={}", fmt17(s));
    }
    out
}

/// Scientific notation with 17 significant digits; parses back to the same bits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

//! Training loop combining next-token prediction with attention alignment.
//!
//! Every step draws one single-task batch, runs each sample's forward pass
//! with attention recorded, and forms
//!
//! ```text
//! total = mean_n NTP_n + lambda · AIA(mean_n I_n)
//! ```
//!
//! where `I_n` is sample `n`'s per-layer intensity profile and the
//! alignment targets come from the schedule of the batch's task. Samples
//! are processed in parallel; every cross-sample reduction runs in sample
//! order so results do not depend on the worker count.

mod check;
mod config;
mod optim;
mod runlog;

pub use check::{model_grad_check, GradCheckCase, GRAD_SCALE_FLOOR, GRAD_TOLERANCE};
pub use config::{AiaConfig, LrSchedule, OptimConfig, Regime, RunConfig, TrainConfig};
pub use optim::{clip_global_norm, global_norm, AdamW};
pub use runlog::{EvalRecord, RunLog, StepRecord};

use std::path::Path;
use std::time::Instant;

use crate::aia::{aia_loss_with_grad, rescale_schedule, LayerTarget, LossWeight};
use crate::error::{Error, Result};
use crate::intensity::{
    aggregate_profiles, intensity_on_graph, layer_intensity, modality_roles, profile_csv, profile_std_scalar,
    AggregateProfile,
};
use crate::model::{build_model, forward, forward_on_graph, ntp_loss, ntp_loss_on_graph, Checkpoint, ModelConfig};
use crate::model::{Task, TokenSequence};
use crate::numerics::{deterministic_sum, Graph, PenaltyKind, Tensor};
use crate::parallel::map_ordered;
use crate::tasks::{mix_stream_with, sample_from_seed, sample_seed, SampleOptions, Split};

/// The alignment term applied to one batch.
#[derive(Clone, Debug)]
pub struct AlignmentTerm {
    pub targets: Vec<LayerTarget>,
    pub kind: PenaltyKind,
    pub lambda: f64,
}

/// Losses and (optionally) parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub ntp: f64,
    pub aia: f64,
    pub total: f64,
    /// Batch-mean intensity per layer; empty when no alignment term was given.
    pub profile: Vec<f64>,
    pub grads: Option<Vec<Tensor>>,
}

struct SampleForward<'a> {
    graph: Graph<'a>,
    ntp: crate::numerics::Var,
    intensities: Vec<crate::numerics::Var>,
    params: Vec<crate::numerics::Var>,
}

/// Evaluates `mean NTP + lambda · AIA(batch-mean profile)` on `samples`.
/// With `align = None` the alignment code path is skipped entirely.
pub fn batch_objective(
    model: &ModelConfig,
    weights: &[Tensor],
    samples: &[TokenSequence],
    align: Option<&AlignmentTerm>,
    want_grad: bool,
) -> Result<BatchOutcome> {
    weighted_objective(model, weights, samples, align, 1.0, want_grad)
}

// `ntp_weight · mean NTP + lambda · AIA`; a zero weight drops the NTP seed.
fn weighted_objective(
    model: &ModelConfig,
    weights: &[Tensor],
    samples: &[TokenSequence],
    align: Option<&AlignmentTerm>,
    ntp_weight: f64,
    want_grad: bool,
) -> Result<BatchOutcome> {
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let forwards: Vec<Result<SampleForward<'_>>> = map_ordered(samples.iter().collect(), |seq| {
        let mut graph = Graph::new();
        let vars = forward_on_graph(&mut graph, model, weights, seq)?;
        let ntp = ntp_loss_on_graph(&mut graph, vars.logits, seq)?;
        let intensities = match align {
            Some(_) => intensity_on_graph(&mut graph, &vars.attention, &modality_roles(seq)?)?,
            None => Vec::new(),
        };
        Ok(SampleForward { graph, ntp, intensities, params: vars.params })
    });
    let forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;
    let n = forwards.len() as f64;
    let ntp = deterministic_sum(forwards.iter().map(|f| f.graph.value(f.ntp).item())) / n;

    let (aia, profile, layer_grad) = match align {
        Some(term) => {
            let depth = term.targets.len();
            let profile: Vec<f64> = (0..depth)
                .map(|l| deterministic_sum(forwards.iter().map(|f| f.graph.value(f.intensities[l]).item())) / n)
                .collect();
            let (aia, grad) = aia_loss_with_grad(&profile, &term.targets, term.kind)?;
            (aia, profile, grad)
        }
        None => (0.0, Vec::new(), Vec::new()),
    };
    let lambda = align.map_or(0.0, |t| t.lambda);
    let total = if align.is_some() { ntp_weight * ntp + lambda * aia } else { ntp_weight * ntp };

    let grads = if want_grad {
        let per_sample: Vec<Vec<Tensor>> = map_ordered(forwards, |f| {
            let mut seeds = Vec::new();
            if ntp_weight != 0.0 {
                seeds.push((f.ntp, ntp_weight / n));
            }
            if lambda > 0.0 {
                seeds.extend(f.intensities.iter().zip(&layer_grad).map(|(&v, &g)| (v, lambda * g / n)));
            }
            let mut g = f.graph.backward(&seeds);
            f.params.iter().map(|&p| g.take_or_zeros(p, f.graph.value(p).shape())).collect()
        });
        let mut iter = per_sample.into_iter();
        let mut acc = iter.next().expect("non-empty batch");
        for sample in iter {
            for (a, g) in acc.iter_mut().zip(&sample) {
                a.add_assign(g);
            }
        }
        Some(acc)
    } else {
        None
    };
    Ok(BatchOutcome { ntp, aia, total, profile, grads })
}

/// Mean out-of-band distance `mean_l max(0, |I_l − T_l| − δ_l)`.
pub fn alignment_gap(values: &[f64], targets: &[LayerTarget]) -> Result<f64> {
    if values.len() != targets.len() || values.is_empty() {
        return Err(Error::Shape(format!("profile depth {} but {} layer targets", values.len(), targets.len())));
    }
    let gaps = values.iter().zip(targets).map(|(&i, t)| ((i - t.target).abs() - t.delta).max(0.0));
    Ok(deterministic_sum(gaps) / values.len() as f64)
}

/// Which eval samples [`evaluate`] draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSamples {
    /// Held-out samples `0..count` from the eval split.
    HeldOut { seed: u64 },
    /// The first held-out sample repeated (test mode).
    Identical { seed: u64 },
}

impl EvalSamples {
    pub fn sequences(&self, task: Task, count: usize, opts: SampleOptions) -> Vec<TokenSequence> {
        match *self {
            EvalSamples::HeldOut { seed } => {
                (0..count).map(|i| sample_from_seed(task, sample_seed(Split::Eval, seed, i as u64), opts)).collect()
            }
            EvalSamples::Identical { seed } => {
                vec![sample_from_seed(task, sample_seed(Split::Eval, seed, 0), opts); count]
            }
        }
    }
}

/// Eval loss and intensity statistics for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub task: Task,
    pub ntp: f64,
    pub profile: AggregateProfile,
    pub scalar_std: f64,
}

impl Evaluation {
    pub fn to_csv(&self) -> String {
        profile_csv(&self.profile, Some(self.scalar_std))
    }
}

/// Forward-only evaluation over `sequences`, which must all be of `task`.
pub fn evaluate_sequences(checkpoint: &Checkpoint, task: Task, sequences: Vec<TokenSequence>) -> Result<Evaluation> {
    if sequences.len() < 2 {
        return Err(Error::Aggregation(format!("evaluation needs at least 2 samples, got {}", sequences.len())));
    }
    if let Some(s) = sequences.iter().find(|s| s.task != task) {
        return Err(Error::Input(format!("{} sample in a {task} evaluation", s.task)));
    }
    let results: Vec<Result<_>> = map_ordered(sequences, |seq| {
        let (logits, attn) = forward(checkpoint, &seq, true)?;
        let attn = attn.expect("attention requested");
        Ok((ntp_loss(&logits, &seq)?, layer_intensity(&attn, &modality_roles(&seq)?)?))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let ntp = deterministic_sum(results.iter().map(|r| r.0)) / n;
    let profiles: Vec<_> = results.into_iter().map(|r| r.1).collect();
    Ok(Evaluation { task, ntp, profile: aggregate_profiles(&profiles)?, scalar_std: profile_std_scalar(&profiles)? })
}

pub fn evaluate(checkpoint: &Checkpoint, task: Task, sample_count: usize, samples: EvalSamples) -> Result<Evaluation> {
    if sample_count < 2 {
        return Err(Error::Aggregation(format!("evaluation needs at least 2 samples, got {sample_count}")));
    }
    evaluate_sequences(checkpoint, task, samples.sequences(task, sample_count, SampleOptions::default()))
}

/// Resolved per-task targets for a model depth.
pub fn layer_targets(cfg: &TrainConfig, task: Task) -> Result<Vec<LayerTarget>> {
    rescale_schedule(&cfg.aia.schedule(task)?, cfg.model.depth)
}

fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    match &cfg.run.warm_start {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut want = cfg.model.clone();
            want.init_seed = ckpt.config.init_seed;
            if ckpt.config != want {
                return Err(Error::Checkpoint(format!(
                    "warm-start model {:?} does not match configured model {:?}",
                    ckpt.config, cfg.model
                )));
            }
            Ok(ckpt)
        }
        None => build_model(&cfg.model),
    }
}

/// Measures initial NTP and alignment losses on held-out calibration
/// samples of both tasks and converts the configured weight to `lambda`.
pub fn resolve_lambda(cfg: &TrainConfig, checkpoint: &Checkpoint) -> Result<f64> {
    let weight = cfg.aia.loss_weight()?;
    if let LossWeight::Lambda(l) = weight {
        return Ok(l);
    }
    let mut ntps = Vec::new();
    let mut aias = Vec::new();
    for task in Task::ALL {
        let term = AlignmentTerm { targets: layer_targets(cfg, task)?, kind: cfg.aia.penalty, lambda: 0.0 };
        let samples = EvalSamples::HeldOut { seed: cfg.run.eval_seed ^ 0xCA11 }.sequences(
            task,
            cfg.aia.calibration_samples,
            cfg.run.sample,
        );
        let out = batch_objective(&checkpoint.config, &checkpoint.tensors, &samples, Some(&term), false)?;
        ntps.push(out.ntp);
        aias.push(out.aia);
    }
    let ntp0 = deterministic_sum(ntps) / 2.0;
    let aia0 = deterministic_sum(aias) / 2.0;
    weight.resolve(ntp0, aia0)
}

/// Run without writing anything to disk.
pub fn train(cfg: &TrainConfig) -> Result<(Checkpoint, RunLog)> {
    train_in(cfg, None)
}

/// Runs the loop; with `out_dir`, also writes the run directory
/// (`config.toml`, `runlog.jsonl`, `evals.jsonl`, profile CSVs and
/// `step_<n>.aiac` checkpoints at every eval point).
pub fn train_in(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<(Checkpoint, RunLog)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut ckpt = initial_checkpoint(cfg)?;
    let lambda = if cfg.aia.enabled { resolve_lambda(cfg, &ckpt)? } else { 0.0 };
    let targets = [layer_targets(cfg, Task::Generation)?, layer_targets(cfg, Task::Understanding)?];
    let mut log = RunLog { lambda, weight: cfg.aia.loss_weight()?.to_string(), ..Default::default() };
    let mut writer = match out_dir {
        Some(dir) => Some(runlog::RunWriter::create(dir, cfg, lambda)?),
        None => None,
    };

    let mut opt = AdamW::new(&ckpt.tensors);
    let start_step = ckpt.step;
    let steps = cfg.run.steps;
    let stream = mix_stream_with(cfg.mixer, cfg.run.batch_size, steps, cfg.run.sample)?;
    for batch in stream {
        let step = batch.index;
        // a zero weight contributes nothing, so the term is skipped and logs 0
        let term = (cfg.aia.enabled && lambda > 0.0).then(|| AlignmentTerm {
            targets: targets[batch.task as usize].clone(),
            kind: cfg.aia.penalty,
            lambda,
        });
        let out = batch_objective(&ckpt.config, &ckpt.tensors, &batch.samples, term.as_ref(), true)?;
        if !out.total.is_finite() || !out.ntp.is_finite() || !out.aia.is_finite() {
            return Err(Error::Divergence { step });
        }
        let mut grads = out.grads.expect("gradients requested");
        let (grad_norm, clipped) = clip_global_norm(&mut grads, cfg.optim.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step });
        }
        opt.update(&mut ckpt.tensors, &grads, &cfg.optim, cfg.optim.lr_at(step, steps));
        ckpt.step += 1;
        let record = StepRecord {
            step,
            task: batch.task,
            ntp: out.ntp,
            aia: out.aia,
            total: out.total,
            grad_norm,
            clipped,
        };
        if let Some(w) = writer.as_mut() {
            w.step(&record)?;
        }
        log.steps.push(record);

        let done = step + 1;
        let eval_now = done == steps || (cfg.run.eval_interval > 0 && done % cfg.run.eval_interval == 0);
        if eval_now {
            run_eval(cfg, &ckpt, &targets, done, &mut log, writer.as_mut())?;
        }
    }
    if steps == 0 {
        run_eval(cfg, &ckpt, &targets, 0, &mut log, writer.as_mut())?;
    }
    debug_assert_eq!(ckpt.step, start_step + steps as u64);
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(w) = writer.as_mut() {
        w.finish(&ckpt)?;
    }
    Ok((ckpt, log))
}

fn run_eval(
    cfg: &TrainConfig,
    ckpt: &Checkpoint,
    targets: &[Vec<LayerTarget>; 2],
    step: usize,
    log: &mut RunLog,
    writer: Option<&mut runlog::RunWriter>,
) -> Result<()> {
    let mut evals = Vec::with_capacity(2);
    for task in Task::ALL {
        let seqs = EvalSamples::HeldOut { seed: cfg.run.eval_seed }.sequences(task, cfg.run.eval_samples, cfg.run.sample);
        let e = evaluate_sequences(ckpt, task, seqs)?;
        if !e.ntp.is_finite() {
            return Err(Error::Divergence { step });
        }
        let gap = alignment_gap(&e.profile.mean.values, &targets[task as usize])?;
        log.evals.push(EvalRecord::new(step, &e, gap));
        evals.push(e);
    }
    if let Some(w) = writer {
        w.eval(step, ckpt, &evals, &log.evals[log.evals.len() - 2..])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lt(delta: f64, target: f64) -> LayerTarget {
        LayerTarget { target, delta }
    }

    #[test]
    fn gap_examples() {
        let t = vec![lt(0.1, 0.4); 4];
        assert_eq!(alignment_gap(&[0.45, 0.35, 0.4, 0.5], &t).unwrap(), 0.0);
        let g = alignment_gap(&[0.4, 0.4, 0.4, 0.4 + 0.1 + 0.1], &t).unwrap();
        assert!((g - 0.025).abs() < 1e-12);
        let moved = alignment_gap(&[0.31, 0.49, 0.4, 0.6], &t).unwrap();
        assert!((moved - g).abs() < 1e-12);
        assert!(matches!(alignment_gap(&[0.4], &t), Err(Error::Shape(_))));
    }
}

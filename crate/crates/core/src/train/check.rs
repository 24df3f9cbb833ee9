//! Finite-difference verification of the training objective's gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{weighted_objective, AlignmentTerm};
use crate::aia::{builtin_schedule, rescale_schedule, Provenance, DEFAULT_LAMBDA};
use crate::error::Result;
use crate::model::{build_model, ModelConfig, Task, TokenSequence};
use crate::numerics::{grad_check, max_relative_error, GradCheckOptions, GradReport, PenaltyKind, Tensor};
use crate::tasks::{sample_from_seed, sample_seed, task_model_config, SampleOptions, Split};

pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error; see [`GradReport::effective_error`].
///
/// [`GradReport::effective_error`]: crate::numerics::GradReport::effective_error
pub const GRAD_SCALE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub reports: Vec<GradReport>,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRAD_TOLERANCE
    }
}

/// Checks NTP-only, AIA-only and combined losses, the latter two at `lambda = 40`, of a small
/// task model on one generation and one understanding batch.
///
/// Weights are jittered away from the near-uniform initialization so the
/// attention pattern, and therefore the intensity gradient, is non-trivial.
/// `corrupt` scales the analytic gradient by 1.01, which any working check
/// must reject.
pub fn model_grad_check(depth: usize, heads: usize, dim: usize, seed: u64, corrupt: bool) -> Result<Vec<GradCheckCase>> {
    let model = ModelConfig { depth, heads, dim, init_seed: seed, ..task_model_config() };
    let mut ckpt = build_model(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6AAD);
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    for t in &mut ckpt.tensors {
        t.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    let batches: Vec<(Vec<TokenSequence>, Vec<_>)> = Task::ALL
        .iter()
        .map(|&task| {
            let samples = (0..2)
                .map(|i| sample_from_seed(task, sample_seed(Split::Train, seed, i), SampleOptions::default()))
                .collect();
            let targets = rescale_schedule(&builtin_schedule(Provenance::JanusPro, task)?, depth)?;
            Ok((samples, targets))
        })
        .collect::<Result<_>>()?;

    let cases: [(&'static str, f64, Option<f64>); 3] =
        [("ntp", 1.0, None), ("aia", 0.0, Some(DEFAULT_LAMBDA)), ("combined", 1.0, Some(DEFAULT_LAMBDA))];
    let opts = GradCheckOptions { seed, ..Default::default() };
    let mut out = Vec::with_capacity(cases.len());
    for (name, ntp_weight, lambda) in cases {
        let objective = |params: &[Tensor], want_grad: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
            let mut value = 0.0;
            let mut grad: Option<Vec<Tensor>> = None;
            for (samples, targets) in &batches {
                let term = lambda.map(|lambda| AlignmentTerm { targets: targets.clone(), kind: PenaltyKind::Huber, lambda });
                let o = weighted_objective(&model, params, samples, term.as_ref(), ntp_weight, want_grad)?;
                value += o.total;
                if let Some(g) = o.grads {
                    match grad.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                        None => grad = Some(g),
                    }
                }
            }
            if corrupt {
                if let Some(g) = grad.as_mut() {
                    g.iter_mut().for_each(|t| *t = t.scale(1.01));
                }
            }
            Ok((value, grad))
        };
        let reports = grad_check(&objective, &ckpt.names, &ckpt.tensors, &opts)?;
        out.push(GradCheckCase { name, max_relative_error: max_relative_error(&reports, GRAD_SCALE_FLOOR), reports });
    }
    Ok(out)
}

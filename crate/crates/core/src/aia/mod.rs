//! Attention interaction alignment loss.
//!
//! Each layer's intensity is pulled toward its stage target with a Huber
//! penalty; the per-layer penalties are averaged and added to the
//! next-token loss with weight `lambda`.

mod schedule;

pub use schedule::{
    builtin_schedule, rescale_schedule, LayerTarget, Provenance, TargetSchedule, TargetStage, EMU3_REFERENCE_DEPTH,
    JANUS_PRO_REFERENCE_DEPTH,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::IntensityProfile;
use crate::numerics::{deterministic_sum, penalty_grad, penalty_value, PenaltyKind};

pub const DEFAULT_LAMBDA: f64 = 40.0;

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("Huber threshold must be positive, got {delta}")))
    }
}

/// `½(I−T)²` when `|I−T| ≤ δ`, else `δ·|I−T| − ½δ²`.
pub fn huber_penalty(intensity: f64, target: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(penalty_value(intensity, target, delta, PenaltyKind::Huber))
}

/// Derivative of [`huber_penalty`] with respect to the intensity.
pub fn huber_slope(intensity: f64, target: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(penalty_grad(intensity, target, delta, PenaltyKind::Huber))
}

/// Mean penalty over layers together with its gradient with respect to
/// each layer's intensity.
pub fn aia_loss_with_grad(values: &[f64], targets: &[LayerTarget], kind: PenaltyKind) -> Result<(f64, Vec<f64>)> {
    if values.len() != targets.len() {
        return Err(Error::Shape(format!("profile depth {} but {} layer targets", values.len(), targets.len())));
    }
    if values.is_empty() {
        return Err(Error::Shape("empty profile".into()));
    }
    for t in targets {
        check_delta(t.delta)?;
    }
    let depth = values.len() as f64;
    let loss = deterministic_sum(values.iter().zip(targets).map(|(&i, t)| penalty_value(i, t.target, t.delta, kind))) / depth;
    let grad = values.iter().zip(targets).map(|(&i, t)| penalty_grad(i, t.target, t.delta, kind) / depth).collect();
    Ok((loss, grad))
}

pub fn aia_loss(profile: &IntensityProfile, targets: &[LayerTarget]) -> Result<f64> {
    Ok(aia_loss_with_grad(&profile.values, targets, PenaltyKind::Huber)?.0)
}

pub fn total_loss(ntp: f64, aia: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(ntp + lambda * aia)
}

/// How strongly the alignment term is weighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeight {
    /// Fixed `lambda`.
    Lambda(f64),
    /// `ntp : aia` contribution ratio at initialization; converted to
    /// `lambda` from the initial loss magnitudes.
    Ratio { ntp: f64, aia: f64 },
}

impl Default for LossWeight {
    fn default() -> Self {
        LossWeight::Lambda(DEFAULT_LAMBDA)
    }
}

impl LossWeight {
    /// Parses `"50:1"` as a ratio and a bare number as `lambda`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("cannot parse loss weight {s:?}"));
        let w = if let Some((a, b)) = s.split_once(':') {
            LossWeight::Ratio { ntp: a.trim().parse().map_err(|_| bad())?, aia: b.trim().parse().map_err(|_| bad())? }
        } else {
            LossWeight::Lambda(s.trim().parse().map_err(|_| bad())?)
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossWeight::Lambda(l) if !(l >= 0.0 && l.is_finite()) => {
                Err(Error::Parameter(format!("lambda must be non-negative, got {l}")))
            }
            LossWeight::Ratio { ntp, aia } if !(ntp > 0.0 && aia >= 0.0 && ntp.is_finite() && aia.is_finite()) => {
                Err(Error::Parameter(format!("ratio {ntp}:{aia} must have a positive NTP part")))
            }
            _ => Ok(()),
        }
    }

    /// Resolves to `lambda`. A ratio `a:b` picks `lambda` so that
    /// `initial_ntp : lambda·initial_aia = a : b`.
    pub fn resolve(&self, initial_ntp: f64, initial_aia: f64) -> Result<f64> {
        self.validate()?;
        match *self {
            LossWeight::Lambda(l) => Ok(l),
            LossWeight::Ratio { aia: 0.0, .. } => Ok(0.0),
            LossWeight::Ratio { ntp, aia } => {
                #[allow(clippy::neg_cmp_op_on_partial_ord)]
                if !(initial_aia > 0.0) {
                    return Err(Error::Parameter("initial alignment loss is zero; a ratio cannot be converted".into()));
                }
                Ok(initial_ntp / initial_aia * aia / ntp)
            }
        }
    }
}

impl std::fmt::Display for LossWeight {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossWeight::Lambda(l) => write!(f, "{l}"),
            LossWeight::Ratio { ntp, aia } => write!(f, "{ntp}:{aia}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Task;

    fn lt(delta: f64, target: f64) -> LayerTarget {
        LayerTarget { target, delta }
    }

    #[test]
    fn huber_worked_values() {
        assert!((huber_penalty(0.5, 0.4, 0.2).unwrap() - 0.005).abs() < 1e-15);
        assert!((huber_penalty(0.8, 0.4, 0.2).unwrap() - 0.06).abs() < 1e-15);
        assert_eq!(huber_penalty(0.4, 0.4, 0.2).unwrap(), 0.0);
        assert!(matches!(huber_penalty(0.5, 0.4, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(huber_penalty(0.5, 0.4, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn aia_mean_of_two_layers() {
        let p = IntensityProfile { task: Task::Generation, values: vec![0.5, 0.8], samples: 1 };
        let loss = aia_loss(&p, &[lt(0.2, 0.4), lt(0.2, 0.4)]).unwrap();
        assert!((loss - 0.0325).abs() < 1e-15);
        let at = IntensityProfile { task: Task::Generation, values: vec![0.4, 0.1], samples: 1 };
        assert_eq!(aia_loss(&at, &[lt(0.2, 0.4), lt(0.05, 0.1)]).unwrap(), 0.0);
        assert!(matches!(aia_loss(&p, &[lt(0.2, 0.4)]), Err(Error::Shape(_))));
    }

    #[test]
    fn total_loss_cases() {
        assert!((total_loss(2.0, 0.0325, 40.0).unwrap() - 3.3).abs() < 1e-12);
        assert_eq!(total_loss(2.0, 0.5, 0.0).unwrap(), 2.0);
        assert_eq!(total_loss(2.0, 0.0, 123.0).unwrap(), 2.0);
        assert!(matches!(total_loss(2.0, 0.1, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn loss_weight_parsing_and_resolution() {
        assert_eq!(LossWeight::parse("40").unwrap(), LossWeight::Lambda(40.0));
        let r = LossWeight::parse("50:1").unwrap();
        assert_eq!(r, LossWeight::Ratio { ntp: 50.0, aia: 1.0 });
        // ntp 3.0, aia 0.01 → λ·0.01 = 3.0/50 → λ = 6
        assert!((r.resolve(3.0, 0.01).unwrap() - 6.0).abs() < 1e-12);
        assert!(LossWeight::parse("-1").is_err());
        assert!(LossWeight::parse("0:1").is_err());
        assert!(LossWeight::parse("a:b").is_err());
        assert_eq!(LossWeight::parse("1:0").unwrap().resolve(3.0, 0.0).unwrap(), 0.0);
        assert!(r.resolve(3.0, 0.0).is_err());
    }
}

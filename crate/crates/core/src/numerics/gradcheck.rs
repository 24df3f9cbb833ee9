use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// A scalar function of a parameter list that can also report its gradient.
pub trait Objective {
    fn value(&self, params: &[Tensor]) -> Result<f64>;
    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// Any `Fn(params, want_grad) -> (value, gradient?)` is an objective.
impl<F> Objective for F
where
    F: Fn(&[Tensor], bool) -> Result<(f64, Option<Vec<Tensor>>)>,
{
    fn value(&self, params: &[Tensor]) -> Result<f64> {
        Ok(self(params, false)?.0)
    }

    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Tensor>> {
        self(params, true)?.1.ok_or_else(|| Error::Input("objective returned no gradient".into()))
    }
}

/// One analytic-versus-numeric comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

impl GradReport {
    pub fn new(parameter: String, analytic: f64, numeric: f64) -> Self {
        Self { parameter, analytic, numeric, relative_error: relative_error(analytic, numeric) }
    }

    /// Relative error with the denominator held at `scale_floor` or more.
    /// Central differences carry rounding noise of roughly `1e-10`, so
    /// gradients much smaller than the floor are judged on absolute error.
    pub fn effective_error(&self, scale_floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + self.numeric.abs()).max(scale_floor)
    }
}

pub fn max_relative_error(reports: &[GradReport], scale_floor: f64) -> f64 {
    reports.iter().map(|r| r.effective_error(scale_floor)).fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step `h`.
    pub step: f64,
    /// Entries checked per tensor; tensors this small or smaller are checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, samples_per_tensor: 6, seed: 0 }
    }
}

/// Compare the analytic gradient of `objective` with central differences
/// `(f(p+h) - f(p-h)) / 2h` at sampled entries of every parameter tensor.
pub fn grad_check<O: Objective + ?Sized>(
    objective: &O,
    names: &[String],
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<Vec<GradReport>> {
    if opts.step <= 0.0 || !opts.step.is_finite() {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {}", opts.step)));
    }
    if names.len() != params.len() {
        return Err(Error::Shape("one name per parameter tensor".into()));
    }
    let analytic = objective.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Shape("gradient count differs from parameter count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut reports = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let numel = params[t].numel();
        let mut picks: Vec<usize> = if numel <= opts.samples_per_tensor {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, opts.samples_per_tensor).into_vec()
        };
        picks.sort_unstable();
        for idx in picks {
            let orig = params[t].data()[idx];
            work[t].data_mut()[idx] = orig + opts.step;
            let plus = objective.value(&work)?;
            work[t].data_mut()[idx] = orig - opts.step;
            let minus = objective.value(&work)?;
            work[t].data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Perturbation { param: name.clone(), index: idx });
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            reports.push(GradReport::new(format!("{name}[{idx}]"), analytic[t].data()[idx], numeric));
        }
    }
    Ok(reports)
}

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aia::{builtin_schedule, LossWeight, Provenance, TargetSchedule};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};
use crate::numerics::PenaltyKind;
use crate::tasks::{self, MixerConfig, SampleOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Random initialization, alignment loss from the first step.
    #[default]
    Sft,
    /// Fine-tune from a warm-start checkpoint.
    Post,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Regime::Sft),
            "post" => Ok(Regime::Post),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to zero over the run, after warmup.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_steps: 0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = (step - self.warmup_steps) as f64 / span;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AiaConfig {
    /// `false` removes the alignment term from the code path entirely.
    pub enabled: bool,
    /// `"40"` for a fixed lambda or `"50:1"` for an NTP:AIA ratio.
    pub weight: String,
    pub provenance: Provenance,
    pub penalty: PenaltyKind,
    /// Per-task eval samples used to measure initial losses for ratio weights.
    pub calibration_samples: usize,
    /// Overrides the builtin table for generation batches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation: Option<TargetSchedule>,
    /// Overrides the builtin table for understanding batches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub understanding: Option<TargetSchedule>,
}

impl Default for AiaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            weight: "40".into(),
            provenance: Provenance::JanusPro,
            penalty: PenaltyKind::Huber,
            calibration_samples: 32,
            generation: None,
            understanding: None,
        }
    }
}

impl AiaConfig {
    pub fn loss_weight(&self) -> Result<LossWeight> {
        LossWeight::parse(&self.weight).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self, task: Task) -> Result<TargetSchedule> {
        let custom = match task {
            Task::Generation => &self.generation,
            Task::Understanding => &self.understanding,
        };
        match custom {
            Some(s) => {
                if s.task != task {
                    return Err(Error::Config(format!("{task} schedule is labelled {}", s.task)));
                }
                s.validate()?;
                Ok(s.clone())
            }
            None => builtin_schedule(self.provenance, task),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate (and checkpoint) every this many steps; `0` evaluates only at the end.
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub regime: Regime,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<PathBuf>,
    pub sample: SampleOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            eval_interval: 0,
            eval_samples: 100,
            eval_seed: 1,
            regime: Regime::Sft,
            warm_start: None,
            sample: SampleOptions::default(),
        }
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mixer: MixerConfig,
    pub aia: AiaConfig,
    pub optim: OptimConfig,
    pub run: RunConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: tasks::task_model_config(),
            mixer: MixerConfig::default(),
            aia: AiaConfig::default(),
            optim: OptimConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        tasks::check_vocab(&self.model).map_err(|e| Error::Config(e.to_string()))?;
        self.mixer.validate()?;
        self.aia.loss_weight()?;
        for task in Task::ALL {
            self.aia.schedule(task)?;
        }
        let r = &self.run;
        if r.steps == 0 && r.warm_start.is_none() {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if r.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if r.eval_samples < 2 {
            return Err(Error::Config("intensity eval needs at least 2 samples".into()));
        }
        if r.regime == Regime::Post && r.warm_start.is_none() {
            return Err(Error::Config("the post regime needs a warm-start checkpoint".into()));
        }
        let o = &self.optim;
        // negated so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        if o.weight_decay < 0.0 || o.clip_norm < 0.0 {
            return Err(Error::Config("weight decay and clip norm must be non-negative".into()));
        }
        if self.aia.calibration_samples == 0 {
            return Err(Error::Config("calibration needs at least 1 sample".into()));
        }
        Ok(())
    }

    pub fn from_document(doc: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(doc).map_err(|e| Error::Config(format!("bad config document: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_document(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

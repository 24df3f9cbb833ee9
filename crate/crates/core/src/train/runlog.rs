use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Evaluation, TrainConfig};
use crate::error::Result;
use crate::model::{Checkpoint, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: Task,
    pub ntp: f64,
    pub aia: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub task: Task,
    pub ntp: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub scalar_std: f64,
    pub alignment_gap: f64,
    pub samples: usize,
}

impl EvalRecord {
    pub fn new(step: usize, e: &Evaluation, gap: f64) -> Self {
        Self {
            step,
            task: e.task,
            ntp: e.ntp,
            mean: e.profile.mean.values.clone(),
            std: e.profile.std.clone(),
            scalar_std: e.scalar_std,
            alignment_gap: gap,
            samples: e.profile.mean.samples,
        }
    }
}

/// Everything logged by one run. `wall_clock_secs` is kept in memory only so
/// the files a run writes stay byte-reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub lambda: f64,
    pub weight: String,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub wall_clock_secs: f64,
}

impl RunLog {
    /// Latest eval record for `task`.
    pub fn final_eval(&self, task: Task) -> Option<&EvalRecord> {
        self.evals.iter().rev().find(|e| e.task == task)
    }
}

/// Config snapshot written next to the run's outputs.
#[derive(Serialize)]
struct Snapshot<'a> {
    resolved_lambda: f64,
    #[serde(flatten)]
    config: &'a TrainConfig,
}

pub(super) struct RunWriter {
    dir: PathBuf,
    steps: BufWriter<File>,
    evals: BufWriter<File>,
}

impl RunWriter {
    pub(super) fn create(dir: &Path, cfg: &TrainConfig, lambda: f64) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let snapshot = Snapshot { resolved_lambda: lambda, config: cfg };
        let doc = toml::to_string(&snapshot).expect("config snapshot serializes");
        fs::write(dir.join("config.toml"), doc)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            steps: BufWriter::new(File::create(dir.join("runlog.jsonl"))?),
            evals: BufWriter::new(File::create(dir.join("evals.jsonl"))?),
        })
    }

    pub(super) fn step(&mut self, record: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.steps, record).map_err(std::io::Error::from)?;
        self.steps.write_all(b"\n")?;
        Ok(())
    }

    pub(super) fn eval(&mut self, step: usize, ckpt: &Checkpoint, evals: &[Evaluation], records: &[EvalRecord]) -> Result<()> {
        for (e, r) in evals.iter().zip(records) {
            fs::write(self.dir.join(format!("profile_step_{step}_{}.csv", e.task)), e.to_csv())?;
            serde_json::to_writer(&mut self.evals, r).map_err(std::io::Error::from)?;
            self.evals.write_all(b"\n")?;
        }
        self.steps.flush()?;
        self.evals.flush()?;
        ckpt.save(&self.dir.join(format!("step_{step}.aiac")))
    }

    pub(super) fn finish(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.steps.flush()?;
        self.evals.flush()?;
        ckpt.save(&self.dir.join("final.aiac"))
    }
}

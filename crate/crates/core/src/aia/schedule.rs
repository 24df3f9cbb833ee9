//! Stage-level target schedules.
//!
//! Each stage covers a half-open range of reference-depth layers and carries
//! a target intensity `T` and a Huber threshold `delta`. The builtin tables
//! are transcribed stage-for-stage; the last stage of each table is
//! open-ended (`hi = None`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Emu3,
    JanusPro,
    Custom,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Emu3 => "emu3",
            Provenance::JanusPro => "janus_pro",
            Provenance::Custom => "custom",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "emu3" => Ok(Provenance::Emu3),
            "janus_pro" | "januspro" | "janus" => Ok(Provenance::JanusPro),
            "custom" => Ok(Provenance::Custom),
            other => Err(Error::Schedule(format!("unknown provenance {other:?}"))),
        }
    }
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetStage {
    pub lo: usize,
    /// Exclusive upper bound; `None` extends to every deeper layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<usize>,
    #[serde(rename = "T")]
    pub target: f64,
    pub delta: f64,
}

impl TargetStage {
    fn contains(&self, layer: usize) -> bool {
        layer >= self.lo && self.hi.is_none_or(|hi| layer < hi)
    }
}

/// Target and threshold for one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerTarget {
    pub target: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSchedule {
    pub task: Task,
    pub provenance: Provenance,
    pub reference_depth: usize,
    pub stages: Vec<TargetStage>,
}

// (lo, hi, delta, T) rows; generation then understanding.
type Row = (usize, Option<usize>, f64, f64);

const EMU3_GENERATION: [Row; 5] = [
    (0, Some(10), 0.2, 0.4),
    (10, Some(20), 0.1, 0.4),
    (20, Some(25), 0.1, 0.4),
    (25, Some(31), 0.05, 0.2),
    (31, None, 0.05, 0.2),
];
const EMU3_UNDERSTANDING: [Row; 5] = [
    (0, Some(10), 0.05, 0.1),
    (10, Some(20), 0.05, 0.15),
    (20, Some(25), 0.05, 0.3),
    (25, Some(31), 0.05, 0.3),
    (31, None, 0.05, 0.2),
];
const JANUS_GENERATION: [Row; 5] = [
    (0, Some(10), 0.2, 0.4),
    (10, Some(20), 0.1, 0.4),
    (20, Some(25), 0.1, 0.4),
    (25, Some(30), 0.05, 0.2),
    (30, None, 0.05, 0.2),
];
const JANUS_UNDERSTANDING: [Row; 5] = [
    (0, Some(10), 0.05, 0.1),
    (10, Some(20), 0.05, 0.15),
    (20, Some(25), 0.05, 0.3),
    (25, Some(30), 0.05, 0.3),
    (30, None, 0.05, 0.2),
];

pub const EMU3_REFERENCE_DEPTH: usize = 32;
pub const JANUS_PRO_REFERENCE_DEPTH: usize = 30;

pub fn builtin_schedule(provenance: Provenance, task: Task) -> Result<TargetSchedule> {
    let (rows, reference_depth): (&[Row], usize) = match (provenance, task) {
        (Provenance::Emu3, Task::Generation) => (&EMU3_GENERATION, EMU3_REFERENCE_DEPTH),
        (Provenance::Emu3, Task::Understanding) => (&EMU3_UNDERSTANDING, EMU3_REFERENCE_DEPTH),
        (Provenance::JanusPro, Task::Generation) => (&JANUS_GENERATION, JANUS_PRO_REFERENCE_DEPTH),
        (Provenance::JanusPro, Task::Understanding) => (&JANUS_UNDERSTANDING, JANUS_PRO_REFERENCE_DEPTH),
        (Provenance::Custom, _) => {
            return Err(Error::Schedule("custom schedules have no builtin table".into()));
        }
    };
    let stages = rows.iter().map(|&(lo, hi, delta, target)| TargetStage { lo, hi, target, delta }).collect();
    Ok(TargetSchedule { task, provenance, reference_depth, stages })
}

impl TargetSchedule {
    /// Stages must start at 0, be contiguous and non-empty, and reach the
    /// reference depth; targets lie in `[0, 1]` and thresholds are positive.
    pub fn validate(&self) -> Result<()> {
        if self.reference_depth == 0 {
            return Err(Error::Schedule("reference depth must be positive".into()));
        }
        let first = self.stages.first().ok_or_else(|| Error::Schedule("schedule has no stages".into()))?;
        if first.lo != 0 {
            return Err(Error::Schedule("first stage must start at layer 0".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.target) {
                return Err(Error::Schedule(format!("stage {i}: target {} outside [0, 1]", s.target)));
            }
            if !(s.delta > 0.0 && s.delta.is_finite()) {
                return Err(Error::Schedule(format!("stage {i}: delta {} must be positive", s.delta)));
            }
            let next = self.stages.get(i + 1);
            match (s.hi, next) {
                (Some(hi), _) if hi <= s.lo => {
                    return Err(Error::Schedule(format!("stage {i}: empty range {}..{hi}", s.lo)));
                }
                (Some(hi), Some(n)) if hi != n.lo => {
                    return Err(Error::Schedule(format!("stage {i} ends at {hi} but stage {} starts at {}", i + 1, n.lo)));
                }
                (None, Some(_)) => {
                    return Err(Error::Schedule(format!("open-ended stage {i} is not last")));
                }
                (Some(hi), None) if hi < self.reference_depth => {
                    return Err(Error::Schedule(format!("stages stop at {hi}, before depth {}", self.reference_depth)));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Stage covering a reference-depth layer.
    pub fn lookup(&self, layer: usize) -> Result<LayerTarget> {
        let mut hits = self.stages.iter().filter(|s| s.contains(layer));
        match (hits.next(), hits.next()) {
            (Some(s), None) => Ok(LayerTarget { target: s.target, delta: s.delta }),
            (None, _) => Err(Error::Schedule(format!("no stage covers layer {layer}"))),
            (Some(_), Some(_)) => Err(Error::Schedule(format!("layer {layer} is covered twice"))),
        }
    }

    pub fn to_document(&self) -> String {
        toml::to_string(self).expect("schedule serializes")
    }

    pub fn from_document(doc: &str) -> Result<Self> {
        let s: Self = toml::from_str(doc).map_err(|e| Error::Schedule(format!("bad schedule document: {e}")))?;
        s.validate()?;
        Ok(s)
    }
}

/// Maps toy layer `l` to reference layer `floor(l · reference_depth / depth)`
/// and looks up its stage.
pub fn rescale_schedule(schedule: &TargetSchedule, depth: usize) -> Result<Vec<LayerTarget>> {
    if depth == 0 {
        return Err(Error::Schedule("model depth must be positive".into()));
    }
    (0..depth).map(|l| schedule.lookup(l * schedule.reference_depth / depth)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lt(delta: f64, target: f64) -> LayerTarget {
        LayerTarget { target, delta }
    }

    #[test]
    fn builtin_lookups() {
        let emu_gen = builtin_schedule(Provenance::Emu3, Task::Generation).unwrap();
        assert_eq!(emu_gen.lookup(5).unwrap(), lt(0.2, 0.4));
        assert_eq!(emu_gen.lookup(27).unwrap(), lt(0.05, 0.2));
        assert_eq!(emu_gen.lookup(30).unwrap(), lt(0.05, 0.2));
        let janus_und = builtin_schedule(Provenance::JanusPro, Task::Understanding).unwrap();
        assert_eq!(janus_und.lookup(22).unwrap(), lt(0.05, 0.3));
        assert_eq!(janus_und.lookup(29).unwrap(), lt(0.05, 0.3));
        assert_eq!(janus_und.lookup(30).unwrap(), lt(0.05, 0.2));
    }

    #[test]
    fn custom_has_no_builtin() {
        assert!(matches!(builtin_schedule(Provenance::Custom, Task::Generation), Err(Error::Schedule(_))));
        assert!("nonsense".parse::<Provenance>().is_err());
    }

    #[test]
    fn every_builtin_is_total_and_valid() {
        for p in [Provenance::Emu3, Provenance::JanusPro] {
            for t in Task::ALL {
                let s = builtin_schedule(p, t).unwrap();
                s.validate().unwrap();
                for l in 0..s.reference_depth + 8 {
                    s.lookup(l).unwrap();
                }
            }
        }
    }

    #[test]
    fn rescale_examples() {
        let s = builtin_schedule(Provenance::Emu3, Task::Generation).unwrap();
        let identity = rescale_schedule(&s, s.reference_depth).unwrap();
        for (l, t) in identity.iter().enumerate() {
            assert_eq!(*t, s.lookup(l).unwrap());
        }
        let eight = rescale_schedule(&s, 8).unwrap();
        assert_eq!(eight.len(), 8);
        assert_eq!(eight[3], lt(0.1, 0.4));
        let one = rescale_schedule(&s, 1).unwrap();
        assert_eq!(one, vec![lt(0.2, 0.4)]);
    }

    #[test]
    fn document_round_trip() {
        for p in [Provenance::Emu3, Provenance::JanusPro] {
            for t in Task::ALL {
                let s = builtin_schedule(p, t).unwrap();
                let back = TargetSchedule::from_document(&s.to_document()).unwrap();
                assert_eq!(back, s);
            }
        }
    }

    #[test]
    fn invalid_documents() {
        let mut s = builtin_schedule(Provenance::Emu3, Task::Generation).unwrap();
        s.stages[1].lo = 11;
        assert!(s.validate().is_err());
        let mut s = builtin_schedule(Provenance::Emu3, Task::Generation).unwrap();
        s.stages[0].delta = 0.0;
        assert!(s.validate().is_err());
        assert!(TargetSchedule::from_document("task = 3").is_err());
    }
}

//! `ATTD` attention dumps: per-sample attention probabilities exported by
//! this crate's model or by external producers.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! b"ATTD"                 magic
//! u32                     version: 1 = f32 probabilities, 2 = f64 probabilities
//! u32                     sample count
//! per sample:
//!   u32 L, u32 H, u32 Q, u32 K
//!   u8 * Q                modality codes (0 text, 1 image, 2 special, 3 pad)
//!   float * (L·H·Q·K)     probabilities, layer-major, then head, query, key
//! ```
//!
//! Rows of non-PAD queries must sum to one within [`ROW_SUM_TOLERANCE`].

use crate::error::{Error, Result};
use crate::intensity::{infer_task, ModalityRoles};
use crate::model::{AttentionRecord, Modality};
use crate::numerics::Tensor;

pub const DUMP_MAGIC: &[u8; 4] = b"ATTD";
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn version(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }
}

/// Decoded dump: one attention record per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub records: Vec<AttentionRecord>,
}

impl AttentionDump {
    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&precision.version().to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for rec in &self.records {
            let (l, h, q, k) = rec.dims();
            for d in [l, h, q, k] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend(rec.modality.iter().map(|m| m.code()));
            for v in rec.probs.iter().flatten().flat_map(|m| m.data()) {
                match precision {
                    Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    /// Decodes and validates a dump.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != DUMP_MAGIC {
            return Err(Error::Format("not an attention dump".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let precision = match r.u32()? {
            1 => Precision::F32,
            2 => Precision::F64,
            v => return Err(Error::Format(format!("unsupported attention dump version {v}"))),
        };
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for sample in 0..count {
            let (l, h, q, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            if l == 0 || h == 0 || q == 0 || q != k {
                return Err(Error::Format(format!("sample {sample}: bad dims ({l}, {h}, {q}, {k})")));
            }
            let modality = r
                .take(q)?
                .iter()
                .map(|&c| Modality::from_code(c))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Format(format!("sample {sample}: bad modality code")))?;
            let width = match precision {
                Precision::F32 => 4,
                Precision::F64 => 8,
            };
            let total = l.checked_mul(h).and_then(|x| x.checked_mul(q * k)).and_then(|x| x.checked_mul(width));
            let raw = r.take(total.ok_or_else(|| Error::Format("dims overflow".into()))?)?;
            let values: Vec<f64> = match precision {
                Precision::F32 => {
                    raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect()
                }
                Precision::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            let mut probs = Vec::with_capacity(l);
            for chunk in values.chunks_exact(h * q * k) {
                let heads = chunk.chunks_exact(q * k).map(|m| Tensor::new(vec![q, k], m.to_vec())).collect::<Result<_>>()?;
                probs.push(heads);
            }
            let rec = AttentionRecord::new(probs, modality)?;
            validate_record(&rec).map_err(|why| Error::Format(format!("sample {sample}: {why}")))?;
            records.push(rec);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { records })
    }

    /// Query/key roles of each record, with the task inferred from labels.
    pub fn roles(&self) -> Result<Vec<ModalityRoles>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                infer_task(&rec.modality)
                    .and_then(|task| ModalityRoles::from_labels(task, &rec.modality))
                    .map_err(|e| Error::Format(format!("sample {i}: {e}")))
            })
            .collect()
    }
}

fn validate_record(rec: &AttentionRecord) -> std::result::Result<(), String> {
    for (l, layer) in rec.probs.iter().enumerate() {
        for (h, m) in layer.iter().enumerate() {
            if m.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(format!("layer {l} head {h}: negative or non-finite probability"));
            }
            for q in 0..m.rows() {
                if rec.modality[q] == Modality::Pad {
                    continue;
                }
                let s: f64 = m.row(q).iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(format!("layer {l} head {h} row {q} sums to {s}"));
                }
            }
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated attention dump".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> AttentionRecord {
        let labels = vec![Modality::Text, Modality::Text, Modality::Image, Modality::Image];
        let m = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.25, 0.25, 0.5, 0.0],
            vec![0.2, 0.2, 0.3, 0.3],
        ]);
        AttentionRecord::new(vec![vec![m]], labels).unwrap()
    }

    #[test]
    fn round_trip_both_precisions() {
        let dump = AttentionDump { records: vec![record(), record()] };
        for p in [Precision::F32, Precision::F64] {
            let back = AttentionDump::from_bytes(&dump.to_bytes(p)).unwrap();
            assert_eq!(back.records.len(), 2);
            if p == Precision::F64 {
                assert_eq!(back, dump);
            }
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let err = AttentionDump::from_bytes(b"NOPE\x01\x00\x00\x00").unwrap_err();
        assert!(err.to_string().contains("not an attention dump"));
        let bytes = AttentionDump { records: vec![record()] }.to_bytes(Precision::F32);
        let err = AttentionDump::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn row_sum_violation_names_the_sample() {
        let mut bad = record();
        bad.probs[0][0].data_mut()[0] = 0.9;
        let bytes = AttentionDump { records: vec![record(), bad] }.to_bytes(Precision::F32);
        let err = AttentionDump::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("sample 1"), "{err}");
    }

    #[test]
    fn roles_inferred_from_labels() {
        let dump = AttentionDump { records: vec![record()] };
        let roles = dump.roles().unwrap();
        assert_eq!(roles[0].task, crate::model::Task::Generation);
        assert_eq!(roles[0].query_positions(), vec![2, 3]);
    }
}

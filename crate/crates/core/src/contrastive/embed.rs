//! Frozen-encoder embeddings and the "EMB1" cache format.
//!
//! Layout (little-endian): magic `EMB1`, u32 version, u32 dim, u64 count,
//! then per entry u64 record id, u16 cohort id, f32 age (NaN if unknown),
//! u8 sex, and `dim` f32 values.

use std::path::Path;

use super::pretrain::PreparedSet;
use crate::datamodel::{Sex, Store};
use crate::error::{Error, Result};
use crate::nn::{embed_batch, EncoderConfig, EncoderParams};
use crate::signal::{LeadMatrix, PreprocessConfig};

const MAGIC: &[u8; 4] = b"EMB1";
const VERSION: u32 = 1;
const EMBED_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingEntry {
    pub record_id: u64,
    pub cohort_id: u16,
    pub age: Option<f32>,
    pub sex: Sex,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub entries: Vec<EmbeddingEntry>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn features(&self) -> Vec<Vec<f32>> {
        self.entries.iter().map(|e| e.values.clone()).collect()
    }

    pub fn cohort_ids(&self) -> Vec<u16> {
        self.entries.iter().map(|e| e.cohort_id).collect()
    }

    pub fn select(&self, keep: impl Fn(&EmbeddingEntry) -> bool) -> EmbeddingSet {
        EmbeddingSet {
            dim: self.dim,
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }
}

/// Evaluation-mode embeddings of `record_ids`, in the order given.
pub fn embed_prepared(
    enc_cfg: &EncoderConfig,
    params: &EncoderParams<f32>,
    data: &PreparedSet,
    record_ids: &[u64],
) -> Result<EmbeddingSet> {
    let metas: std::collections::HashMap<u64, _> =
        data.metas.iter().map(|m| (m.record_id, m)).collect();
    let mut entries = Vec::with_capacity(record_ids.len());
    let mut missing = 0usize;
    let present: Vec<u64> = record_ids
        .iter()
        .copied()
        .filter(|id| {
            let ok = data.windows.contains_key(id);
            if !ok {
                missing += 1;
            }
            ok
        })
        .collect();
    if missing > 0 {
        log::warn!("{missing} requested records were not preprocessed and are skipped");
    }
    for chunk in present.chunks(EMBED_BATCH) {
        let windows: Vec<&LeadMatrix> = chunk.iter().map(|id| &data.windows[id]).collect();
        let n_time = windows[0].n_time();
        let refs: Vec<&[f32]> = windows.iter().map(|w| w.as_lead_major()).collect();
        let values = embed_batch(enc_cfg, params, &refs, n_time)?;
        for (id, v) in chunk.iter().zip(values) {
            let m = metas[id];
            entries.push(EmbeddingEntry {
                record_id: *id,
                cohort_id: m.cohort_id,
                age: m.age,
                sex: m.sex,
                values: v,
            });
        }
    }
    Ok(EmbeddingSet {
        dim: enc_cfg.embedding_dim,
        entries,
    })
}

/// Loads a checkpoint and embeds the listed records of `store`.
pub fn embed(
    checkpoint: &Path,
    enc_cfg: &EncoderConfig,
    store: &Store,
    record_ids: &[u64],
    pre: &PreprocessConfig,
) -> Result<EmbeddingSet> {
    let params = EncoderParams::load(checkpoint, enc_cfg)?;
    let wanted: std::collections::HashSet<u64> = record_ids.iter().copied().collect();
    let data = super::prepare(store, pre, |m| wanted.contains(&m.record_id))?;
    if data.skipped > 0 {
        log::warn!("{} records too short to embed", data.skipped);
    }
    embed_prepared(enc_cfg, &params, &data, record_ids)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(20 + set.len() * (15 + 4 * set.dim));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.dim as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for e in &set.entries {
        if e.values.len() != set.dim {
            return Err(Error::Shape(format!("embedding of record {}", e.record_id)));
        }
        out.extend_from_slice(&e.record_id.to_le_bytes());
        out.extend_from_slice(&e.cohort_id.to_le_bytes());
        out.extend_from_slice(&e.age.unwrap_or(f32::NAN).to_le_bytes());
        out.push(e.sex.to_byte());
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = || Error::Truncated(format!("embedding cache {}", path.display()));
    if bytes.len() < 20 {
        return Err(truncated());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: *MAGIC,
            found: bytes[..4].try_into().unwrap(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let dim = u32_at(8) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let entry_len = 15 + 4 * dim;
    if count.checked_mul(entry_len).map(|n| n + 20) != Some(bytes.len()) {
        return Err(truncated());
    }
    let entries = bytes[20..]
        .chunks_exact(entry_len)
        .map(|c| {
            let age = f32::from_le_bytes(c[10..14].try_into().unwrap());
            EmbeddingEntry {
                record_id: u64::from_le_bytes(c[..8].try_into().unwrap()),
                cohort_id: u16::from_le_bytes(c[8..10].try_into().unwrap()),
                age: (!age.is_nan()).then_some(age),
                sex: Sex::from_byte(c[14]).unwrap_or(Sex::Unknown),
                values: c[15..]
                    .chunks_exact(4)
                    .map(|v| f32::from_le_bytes(v.try_into().unwrap()))
                    .collect(),
            }
        })
        .collect();
    Ok(EmbeddingSet { dim, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip() {
        let set = EmbeddingSet {
            dim: 3,
            entries: vec![
                EmbeddingEntry {
                    record_id: 7,
                    cohort_id: 2,
                    age: Some(61.5),
                    sex: Sex::Female,
                    values: vec![0.1, -0.2, 3.0],
                },
                EmbeddingEntry {
                    record_id: 9,
                    cohort_id: 0,
                    age: None,
                    sex: Sex::Unknown,
                    values: vec![0.0, 1.0, 2.0],
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.emb");
        write_embeddings(&set, &p).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), set);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Truncated(_))));
    }
}

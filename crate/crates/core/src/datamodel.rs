//! ECG records, patient indexing, dataset splits and the ECGC container.
//!
//! ECGC v1 layout (little-endian):
//!
//! ```text
//! "ECGC" | version u32 = 1 | record_count u64 | offsets [u64; record_count] | records...
//! record: record_id u64 | patient_id u64 | cohort_id u16 | device_id u16 | age f32 (NaN = missing)
//!         | sex u8 (0 female, 1 male, 255 unknown) | sampling_rate f32 | n_leads u8
//!         | n_leads x (len u8, ASCII name) | n_samples u32 | samples f32, lead-major
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const ECGC_MAGIC: [u8; 4] = *b"ECGC";
pub const ECGC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

impl Sex {
    pub fn to_byte(self) -> u8 {
        match self {
            Sex::Female => 0,
            Sex::Male => 1,
            Sex::Unknown => 255,
        }
    }

    pub fn from_byte(b: u8) -> Option<Sex> {
        match b {
            0 => Some(Sex::Female),
            1 => Some(Sex::Male),
            255 => Some(Sex::Unknown),
            _ => None,
        }
    }

    /// Binary label used by the sex-classification task (male = 1).
    pub fn label(self) -> Option<bool> {
        match self {
            Sex::Female => Some(false),
            Sex::Male => Some(true),
            Sex::Unknown => None,
        }
    }
}

/// One raw multi-lead ECG.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: u64,
    pub patient_id: u64,
    pub cohort_id: u16,
    pub device_id: u16,
    /// Years; `None` when missing.
    pub age: Option<f32>,
    pub sex: Sex,
    pub sampling_rate: f32,
    pub leads: Vec<String>,
    /// One sample vector per lead, in millivolts.
    pub samples: Vec<Vec<f32>>,
}

impl EcgRecord {
    pub fn n_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn lead(&self, name: &str) -> Option<&[f32]> {
        self.leads
            .iter()
            .position(|l| l == name)
            .map(|i| self.samples[i].as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord {
            record_id: self.record_id,
            reason,
        };
        if self.leads.is_empty() {
            return Err(bad("no leads".into()));
        }
        if self.leads.len() > u8::MAX as usize {
            return Err(bad(format!("{} leads exceed the format limit", self.leads.len())));
        }
        let mut seen = HashSet::new();
        for name in &self.leads {
            if !seen.insert(name.as_str()) {
                return Err(bad(format!("duplicate lead {name}")));
            }
            if !name.is_ascii() || name.is_empty() || name.len() > u8::MAX as usize {
                return Err(bad(format!("lead name {name:?} is not short ASCII")));
            }
        }
        if self.samples.len() != self.leads.len() {
            return Err(bad(format!(
                "{} sample rows for {} leads",
                self.samples.len(),
                self.leads.len()
            )));
        }
        let n = self.n_samples();
        if n == 0 {
            return Err(bad("no samples".into()));
        }
        if n > u32::MAX as usize {
            return Err(bad("too many samples".into()));
        }
        if self.samples.iter().any(|row| row.len() != n) {
            return Err(bad("ragged sample rows".into()));
        }
        if !(self.sampling_rate.is_finite() && self.sampling_rate > 0.0) {
            return Err(bad(format!("sampling rate {}", self.sampling_rate)));
        }
        if self.samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(bad("non-finite sample".into()));
        }
        if let Some(a) = self.age {
            if !a.is_finite() {
                return Err(bad("non-finite age".into()));
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> RecordMeta {
        RecordMeta {
            record_id: self.record_id,
            patient_id: self.patient_id,
            cohort_id: self.cohort_id,
            device_id: self.device_id,
            age: self.age,
            sex: self.sex,
        }
    }
}

/// Header fields of a record, available without decoding the waveform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordMeta {
    pub record_id: u64,
    pub patient_id: u64,
    pub cohort_id: u16,
    pub device_id: u16,
    pub age: Option<f32>,
    pub sex: Sex,
}

fn encode_record(rec: &EcgRecord, out: &mut Vec<u8>) {
    out.extend_from_slice(&rec.record_id.to_le_bytes());
    out.extend_from_slice(&rec.patient_id.to_le_bytes());
    out.extend_from_slice(&rec.cohort_id.to_le_bytes());
    out.extend_from_slice(&rec.device_id.to_le_bytes());
    out.extend_from_slice(&rec.age.unwrap_or(f32::NAN).to_le_bytes());
    out.push(rec.sex.to_byte());
    out.extend_from_slice(&rec.sampling_rate.to_le_bytes());
    out.push(rec.leads.len() as u8);
    for name in &rec.leads {
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
    }
    out.extend_from_slice(&(rec.n_samples() as u32).to_le_bytes());
    for row in &rec.samples {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Writes `records` to an ECGC v1 container, in insertion order.
pub fn write_store(records: &[EcgRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for rec in records {
        rec.validate()?;
    }
    let mut body = Vec::new();
    let header_len = 4 + 4 + 8 + 8 * records.len();
    let mut offsets = Vec::with_capacity(records.len());
    for rec in records {
        offsets.push((header_len + body.len()) as u64);
        encode_record(rec, &mut body);
    }
    let mut buf = Vec::with_capacity(header_len + body.len());
    buf.extend_from_slice(&ECGC_MAGIC);
    buf.extend_from_slice(&ECGC_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for off in offsets {
        buf.extend_from_slice(&off.to_le_bytes());
    }
    buf.extend_from_slice(&body);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode_meta(cur: &mut Cursor<'_>) -> Result<RecordMeta> {
    let record_id = cur.u64("record_id")?;
    let patient_id = cur.u64("patient_id")?;
    let cohort_id = cur.u16("cohort_id")?;
    let device_id = cur.u16("device_id")?;
    let age = cur.f32("age")?;
    let sex_byte = cur.u8("sex")?;
    let sex = Sex::from_byte(sex_byte).ok_or_else(|| Error::InvalidRecord {
        record_id,
        reason: format!("sex code {sex_byte}"),
    })?;
    Ok(RecordMeta {
        record_id,
        patient_id,
        cohort_id,
        device_id,
        age: if age.is_nan() { None } else { Some(age) },
        sex,
    })
}

fn decode_record(buf: &[u8], offset: usize) -> Result<EcgRecord> {
    let mut cur = Cursor { buf, pos: offset };
    let meta = decode_meta(&mut cur)?;
    let sampling_rate = cur.f32("sampling_rate")?;
    let n_leads = cur.u8("n_leads")? as usize;
    let mut leads = Vec::with_capacity(n_leads);
    for _ in 0..n_leads {
        let len = cur.u8("lead name length")? as usize;
        let raw = cur.take(len, "lead name")?;
        let name = std::str::from_utf8(raw)
            .ok()
            .filter(|s| s.is_ascii())
            .ok_or_else(|| Error::InvalidRecord {
                record_id: meta.record_id,
                reason: "non-ASCII lead name".into(),
            })?;
        leads.push(name.to_string());
    }
    let n_samples = cur.u32("n_samples")? as usize;
    let raw = cur.take(n_leads * n_samples * 4, "samples")?;
    let mut samples = Vec::with_capacity(n_leads);
    for l in 0..n_leads {
        let row = raw[l * n_samples * 4..(l + 1) * n_samples * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(row);
    }
    let rec = EcgRecord {
        record_id: meta.record_id,
        patient_id: meta.patient_id,
        cohort_id: meta.cohort_id,
        device_id: meta.device_id,
        age: meta.age,
        sex: meta.sex,
        sampling_rate,
        leads,
        samples,
    };
    rec.validate()?;
    Ok(rec)
}

/// A read-only ECGC container held in memory with its record index.
#[derive(Debug, Clone)]
pub struct Store {
    path: PathBuf,
    bytes: Vec<u8>,
    offsets: Vec<u64>,
    metas: Vec<RecordMeta>,
}

/// Opens and indexes an ECGC container.
pub fn open_store(path: impl AsRef<Path>) -> Result<Store> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        buf: &bytes,
        pos: 0,
    };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if magic != ECGC_MAGIC {
        return Err(Error::BadMagic {
            expected: ECGC_MAGIC,
            found: magic,
        });
    }
    let version = cur.u32("version")?;
    if version != ECGC_VERSION {
        return Err(Error::VersionMismatch {
            expected: ECGC_VERSION,
            found: version,
        });
    }
    let count = cur.u64("record count")?;
    let index_len = count
        .checked_mul(8)
        .filter(|&n| n <= (bytes.len() - cur.pos) as u64)
        .ok_or_else(|| Error::Truncated(format!("index of {count} offsets")))?;
    let mut offsets = Vec::with_capacity(count as usize);
    for _ in 0..count {
        offsets.push(cur.u64("index")?);
    }
    let data_start = cur.pos as u64;
    debug_assert_eq!(data_start, 16 + index_len);
    let mut metas = Vec::with_capacity(offsets.len());
    for &off in &offsets {
        if off < data_start || off >= bytes.len() as u64 {
            return Err(Error::Truncated(format!("record offset {off} out of bounds")));
        }
        let mut rc = Cursor {
            buf: &bytes,
            pos: off as usize,
        };
        metas.push(decode_meta(&mut rc)?);
    }
    Ok(Store {
        path: path.to_path_buf(),
        bytes,
        offsets,
        metas,
    })
}

impl Store {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn metas(&self) -> &[RecordMeta] {
        &self.metas
    }

    /// Decodes the record at position `i` (insertion order).
    pub fn get(&self, i: usize) -> Result<EcgRecord> {
        let off = *self
            .offsets
            .get(i)
            .ok_or_else(|| Error::OutOfRange(format!("record index {i}")))?;
        decode_record(&self.bytes, off as usize)
    }

    pub fn position(&self, record_id: u64) -> Option<usize> {
        self.metas.iter().position(|m| m.record_id == record_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<EcgRecord>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn records(&self) -> Result<Vec<EcgRecord>> {
        self.iter().collect()
    }
}

/// Patient → sorted record ids, plus the patient's cohort.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatientIndex {
    pub patients: BTreeMap<u64, PatientEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientEntry {
    pub cohort_id: u16,
    pub record_ids: Vec<u64>,
}

impl PatientIndex {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn n_records(&self) -> usize {
        self.patients.values().map(|p| p.record_ids.len()).sum()
    }

    /// Merges indices from several stores; a patient must not appear twice.
    pub fn merge(indices: impl IntoIterator<Item = PatientIndex>) -> Result<PatientIndex> {
        let mut out = PatientIndex::default();
        for idx in indices {
            for (pid, entry) in idx.patients {
                if let Some(prev) = out.patients.get_mut(&pid) {
                    if prev.cohort_id != entry.cohort_id {
                        return Err(Error::InconsistentCohort {
                            patient_id: pid,
                            first: prev.cohort_id,
                            second: entry.cohort_id,
                        });
                    }
                    prev.record_ids.extend(entry.record_ids);
                    prev.record_ids.sort_unstable();
                } else {
                    out.patients.insert(pid, entry);
                }
            }
        }
        Ok(out)
    }
}

/// Groups records by patient. With `multi_ecg_only`, patients with a single
/// record are dropped.
pub fn build_patient_index(store: &Store, multi_ecg_only: bool) -> Result<PatientIndex> {
    build_patient_index_from(store.metas().iter(), multi_ecg_only)
}

/// Same as [`build_patient_index`] over any collection of record headers.
pub fn build_patient_index_from<'a>(
    metas: impl IntoIterator<Item = &'a RecordMeta>,
    multi_ecg_only: bool,
) -> Result<PatientIndex> {
    let mut patients: BTreeMap<u64, PatientEntry> = BTreeMap::new();
    for m in metas {
        let entry = patients.entry(m.patient_id).or_insert_with(|| PatientEntry {
            cohort_id: m.cohort_id,
            record_ids: Vec::new(),
        });
        if entry.cohort_id != m.cohort_id {
            return Err(Error::InconsistentCohort {
                patient_id: m.patient_id,
                first: entry.cohort_id,
                second: m.cohort_id,
            });
        }
        entry.record_ids.push(m.record_id);
    }
    for e in patients.values_mut() {
        e.record_ids.sort_unstable();
    }
    if multi_ecg_only {
        patients.retain(|_, e| e.record_ids.len() >= 2);
    }
    Ok(PatientIndex { patients })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    Record,
    Patient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SplitSizes {
    Counts { train: usize, val: usize, test: usize },
    Fractions { train: f64, val: f64, test: f64 },
}

/// How to partition a store. With `unit = patient`, sizes count patients
/// and every record of a patient lands in the same part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub unit: SplitUnit,
    pub seed: u64,
}

impl SplitSpec {
    pub fn counts(train: usize, val: usize, test: usize, seed: u64) -> Self {
        SplitSpec {
            sizes: SplitSizes::Counts { train, val, test },
            unit: SplitUnit::Record,
            seed,
        }
    }

    pub fn fractions(train: f64, val: f64, test: f64, seed: u64) -> Self {
        SplitSpec {
            sizes: SplitSizes::Fractions { train, val, test },
            unit: SplitUnit::Record,
            seed,
        }
    }

    pub fn with_unit(mut self, unit: SplitUnit) -> Self {
        self.unit = unit;
        self
    }

    fn resolve(&self, total: usize) -> Result<[usize; 3]> {
        match self.sizes {
            SplitSizes::Counts { train, val, test } => {
                if train == 0 || val == 0 || test == 0 {
                    return Err(Error::InfeasibleSplit("sizes must be positive".into()));
                }
                if train + val + test > total {
                    return Err(Error::InfeasibleSplit(format!(
                        "{train}+{val}+{test} exceeds {total} units"
                    )));
                }
                Ok([train, val, test])
            }
            SplitSizes::Fractions { train, val, test } => {
                if [train, val, test].iter().any(|f| !(f.is_finite() && *f > 0.0)) {
                    return Err(Error::InfeasibleSplit("fractions must be positive".into()));
                }
                if train + val + test > 1.0 + 1e-9 {
                    return Err(Error::InfeasibleSplit("fractions sum above 1".into()));
                }
                // The small nudge keeps e.g. 0.1 * 100 from flooring to 9.
                let n = |f: f64| ((f * total as f64) + 1e-9).floor() as usize;
                let sizes = [n(train), n(val), n(test)];
                if sizes.iter().any(|&s| s == 0) {
                    return Err(Error::InfeasibleSplit(format!(
                        "fractions give an empty part of {total} units"
                    )));
                }
                Ok(sizes)
            }
        }
    }
}

/// Three disjoint record-id sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl Splits {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

pub fn make_splits(store: &Store, spec: &SplitSpec) -> Result<Splits> {
    make_splits_among(store.metas(), spec, |_| true)
}

/// Splits the records passing `keep` (e.g. records with a known age).
pub fn make_splits_among(
    metas: &[RecordMeta],
    spec: &SplitSpec,
    keep: impl Fn(&RecordMeta) -> bool,
) -> Result<Splits> {
    let kept: Vec<&RecordMeta> = metas.iter().filter(|m| keep(m)).collect();
    if kept.is_empty() {
        return Err(Error::Empty("no records to split".into()));
    }
    // Units are groups of record ids: singletons, or all records of a patient.
    let mut units: Vec<Vec<u64>> = match spec.unit {
        SplitUnit::Record => {
            let mut ids: Vec<u64> = kept.iter().map(|m| m.record_id).collect();
            ids.sort_unstable();
            ids.into_iter().map(|id| vec![id]).collect()
        }
        SplitUnit::Patient => {
            let mut by_patient: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
            for m in &kept {
                by_patient.entry(m.patient_id).or_default().push(m.record_id);
            }
            by_patient.into_values().collect()
        }
    };
    let [n_train, n_val, n_test] = spec.resolve(units.len())?;
    let mut rng = rng::stream(&[spec.seed, 0x5EED_5B17]);
    units.shuffle(&mut rng);
    let collect = |part: &[Vec<u64>]| {
        let mut ids: Vec<u64> = part.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids
    };
    Ok(Splits {
        train: collect(&units[..n_train]),
        val: collect(&units[n_train..n_train + n_val]),
        test: collect(&units[n_train + n_val..n_train + n_val + n_test]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn record(record_id: u64, patient_id: u64, cohort_id: u16) -> EcgRecord {
        EcgRecord {
            record_id,
            patient_id,
            cohort_id,
            device_id: cohort_id,
            age: Some(40.0 + record_id as f32),
            sex: if record_id % 2 == 0 { Sex::Female } else { Sex::Male },
            sampling_rate: 500.0,
            leads: vec!["I".into(), "II".into()],
            samples: vec![
                (0..16).map(|i| i as f32 * 0.1 + record_id as f32).collect(),
                (0..16).map(|i| -(i as f32) * 0.37).collect(),
            ],
        }
    }

    fn metas(n: u64) -> Vec<RecordMeta> {
        (0..n).map(|i| record(i, i / 2, 0).meta()).collect()
    }

    #[test]
    fn round_trip_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ecgc");
        let mut recs = vec![record(1, 10, 0), record(2, 10, 0), record(3, 11, 1)];
        recs[2].age = None;
        recs[2].sex = Sex::Unknown;
        write_store(&recs, &path).unwrap();
        let store = open_store(&path).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.records().unwrap(), recs);
    }

    #[test]
    fn empty_container_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ecgc");
        write_store(&[], &path).unwrap();
        assert_eq!(open_store(&path).unwrap().len(), 0);
    }

    #[test]
    fn bad_magic_and_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ecgc");
        write_store(&[record(1, 1, 0), record(2, 1, 0), record(3, 2, 0)], &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        fs::write(&path, &bad).unwrap();
        assert!(matches!(open_store(&path), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(open_store(&path), Err(Error::VersionMismatch { found: 2, .. })));

        // Cut in the middle of the offset index.
        fs::write(&path, &good[..16 + 12]).unwrap();
        assert!(matches!(open_store(&path), Err(Error::Truncated(_))));

        assert!(matches!(
            open_store(dir.path().join("missing.ecgc")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn nan_sample_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = record(1, 1, 0);
        r.samples[1][3] = f32::NAN;
        assert!(matches!(
            write_store(&[r], dir.path().join("n.ecgc")),
            Err(Error::InvalidRecord { record_id: 1, .. })
        ));
    }

    #[test]
    fn duplicate_leads_rejected() {
        let mut r = record(1, 1, 0);
        r.leads[1] = "I".into();
        assert!(r.validate().is_err());
    }

    #[test]
    fn patient_index_multi_ecg_filter() {
        // A has two ECGs, B has one.
        let m = vec![record(1, 100, 0).meta(), record(2, 100, 0).meta(), record(3, 200, 0).meta()];
        let multi = build_patient_index_from(&m, true).unwrap();
        assert_eq!(multi.patients.keys().copied().collect::<Vec<_>>(), vec![100]);
        let all = build_patient_index_from(&m, false).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all.n_records(), 3);
        assert_eq!(all.patients[&100].record_ids, vec![1, 2]);
    }

    #[test]
    fn patient_across_cohorts_is_an_error() {
        let m = vec![record(1, 7, 0).meta(), record(2, 7, 1).meta()];
        assert!(matches!(
            build_patient_index_from(&m, false),
            Err(Error::InconsistentCohort { patient_id: 7, .. })
        ));
    }

    #[test]
    fn count_splits_are_exact() {
        let m = metas(14_000);
        let s = make_splits_among(&m, &SplitSpec::counts(10_000, 2_000, 2_000, 3), |_| true).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (10_000, 2_000, 2_000));
    }

    #[test]
    fn fraction_splits_round_down() {
        let m = metas(100);
        let s = make_splits_among(&m, &SplitSpec::fractions(0.5, 0.1, 0.4, 3), |_| true).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (50, 10, 40));
        let m = metas(7);
        let s = make_splits_among(&m, &SplitSpec::fractions(0.5, 0.2, 0.3, 3), |_| true).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3, 1, 2));
    }

    #[test]
    fn infeasible_and_empty_splits() {
        let m = metas(10);
        assert!(matches!(
            make_splits_among(&m, &SplitSpec::counts(8, 2, 1, 0), |_| true),
            Err(Error::InfeasibleSplit(_))
        ));
        assert!(matches!(
            make_splits_among(&m, &SplitSpec::counts(1, 1, 1, 0), |_| false),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn patient_unit_keeps_patients_together() {
        let m = metas(60);
        let s = make_splits_among(
            &m,
            &SplitSpec::counts(10, 5, 5, 9).with_unit(SplitUnit::Patient),
            |_| true,
        )
        .unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (20, 10, 10));
        let patient_of = |id: u64| id / 2;
        let train_p: HashSet<u64> = s.train.iter().map(|&i| patient_of(i)).collect();
        assert!(s.test.iter().chain(&s.val).all(|&i| !train_p.contains(&patient_of(i))));
    }

    proptest! {
        #[test]
        fn splits_deterministic_and_disjoint(n in 3u64..400, a in 1usize..50, b in 1usize..50, c in 1usize..50, seed: u64) {
            let m = metas(n);
            let spec = SplitSpec::counts(a, b, c, seed);
            match make_splits_among(&m, &spec, |_| true) {
                Ok(s) => {
                    let again = make_splits_among(&m, &spec, |_| true).unwrap();
                    prop_assert_eq!(&s, &again);
                    let all: HashSet<u64> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
                    prop_assert_eq!(all.len(), s.total());
                    prop_assert_eq!(s.total(), a + b + c);
                }
                Err(_) => prop_assert!(a + b + c > n as usize),
            }
        }

        #[test]
        fn patient_index_partitions_records(pids in proptest::collection::vec(0u64..20, 1..100)) {
            let m: Vec<RecordMeta> = pids.iter().enumerate().map(|(i, &p)| record(i as u64, p, 0).meta()).collect();
            let idx = build_patient_index_from(&m, false).unwrap();
            prop_assert_eq!(idx.n_records(), m.len());
            let multi = build_patient_index_from(&m, true).unwrap();
            prop_assert!(multi.patients.values().all(|e| e.record_ids.len() >= 2));
        }
    }
}

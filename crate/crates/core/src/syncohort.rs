//! Synthetic multi-cohort ECG generator.
//!
//! Beats are sums of Gaussian P, Q, R, S and T waves projected onto eight
//! leads through a fixed mixing matrix. Age drives heart rate and a few
//! morphology terms, sex drives QRS amplitude, and every patient carries a
//! per-lead gain signature so two records of one patient resemble each
//! other more than records of different patients. Acquisition hardware is
//! modelled as a cohort-constant [`DeviceArtifact`] applied after the
//! physiology. All mappings are synthetic; none claims clinical realism.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{open_store, write_store, EcgRecord, Sex, Store};
use crate::error::{Error, Result};
use crate::rng;
use crate::signal::default_leads;

pub const N_WAVES: usize = 5;
pub const N_LEADS: usize = 8;

/// Lead weights for the P, Q, R, S, T waves; rows follow I, II, V1-V6.
const LEAD_MIX: [[f64; N_WAVES]; N_LEADS] = [
    [0.8, 0.6, 0.7, 0.4, 0.6],
    [1.0, 0.8, 1.0, 0.6, 0.8],
    [0.5, 0.0, 0.25, 2.2, 0.2],
    [0.6, 0.2, 0.5, 2.6, 1.0],
    [0.6, 0.5, 0.9, 1.6, 1.1],
    [0.6, 0.7, 1.4, 1.0, 1.0],
    [0.6, 0.8, 1.3, 0.6, 0.8],
    [0.6, 0.8, 1.0, 0.4, 0.6],
];

/// Gaussian wave: amplitude (mV), width (s) and offset from the R peak (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub width: f64,
    pub offset: f64,
}

pub fn baseline_waves() -> [Wave; N_WAVES] {
    let w = |amplitude, width, offset| Wave {
        amplitude,
        width,
        offset,
    };
    [
        w(0.15, 0.025, -0.20),
        w(-0.12, 0.010, -0.030),
        w(1.10, 0.012, 0.0),
        w(-0.25, 0.012, 0.030),
        w(0.30, 0.050, 0.280),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineWander {
    pub amplitude: f64,
    pub frequency: f64,
}

/// Acquisition-hardware signature shared by every record in a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceArtifact {
    pub gain: f64,
    pub baseline_wander: BaselineWander,
    /// Amplitude (mV) of the powerline sinusoid.
    pub mains_leakage: f64,
    pub mains_hz: f64,
    /// Single-pole low-pass knee (Hz); at or above Nyquist disables it.
    pub lowpass_knee: f64,
    /// Quantization step (mV); zero disables it.
    pub quantization_step: f64,
}

impl DeviceArtifact {
    pub fn clean(mains_hz: f64) -> Self {
        DeviceArtifact {
            gain: 1.0,
            baseline_wander: BaselineWander {
                amplitude: 0.0,
                frequency: 0.3,
            },
            mains_leakage: 0.0,
            mains_hz,
            lowpass_knee: f64::INFINITY,
            quantization_step: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.gain > 0.0
            && self.baseline_wander.amplitude >= 0.0
            && self.baseline_wander.frequency >= 0.0
            && self.mains_leakage >= 0.0
            && self.mains_hz > 0.0
            && self.lowpass_knee > 0.0
            && self.quantization_step >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid device artifact {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgeDistribution {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

/// Explicit, configurable physiology mappings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Physiology {
    /// Heart rate (bpm) at age 40.
    pub hr_at_40: f64,
    /// Heart-rate change per year of age.
    pub hr_slope: f64,
    /// Between-patient heart-rate spread (bpm).
    pub hr_sd: f64,
    /// Relative QRS widening per year above 50.
    pub qrs_width_per_year: f64,
    /// Relative T-wave amplitude change per year above 50.
    pub t_amp_per_year: f64,
    /// Relative Q/R/S amplitude offset for male patients.
    pub male_qrs_gain: f64,
    /// Spread of the per-lead patient signature gains.
    pub signature_sd: f64,
    /// Relative template jitter at `health_severity = 1`.
    pub jitter_at_full_severity: f64,
    /// Record-to-record relative amplitude variation within a patient.
    pub record_variation: f64,
    /// White measurement noise (mV).
    pub noise_sd: f64,
}

impl Default for Physiology {
    fn default() -> Self {
        Physiology {
            hr_at_40: 80.0,
            hr_slope: -0.3,
            hr_sd: 3.0,
            qrs_width_per_year: 0.004,
            t_amp_per_year: -0.006,
            male_qrs_gain: 0.25,
            signature_sd: 0.15,
            jitter_at_full_severity: 0.4,
            record_variation: 0.03,
            noise_sd: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    pub min: u32,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub cohort_id: u16,
    pub name: String,
    pub device_id: u16,
    pub n_patients: usize,
    pub ecgs_per_patient: CountRange,
    pub age: AgeDistribution,
    pub female_fraction: f64,
    /// Morphology variability in [0, 1].
    pub health_severity: f64,
    pub device: DeviceArtifact,
    pub sampling_rate: f64,
    /// Seconds per record.
    pub duration: f64,
    #[serde(default)]
    pub physiology: Physiology,
    pub seed: u64,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("cohort {}: {m}", self.name)));
        if self.n_patients == 0 {
            return bad("n_patients must be >= 1".into());
        }
        if self.ecgs_per_patient.min == 0 || self.ecgs_per_patient.min > self.ecgs_per_patient.max {
            return bad("ecgs_per_patient must satisfy 1 <= min <= max".into());
        }
        let a = &self.age;
        if !(18.0 <= a.min && a.min <= a.max && a.max <= 100.0 && a.sd >= 0.0) {
            return bad("age clip range must lie within [18, 100]".into());
        }
        if !(0.0..=1.0).contains(&self.health_severity) {
            return bad("health_severity outside [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.female_fraction) {
            return bad("female_fraction outside [0, 1]".into());
        }
        if !(self.sampling_rate > 0.0 && self.duration > 0.0) {
            return bad("rate and duration must be positive".into());
        }
        self.device.validate()
    }

    /// Template parameters for a patient before any random jitter.
    pub fn baseline_template(&self, age: f64, sex: Sex) -> [Wave; N_WAVES] {
        let p = &self.physiology;
        let mut waves = baseline_waves();
        let years = age - 50.0;
        for w in &mut waves[1..4] {
            w.width *= 1.0 + p.qrs_width_per_year * years;
            if sex == Sex::Male {
                w.amplitude *= 1.0 + p.male_qrs_gain;
            }
        }
        waves[4].amplitude *= (1.0 + p.t_amp_per_year * years).max(0.1);
        waves
    }
}

/// Per-patient latent physiology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientLatent {
    pub patient_id: u64,
    pub age: f64,
    pub sex: Sex,
    pub heart_rate: f64,
    pub waves: [Wave; N_WAVES],
    /// Per-lead gain multipliers.
    pub signature: [f64; N_LEADS],
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Normal::new(0.0, 1.0).unwrap().sample(rng)
}

pub fn sample_patient<R: Rng + ?Sized>(spec: &CohortSpec, patient_id: u64, rng: &mut R) -> PatientLatent {
    let a = &spec.age;
    let age = (a.mean + a.sd * std_normal(rng)).clamp(a.min, a.max);
    let sex = if rng.gen_bool(spec.female_fraction) {
        Sex::Female
    } else {
        Sex::Male
    };
    let p = &spec.physiology;
    let heart_rate =
        (p.hr_at_40 + p.hr_slope * (age - 40.0) + p.hr_sd * std_normal(rng)).clamp(40.0, 160.0);
    let mut waves = spec.baseline_template(age, sex);
    let jitter = spec.health_severity * p.jitter_at_full_severity;
    for w in &mut waves {
        let (da, dw, doff) = (std_normal(rng), std_normal(rng), std_normal(rng));
        if jitter > 0.0 {
            w.amplitude *= 1.0 + jitter * da;
            w.width *= (1.0 + 0.5 * jitter * dw).max(0.3);
            w.offset += 0.1 * jitter * doff * w.width.max(0.01);
        }
    }
    let mut signature = [1.0; N_LEADS];
    for s in &mut signature {
        *s = (1.0 + p.signature_sd * std_normal(rng)).max(0.2);
    }
    PatientLatent {
        patient_id,
        age,
        sex,
        heart_rate,
        waves,
        signature,
    }
}

/// A record's realized template: the patient's waves and signature with
/// record-level variation applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordTemplate {
    pub waves: [Wave; N_WAVES],
    pub signature: [f64; N_LEADS],
}

impl RecordTemplate {
    /// Flattened parameter vector for distance comparisons.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * N_WAVES + N_LEADS);
        for w in &self.waves {
            v.extend([w.amplitude, w.width * 10.0, w.offset]);
        }
        v.extend_from_slice(&self.signature);
        v
    }
}

/// Samples one record's physiology (no device artifact), returning the
/// lead signals and the realized template.
pub fn synth_physiology<R: Rng + ?Sized>(
    latent: &PatientLatent,
    spec: &CohortSpec,
    rng: &mut R,
) -> (Vec<Vec<f64>>, RecordTemplate) {
    let p = &spec.physiology;
    let fs = spec.sampling_rate;
    let n = (spec.duration * fs).round() as usize;
    let mut waves = latent.waves;
    for w in &mut waves {
        w.amplitude *= 1.0 + p.record_variation * std_normal(rng);
    }
    let mut signature = latent.signature;
    for s in &mut signature {
        *s *= 1.0 + p.record_variation * std_normal(rng);
    }
    let rr = 60.0 / latent.heart_rate;
    // QT stretches with the square root of the RR interval.
    let qt_scale = rr.sqrt();
    let mut leads = vec![vec![0.0f64; n]; N_LEADS];
    let mut t_beat = rng.gen_range(0.0..rr);
    let span = |w: &Wave| 5.0 * w.width;
    while t_beat - 0.5 < spec.duration {
        for (k, w) in waves.iter().enumerate() {
            let offset = if k == 4 { w.offset * qt_scale } else { w.offset };
            let centre = t_beat + offset;
            let lo = (((centre - span(w)) * fs).floor().max(0.0)) as usize;
            let hi = ((((centre + span(w)) * fs).ceil()) as usize).min(n);
            for i in lo..hi {
                let dt = i as f64 / fs - centre;
                let g = w.amplitude * (-0.5 * (dt / w.width).powi(2)).exp();
                for (l, lead) in leads.iter_mut().enumerate() {
                    lead[i] += g * LEAD_MIX[l][k] * signature[l];
                }
            }
        }
        t_beat += rr * (1.0 + rng.gen_range(-0.03..0.03));
    }
    if p.noise_sd > 0.0 {
        for lead in &mut leads {
            for v in lead.iter_mut() {
                *v += p.noise_sd * std_normal(rng);
            }
        }
    }
    (leads, RecordTemplate { waves, signature })
}

/// Applies gain, baseline wander, mains leakage, the single-pole low-pass and
/// (when `quantize`) quantization, in that order.
pub fn apply_device<R: Rng + ?Sized>(
    leads: &mut [Vec<f64>],
    device: &DeviceArtifact,
    fs: f64,
    quantize: bool,
    rng: &mut R,
) {
    let wander_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mains_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let tau = std::f64::consts::TAU;
    let alpha = if device.lowpass_knee < fs / 2.0 {
        Some(1.0 - (-tau * device.lowpass_knee / fs).exp())
    } else {
        None
    };
    for lead in leads.iter_mut() {
        for (i, v) in lead.iter_mut().enumerate() {
            let t = i as f64 / fs;
            *v = *v * device.gain
                + device.baseline_wander.amplitude
                    * (tau * device.baseline_wander.frequency * t + wander_phase).sin()
                + device.mains_leakage * (tau * device.mains_hz * t + mains_phase).sin();
        }
        if let Some(alpha) = alpha {
            let mut y = lead[0];
            for v in lead.iter_mut() {
                y += alpha * (*v - y);
                *v = y;
            }
        }
        if quantize && device.quantization_step > 0.0 {
            let q = device.quantization_step;
            lead.iter_mut().for_each(|v| *v = (*v / q).round() * q);
        }
    }
}

/// One complete synthetic record with the device artifact applied.
pub fn synth_ecg<R: Rng + ?Sized>(
    latent: &PatientLatent,
    spec: &CohortSpec,
    record_id: u64,
    rng: &mut R,
) -> EcgRecord {
    let (mut leads, _) = synth_physiology(latent, spec, rng);
    apply_device(&mut leads, &spec.device, spec.sampling_rate, true, rng);
    EcgRecord {
        record_id,
        patient_id: latent.patient_id,
        cohort_id: spec.cohort_id,
        device_id: spec.device_id,
        age: Some(latent.age as f32),
        sex: latent.sex,
        sampling_rate: spec.sampling_rate as f32,
        leads: default_leads(),
        samples: leads
            .into_iter()
            .map(|l| l.into_iter().map(|v| v as f32).collect())
            .collect(),
    }
}

/// Globally unique patient id: cohort in the high bits.
pub fn patient_id(cohort_id: u16, index: usize) -> u64 {
    ((cohort_id as u64) << 40) | index as u64
}

/// Generates all records of a cohort in memory, patient by patient. Each
/// patient draws from its own stream keyed by `(seed, patient_id)`.
pub fn generate_records(spec: &CohortSpec) -> Result<Vec<EcgRecord>> {
    spec.validate()?;
    let mut records = Vec::new();
    for i in 0..spec.n_patients {
        let pid = patient_id(spec.cohort_id, i);
        let mut prng = rng::stream(&[spec.seed, spec.cohort_id as u64, pid]);
        let latent = sample_patient(spec, pid, &mut prng);
        let count = prng.gen_range(spec.ecgs_per_patient.min..=spec.ecgs_per_patient.max);
        for k in 0..count {
            let record_id = (pid << 8) | k as u64;
            records.push(synth_ecg(&latent, spec, record_id, &mut prng));
        }
    }
    Ok(records)
}

/// Generates a cohort and writes it as an ECGC container at `path`.
pub fn generate_cohort(spec: &CohortSpec, path: impl AsRef<Path>) -> Result<Store> {
    let records = generate_records(spec)?;
    write_store(&records, path.as_ref())?;
    open_store(path)
}

/// Three cohorts echoing care-level, age-spread and device heterogeneity:
/// a secondary-care hospital and two primary-care cohorts with distinct
/// hardware (gain, mains frequency, bandwidth, sampling rate).
pub fn paperlike3(n_patients: usize, seed: u64) -> Vec<CohortSpec> {
    let counts = CountRange { min: 2, max: 3 };
    vec![
        CohortSpec {
            cohort_id: 0,
            name: "hospital".into(),
            device_id: 0,
            n_patients,
            ecgs_per_patient: counts,
            age: AgeDistribution {
                mean: 56.0,
                sd: 17.0,
                min: 18.0,
                max: 95.0,
            },
            female_fraction: 0.52,
            health_severity: 0.5,
            device: DeviceArtifact {
                gain: 1.0,
                baseline_wander: BaselineWander {
                    amplitude: 0.10,
                    frequency: 0.3,
                },
                mains_leakage: 0.05,
                mains_hz: 60.0,
                lowpass_knee: 150.0,
                quantization_step: 0.005,
            },
            sampling_rate: 500.0,
            duration: 8.0,
            physiology: Physiology::default(),
            seed,
        },
        CohortSpec {
            cohort_id: 1,
            name: "primary-care".into(),
            device_id: 1,
            n_patients,
            ecgs_per_patient: counts,
            age: AgeDistribution {
                mean: 53.0,
                sd: 17.0,
                min: 18.0,
                max: 95.0,
            },
            female_fraction: 0.61,
            health_severity: 0.2,
            device: DeviceArtifact {
                gain: 1.4,
                baseline_wander: BaselineWander {
                    amplitude: 0.2,
                    frequency: 0.15,
                },
                mains_leakage: 0.1,
                mains_hz: 60.0,
                lowpass_knee: 40.0,
                quantization_step: 0.01,
            },
            sampling_rate: 400.0,
            duration: 8.0,
            physiology: Physiology::default(),
            seed,
        },
        CohortSpec {
            cohort_id: 2,
            name: "screening".into(),
            device_id: 2,
            n_patients,
            ecgs_per_patient: counts,
            age: AgeDistribution {
                mean: 55.0,
                sd: 14.0,
                min: 18.0,
                max: 95.0,
            },
            female_fraction: 0.46,
            health_severity: 0.2,
            device: DeviceArtifact {
                gain: 0.7,
                baseline_wander: BaselineWander {
                    amplitude: 0.05,
                    frequency: 0.4,
                },
                mains_leakage: 0.08,
                mains_hz: 50.0,
                lowpass_knee: 70.0,
                quantization_step: 0.0049,
            },
            sampling_rate: 500.0,
            duration: 8.0,
            physiology: Physiology::default(),
            seed,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CohortSpec {
        let mut s = paperlike3(10, 7).remove(0);
        s.ecgs_per_patient = CountRange { min: 2, max: 2 };
        s
    }

    #[test]
    fn zero_severity_keeps_baseline_template() {
        let mut s = spec();
        s.health_severity = 0.0;
        let p = sample_patient(&s, 1, &mut rng::stream(&[1]));
        assert_eq!(p.waves, s.baseline_template(p.age, p.sex));
    }

    #[test]
    fn latent_is_deterministic_and_bounded() {
        let s = spec();
        let a = sample_patient(&s, 3, &mut rng::stream(&[9]));
        let b = sample_patient(&s, 3, &mut rng::stream(&[9]));
        assert_eq!(a, b);
        assert!((18.0..=95.0).contains(&a.age));
        assert!((40.0..=160.0).contains(&a.heart_rate));
        assert!(a.waves.iter().all(|w| w.width > 0.0));
    }

    #[test]
    fn record_is_deterministic() {
        let s = spec();
        let lat = sample_patient(&s, 3, &mut rng::stream(&[9]));
        let a = synth_ecg(&lat, &s, 1, &mut rng::stream(&[4]));
        let b = synth_ecg(&lat, &s, 1, &mut rng::stream(&[4]));
        assert_eq!(a, b);
        assert_eq!(a.n_samples(), 4000);
        assert_eq!(a.leads.len(), 8);
        a.validate().unwrap();
    }

    #[test]
    fn gain_doubles_samples_before_quantization() {
        let s = spec();
        let lat = sample_patient(&s, 3, &mut rng::stream(&[9]));
        let mut d1 = DeviceArtifact::clean(50.0);
        d1.lowpass_knee = 40.0;
        let d2 = DeviceArtifact { gain: 2.0, ..d1 };
        let run = |d: &DeviceArtifact| {
            let mut r = rng::stream(&[11]);
            let (mut leads, _) = synth_physiology(&lat, &s, &mut r);
            apply_device(&mut leads, d, s.sampling_rate, false, &mut r);
            leads
        };
        let (a, b) = (run(&d1), run(&d2));
        for (la, lb) in a.iter().zip(&b) {
            for (x, y) in la.iter().zip(lb) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn count_arithmetic() {
        let s = spec();
        let recs = generate_records(&s).unwrap();
        assert_eq!(recs.len(), 20);
        let patients: std::collections::HashSet<u64> = recs.iter().map(|r| r.patient_id).collect();
        assert_eq!(patients.len(), 10);
        assert!(recs.iter().all(|r| r.cohort_id == 0 && r.device_id == 0));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec();
        s.age.min = 10.0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.health_severity = 1.5;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.n_patients = 0;
        assert!(s.validate().is_err());
    }
}

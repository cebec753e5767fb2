//! Preprocessing (band-pass, mains notch, resampling, fixed window) and
//! augmentations for building contrastive views.

pub mod augment;
pub mod filter;
pub mod resample;

use serde::{Deserialize, Serialize};

use crate::datamodel::EcgRecord;
use crate::error::{Error, Result};

pub use augment::{make_view, make_view_pair, random_crop, zero_mask, AugmentConfig};
pub use resample::resample;

/// A `[n_time x n_leads]` matrix stored lead-major, in millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadMatrix {
    n_time: usize,
    n_leads: usize,
    data: Vec<f32>,
}

impl LeadMatrix {
    pub fn from_lead_major(n_time: usize, n_leads: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_time * n_leads {
            return Err(Error::Shape(format!(
                "{} values for {n_time}x{n_leads}",
                data.len()
            )));
        }
        Ok(LeadMatrix {
            n_time,
            n_leads,
            data,
        })
    }

    pub fn from_leads(leads: &[Vec<f32>]) -> Result<Self> {
        let n_time = leads.first().map_or(0, Vec::len);
        if leads.iter().any(|l| l.len() != n_time) {
            return Err(Error::Shape("ragged leads".into()));
        }
        Ok(LeadMatrix {
            n_time,
            n_leads: leads.len(),
            data: leads.concat(),
        })
    }

    pub fn zeros(n_time: usize, n_leads: usize) -> Self {
        LeadMatrix {
            n_time,
            n_leads,
            data: vec![0.0; n_time * n_leads],
        }
    }

    /// `(n_time, n_leads)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.n_time, self.n_leads)
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_leads(&self) -> usize {
        self.n_leads
    }

    pub fn get(&self, t: usize, lead: usize) -> f32 {
        self.data[lead * self.n_time + t]
    }

    pub fn lead(&self, l: usize) -> &[f32] {
        &self.data[l * self.n_time..(l + 1) * self.n_time]
    }

    pub fn lead_mut(&mut self, l: usize) -> &mut [f32] {
        &mut self.data[l * self.n_time..(l + 1) * self.n_time]
    }

    /// Lead-major raw values, the `[channels x time]` layout the encoder takes.
    pub fn as_lead_major(&self) -> &[f32] {
        &self.data
    }

    pub fn slice_time(&self, start: usize, len: usize) -> LeadMatrix {
        let mut data = Vec::with_capacity(len * self.n_leads);
        for l in 0..self.n_leads {
            data.extend_from_slice(&self.lead(l)[start..start + len]);
        }
        LeadMatrix {
            n_time: len,
            n_leads: self.n_leads,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A preprocessed fixed-shape input, `window_len x n_leads`.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgTensor {
    pub values: LeadMatrix,
    pub record_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub band_lo: f64,
    pub band_hi: f64,
    /// Mains frequency to notch, 50 or 60 Hz.
    pub mains: f64,
    pub target_rate: f64,
    pub window_len: usize,
    pub lead_subset: Vec<String>,
    pub filter_order: usize,
    pub notch_q: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            band_lo: 0.5,
            band_hi: 100.0,
            mains: 50.0,
            target_rate: 400.0,
            window_len: 2800,
            lead_subset: default_leads(),
            filter_order: 4,
            notch_q: 30.0,
        }
    }
}

/// I, II, V1-V6.
pub fn default_leads() -> Vec<String> {
    ["I", "II", "V1", "V2", "V3", "V4", "V5", "V6"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.band_lo && self.band_lo < self.band_hi && self.band_hi < self.target_rate / 2.0)
        {
            return Err(Error::Config(format!(
                "need 0 < band_lo < band_hi < target_rate/2, got {} / {} / {}",
                self.band_lo, self.band_hi, self.target_rate
            )));
        }
        if !(self.band_lo < self.mains && self.mains < self.band_hi) {
            return Err(Error::Config(format!(
                "mains {} outside the pass band",
                self.mains
            )));
        }
        if self.window_len == 0 || self.lead_subset.is_empty() {
            return Err(Error::Config("empty window or lead subset".into()));
        }
        if self.filter_order < 2 || self.filter_order % 2 != 0 || self.notch_q <= 0.0 {
            return Err(Error::Config("filter order must be even and >= 2, Q > 0".into()));
        }
        Ok(())
    }

    /// The full filter cascade at sampling rate `fs`: band-pass, then the
    /// mains notch when the mains frequency is representable.
    pub fn design(&self, fs: f64) -> filter::Sos {
        let bp = filter::butter_bandpass(self.filter_order, self.band_lo, self.band_hi, fs);
        if self.mains < fs / 2.0 {
            bp.then(filter::iir_notch(self.mains, self.notch_q, fs))
        } else {
            bp
        }
    }
}

/// Zero-phase band-pass plus mains notch.
pub fn prefilter(signal: &[f64], fs: f64, cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    if !(fs.is_finite() && fs > 2.0 * cfg.band_hi) {
        return Err(Error::RateTooLow {
            fs,
            min: 2.0 * cfg.band_hi,
        });
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prefilter input".into()));
    }
    Ok(cfg.design(fs).filtfilt(signal))
}

/// Lead selection, prefilter, resample to the target rate, then a centred
/// window of `window_len` samples.
pub fn preprocess_record(record: &EcgRecord, cfg: &PreprocessConfig) -> Result<EcgTensor> {
    let fs = record.sampling_rate as f64;
    let available = resample::resampled_len(record.n_samples(), fs, cfg.target_rate);
    if available < cfg.window_len {
        return Err(Error::TooShort {
            record_id: record.record_id,
            available,
            required: cfg.window_len,
        });
    }
    let sos = if fs > 2.0 * cfg.band_hi {
        cfg.design(fs)
    } else {
        return Err(Error::RateTooLow {
            fs,
            min: 2.0 * cfg.band_hi,
        });
    };
    let start = (available - cfg.window_len) / 2;
    let mut data = Vec::with_capacity(cfg.window_len * cfg.lead_subset.len());
    for name in &cfg.lead_subset {
        let raw = record.lead(name).ok_or_else(|| Error::MissingLead {
            record_id: record.record_id,
            lead: name.clone(),
        })?;
        let x: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let filtered = sos.filtfilt(&x);
        let resampled = resample::resample(&filtered, fs, cfg.target_rate)?;
        data.extend(
            resampled[start..start + cfg.window_len]
                .iter()
                .map(|&v| v as f32),
        );
    }
    let values = LeadMatrix::from_lead_major(cfg.window_len, cfg.lead_subset.len(), data)?;
    if !values.is_finite() {
        return Err(Error::NonFinite(format!(
            "preprocessed record {}",
            record.record_id
        )));
    }
    Ok(EcgTensor {
        values,
        record_id: record.record_id,
    })
}

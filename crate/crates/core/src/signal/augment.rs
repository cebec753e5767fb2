//! Random cropping and contiguous zero masking for contrastive views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LeadMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Length of each view in samples.
    pub crop_len: usize,
    /// Upper bound on the per-lead masked fraction; each view draws its
    /// fraction uniformly from `[0, mask_frac_max)`.
    pub mask_frac_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_len: 2800,
            mask_frac_max: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_len == 0 {
            return Err(Error::Config("crop_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_frac_max) {
            return Err(Error::Config(format!(
                "mask_frac_max {} outside [0, 1)",
                self.mask_frac_max
            )));
        }
        Ok(())
    }
}

/// Contiguous `crop_len` slice, same start for all leads.
pub fn random_crop<R: Rng + ?Sized>(
    signal: &LeadMatrix,
    crop_len: usize,
    rng: &mut R,
) -> Result<LeadMatrix> {
    let t = signal.n_time();
    if crop_len == 0 || t < crop_len {
        return Err(Error::TooShort {
            record_id: 0,
            available: t,
            required: crop_len,
        });
    }
    let start = rng.gen_range(0..=t - crop_len);
    Ok(signal.slice_time(start, crop_len))
}

/// Zeroes one contiguous run of `round(frac * T)` samples in each lead,
/// with an independent start per lead.
pub fn zero_mask<R: Rng + ?Sized>(
    signal: &LeadMatrix,
    frac: f64,
    frac_max: f64,
    rng: &mut R,
) -> Result<LeadMatrix> {
    if !(frac.is_finite() && (0.0..=frac_max).contains(&frac)) {
        return Err(Error::OutOfRange(format!(
            "mask fraction {frac} outside [0, {frac_max}]"
        )));
    }
    let t = signal.n_time();
    let len = (frac * t as f64).round() as usize;
    let mut out = signal.clone();
    if len == 0 {
        return Ok(out);
    }
    for l in 0..out.n_leads() {
        let start = rng.gen_range(0..=t - len);
        out.lead_mut(l)[start..start + len].fill(0.0);
    }
    Ok(out)
}

/// One augmented view: crop, then mask with a fraction drawn from
/// `[0, mask_frac_max)`.
pub fn make_view<R: Rng + ?Sized>(
    input: &LeadMatrix,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<LeadMatrix> {
    let cropped = random_crop(input, aug.crop_len, rng)?;
    let frac = if aug.mask_frac_max > 0.0 {
        rng.gen_range(0.0..aug.mask_frac_max)
    } else {
        0.0
    };
    zero_mask(&cropped, frac, aug.mask_frac_max, rng)
}

/// Two views of the same patient's two records, drawn in sequence from `rng`.
pub fn make_view_pair<R: Rng + ?Sized>(
    a: &LeadMatrix,
    b: &LeadMatrix,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<(LeadMatrix, LeadMatrix)> {
    Ok((make_view(a, aug, rng)?, make_view(b, aug, rng)?))
}

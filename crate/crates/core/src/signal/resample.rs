//! Polyphase resampling with a Kaiser-windowed sinc kernel.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Taps per output sample (per polyphase branch).
pub const TAPS: usize = 32;
/// Kaiser window shape parameter.
pub const KAISER_BETA: f64 = 8.6;

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kernel weights for a fractional offset `frac` in [0, 1): tap `j` multiplies
/// input sample `floor(t) - TAPS/2 + 1 + j`. Weights sum to 1.
fn phase_weights(frac: f64, cutoff: f64) -> [f64; TAPS] {
    let half = (TAPS / 2) as f64;
    let i0b = bessel_i0(KAISER_BETA);
    let mut w = [0.0; TAPS];
    for (j, wj) in w.iter_mut().enumerate() {
        let d = frac + half - 1.0 - j as f64;
        let r = d / half;
        let win = if r.abs() <= 1.0 {
            bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0b
        } else {
            0.0
        };
        *wj = cutoff * sinc(cutoff * d) * win;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Integer rates as `(up, down)` when both are whole numbers of Hz.
fn rational_ratio(fs_in: f64, fs_out: f64) -> Option<(u64, u64)> {
    let whole = |f: f64| (f - f.round()).abs() < 1e-6 && f.round() >= 1.0;
    if !(whole(fs_in) && whole(fs_out)) {
        return None;
    }
    let (i, o) = (fs_in.round() as u64, fs_out.round() as u64);
    let g = gcd(i, o);
    Some((o / g, i / g))
}

/// Output length `floor(n * fs_out / fs_in)`.
pub fn resampled_len(n: usize, fs_in: f64, fs_out: f64) -> usize {
    match rational_ratio(fs_in, fs_out) {
        Some((up, down)) => ((n as u128 * up as u128) / down as u128) as usize,
        None => (n as f64 * fs_out / fs_in + 1e-9).floor() as usize,
    }
}

/// Resamples `signal` from `fs_in` to `fs_out`. Samples beyond the ends are
/// held at the boundary value.
pub fn resample(signal: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if !(fs_in.is_finite() && fs_out.is_finite() && fs_in > 0.0 && fs_out > 0.0) {
        return Err(Error::OutOfRange(format!(
            "sampling rates must be positive: {fs_in} -> {fs_out}"
        )));
    }
    let n = signal.len();
    let out_len = resampled_len(n, fs_in, fs_out);
    if n == 0 || out_len == 0 {
        return Ok(Vec::new());
    }
    if (fs_in - fs_out).abs() < 1e-9 {
        return Ok(signal.to_vec());
    }
    let cutoff = (fs_out / fs_in).min(1.0);
    let at = |k: i64| signal[k.clamp(0, n as i64 - 1) as usize];
    let half = (TAPS / 2) as i64;
    let apply = |base: i64, w: &[f64; TAPS]| -> f64 {
        w.iter()
            .enumerate()
            .map(|(j, wj)| wj * at(base - half + 1 + j as i64))
            .sum()
    };
    let mut out = Vec::with_capacity(out_len);
    match rational_ratio(fs_in, fs_out) {
        Some((up, down)) => {
            // Position of output m in input samples is m * down / up.
            let mut branches: HashMap<u64, [f64; TAPS]> = HashMap::new();
            for m in 0..out_len as u64 {
                let num = m * down;
                let (base, phase) = ((num / up) as i64, num % up);
                let w = branches
                    .entry(phase)
                    .or_insert_with(|| phase_weights(phase as f64 / up as f64, cutoff));
                out.push(apply(base, w));
            }
        }
        None => {
            let step = fs_in / fs_out;
            for m in 0..out_len {
                let t = m as f64 * step;
                let base = t.floor();
                out.push(apply(base as i64, &phase_weights(t - base, cutoff)));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_arithmetic() {
        assert_eq!(resampled_len(3500, 500.0, 400.0), 2800);
        assert_eq!(resampled_len(3501, 500.0, 400.0), 2800);
        assert_eq!(resampled_len(7, 360.0, 400.0), 7);
        assert_eq!(resample(&vec![0.0; 3500], 500.0, 400.0).unwrap().len(), 2800);
    }

    #[test]
    fn dc_is_preserved() {
        let y = resample(&vec![1.0; 3500], 500.0, 400.0).unwrap();
        assert!(y[10..y.len() - 10].iter().all(|v| (v - 1.0).abs() < 1e-6));
        let y = resample(&vec![1.0; 1000], 257.3, 400.0).unwrap();
        assert!(y[10..y.len() - 10].iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(resample(&[1.0], 0.0, 400.0).is_err());
        assert!(resample(&[1.0], 500.0, -1.0).is_err());
    }

    #[test]
    fn integer_phase_reproduces_samples() {
        // Downsampling by 2 lands exactly on input samples; the sinc at the
        // half-band cutoff still smooths, so only check a slow signal.
        let x: Vec<f64> = (0..400).map(|i| (2.0 * PI * i as f64 / 200.0).sin()).collect();
        let y = resample(&x, 400.0, 200.0).unwrap();
        for (m, v) in y.iter().enumerate().skip(10).take(180) {
            assert!((v - x[2 * m]).abs() < 1e-3);
        }
    }
}

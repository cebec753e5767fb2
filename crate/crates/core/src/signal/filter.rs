//! Butterworth band-pass and IIR notch filters in second-order sections,
//! applied forward and backward for zero phase.

use std::f64::consts::PI;

/// One biquad, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// Complex response magnitude at normalized angular frequency `w` (rad/sample).
    pub fn magnitude(&self, w: f64) -> f64 {
        let eval = |c: &[f64; 3]| {
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
            (re * re + im * im).sqrt()
        };
        eval(&self.b) / eval(&self.a)
    }
}

/// A cascade of biquads.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    pub fn then(mut self, other: Sos) -> Sos {
        self.sections.extend(other.sections);
        self
    }

    /// Single-pass magnitude response at `freq` Hz.
    pub fn magnitude_at(&self, freq: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * freq / fs;
        self.sections.iter().map(|s| s.magnitude(w)).product()
    }

    /// Runs the cascade once over `x`, starting each section at its
    /// steady state for a constant input equal to `x[0]`.
    pub fn filter(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut level = x0;
        for s in &self.sections {
            // Transposed direct form II, steady state for constant `level`.
            let g = s.dc_gain();
            let z2_0 = (s.b[2] - s.a[2] * g) * level;
            let z1_0 = (s.b[1] - s.a[1] * g) * level + z2_0;
            let (mut z1, mut z2) = (z1_0, z2_0);
            for v in x.iter_mut() {
                let xin = *v;
                let y = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[1] * y + z2;
                z2 = s.b[2] * xin - s.a[2] * y;
                *v = y;
            }
            level *= g;
        }
    }

    /// Zero-phase forward-backward application with odd-extension padding.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (x[0], x[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));
        self.filter(&mut ext);
        ext.reverse();
        self.filter(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Quality factors of the conjugate pole pairs of an even-order Butterworth.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (1..=order / 2)
        .map(|k| 1.0 / (2.0 * ((2 * k - 1) as f64 * PI / (2 * order) as f64).sin()))
        .collect()
}

/// Bilinear-transformed Butterworth low-pass of even `order`.
pub fn butter_lowpass(order: usize, fc: f64, fs: f64) -> Sos {
    assert!(order >= 2 && order % 2 == 0, "even order required");
    let k = (PI * fc / fs).tan();
    let sections = butterworth_qs(order)
        .into_iter()
        .map(|q| {
            let norm = 1.0 / (1.0 + k / q + k * k);
            let b0 = k * k * norm;
            Biquad {
                b: [b0, 2.0 * b0, b0],
                a: [1.0, 2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm],
            }
        })
        .collect();
    Sos { sections }
}

/// Bilinear-transformed Butterworth high-pass of even `order`.
pub fn butter_highpass(order: usize, fc: f64, fs: f64) -> Sos {
    assert!(order >= 2 && order % 2 == 0, "even order required");
    let k = (PI * fc / fs).tan();
    let sections = butterworth_qs(order)
        .into_iter()
        .map(|q| {
            let norm = 1.0 / (1.0 + k / q + k * k);
            Biquad {
                b: [norm, -2.0 * norm, norm],
                a: [1.0, 2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm],
            }
        })
        .collect();
    Sos { sections }
}

/// Band-pass as a high-pass/low-pass cascade, each of the given order.
pub fn butter_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Sos {
    butter_highpass(order, lo, fs).then(butter_lowpass(order, hi, fs))
}

/// Second-order notch at `f0` with quality factor `q`.
pub fn iir_notch(f0: f64, q: f64, fs: f64) -> Sos {
    let w0 = 2.0 * PI * f0 / fs;
    let bw = w0 / q;
    let gain = 1.0 / (1.0 + (bw / 2.0).tan());
    let c = w0.cos();
    Sos {
        sections: vec![Biquad {
            b: [gain, -2.0 * gain * c, gain],
            a: [1.0, -2.0 * gain * c, 2.0 * gain - 1.0],
        }],
    }
}

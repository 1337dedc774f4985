//! Band-limited windowed-sinc sample-rate conversion.

use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::Waveform;

/// Kaiser window shape parameter.
pub const KAISER_BETA: f64 = 8.0;
/// Sinc zero crossings on each side of the kernel centre.
pub const ZERO_CROSSINGS: f64 = 32.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
pub const CUTOFF_FRACTION: f64 = 0.9;

/// Zeroth-order modified Bessel function of the first kind (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Low-pass kernel in units of input samples, with normalized cutoff
/// `fc` (cycles per sample) and half-width `half` samples.
pub(crate) struct SincKernel {
    fc: f64,
    half: f64,
    inv_i0_beta: f64,
}

impl SincKernel {
    pub(crate) fn new(fc: f64, crossings: f64) -> Self {
        Self {
            fc,
            half: crossings / (2.0 * fc),
            inv_i0_beta: 1.0 / bessel_i0(KAISER_BETA),
        }
    }

    pub(crate) fn half_width(&self) -> f64 {
        self.half
    }

    #[inline]
    pub(crate) fn at(&self, u: f64) -> f64 {
        let r = u / self.half;
        if r.abs() > 1.0 {
            return 0.0;
        }
        let x = 2.0 * self.fc * u;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            (PI * x).sin() / (PI * x)
        };
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) * self.inv_i0_beta;
        2.0 * self.fc * sinc * window
    }
}

/// Converts to `target` Hz. Output length is `round(len * target / rate)`;
/// equal rates return the input unchanged.
pub fn resample(w: &Waveform, target: u32) -> Result<Waveform> {
    if target == 0 {
        return Err(Error::Argument("target rate must be positive".into()));
    }
    if w.rate == 0 {
        return Err(Error::Argument("input rate must be positive".into()));
    }
    if w.rate == target {
        return Ok(w.clone());
    }
    let (rate, target_f) = (w.rate as f64, target as f64);
    let out_len = (w.len() as f64 * target_f / rate).round() as usize;
    let cutoff_hz = CUTOFF_FRACTION * rate.min(target_f) / 2.0;
    let kernel = SincKernel::new(cutoff_hz / rate, ZERO_CROSSINGS);
    let half = kernel.half_width();
    let n = w.len() as isize;
    let samples = (0..out_len)
        .map(|j| {
            let t = j as f64 * rate / target_f;
            let lo = ((t - half).ceil() as isize).max(0);
            let hi = ((t + half).floor() as isize).min(n - 1);
            let mut acc = 0.0f64;
            for i in lo..=hi {
                acc += w.samples[i as usize] as f64 * kernel.at(t - i as f64);
            }
            acc as f32
        })
        .collect();
    Ok(Waveform {
        samples,
        rate: target,
        silent: w.silent,
    })
}

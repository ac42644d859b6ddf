//! Pre-emphasis filtering and evaluation metrics.
//!
//! LDR uses exponential moving averages of `y²` as the short- and long-term
//! RMS envelopes, with coefficient `exp(-T/window)`. Both envelopes start from
//! zero state and are bias-corrected; the first long window of the signal is
//! still skipped when the signal is long enough.

use crate::error::{Error, Result};
use crate::scan;
use crate::signal::AudioBuffer;

/// Pole of the pre-emphasis filter `(1 - z^-1) / (1 - 0.995 z^-1)`.
pub const PREEMPH_POLE: f64 = 0.995;

const ENVELOPE_FLOOR: f64 = 1e-7;

pub fn preemphasis(x: &AudioBuffer) -> AudioBuffer {
    AudioBuffer {
        samples: preemph(&x.samples),
        sample_rate: x.sample_rate,
    }
}

/// `y[n] = x[n] - x[n-1] + 0.995·y[n-1]` from zero state.
pub fn preemph(x: &[f64]) -> Vec<f64> {
    let mut diff = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    for &v in x {
        diff.push(v - prev);
        prev = v;
    }
    scan::forward_const(PREEMPH_POLE, &diff, 0.0)
}

/// Transpose of [`preemph`] as a linear map.
pub fn preemph_adjoint(cot: &[f64]) -> Vec<f64> {
    let w = scan::reversed_const(PREEMPH_POLE, cot, 0.0);
    let n = w.len();
    (0..n)
        .map(|i| w[i] - if i + 1 < n { w[i + 1] } else { 0.0 })
        .collect()
}

/// Error-to-signal ratio `|y - ŷ|² / |y|²`.
pub fn esr(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::LengthMismatch(y.len(), y_hat.len()));
    }
    let energy: f64 = y.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::ZeroEnergyReference);
    }
    let err: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(err / energy)
}

/// ESR after pre-emphasising both signals, as used for evaluation.
pub fn esr_preemph(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::LengthMismatch(y.len(), y_hat.len()));
    }
    esr(&preemph(y), &preemph(y_hat))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdrOptions {
    pub short_window: f64,
    pub long_window: f64,
}

impl Default for LdrOptions {
    fn default() -> Self {
        Self {
            short_window: 0.05,
            long_window: 3.0,
        }
    }
}

impl LdrOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.short_window > 0.0 && self.short_window < self.long_window) {
            return Err(Error::InvalidArgument(format!(
                "LDR windows must satisfy 0 < short ({}) < long ({})",
                self.short_window, self.long_window
            )));
        }
        Ok(())
    }
}

fn mean_square_envelope(power: &[f64], window_sec: f64, sample_rate: u32) -> Vec<f64> {
    let a = (-1.0 / (window_sec * sample_rate as f64)).exp();
    let input: Vec<f64> = power.iter().map(|p| (1.0 - a) * p).collect();
    let mut env = scan::forward_const(a, &input, 0.0);
    // Divide out the zero-state start-up bias (the weights sum to 1 - a^(n+1)).
    let mut decay = a;
    for v in env.iter_mut() {
        *v /= 1.0 - decay;
        decay *= a;
    }
    env
}

/// Per-sample log ratio of short- to long-term RMS, in dB.
pub fn loudness_ratio_db(y: &AudioBuffer, opts: &LdrOptions) -> Result<Vec<f64>> {
    opts.validate()?;
    let power: Vec<f64> = y.samples.iter().map(|v| v * v).collect();
    let short = mean_square_envelope(&power, opts.short_window, y.sample_rate);
    let long = mean_square_envelope(&power, opts.long_window, y.sample_rate);
    let floor = ENVELOPE_FLOOR * ENVELOPE_FLOOR;
    Ok(short
        .iter()
        .zip(&long)
        .map(|(&s, &l)| {
            let rs = s.max(floor).sqrt();
            let rl = l.max(floor).sqrt();
            10.0 * (rs / rl).log10()
        })
        .collect())
}

/// Loudness dynamic range in dB.
pub fn ldr(y: &AudioBuffer, opts: &LdrOptions) -> Result<f64> {
    let ratio = loudness_ratio_db(y, opts)?;
    let skip = (opts.long_window * y.sample_rate as f64).round() as usize;
    let region = if ratio.len() > skip { &ratio[skip..] } else { &ratio[..] };
    let ms = region.iter().map(|v| v * v).sum::<f64>() / region.len() as f64;
    Ok(ms.sqrt())
}

/// `LDR(ŷ) - LDR(y)`; positive when the estimate is less compressed.
pub fn delta_ldr(y: &AudioBuffer, y_hat: &AudioBuffer, opts: &LdrOptions) -> Result<f64> {
    Ok(ldr(y_hat, opts)? - ldr(y, opts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preemphasis_impulse_response() {
        let mut x = vec![0.0; 64];
        x[0] = 1.0;
        let y = preemph(&x);
        assert_eq!(y[0], 1.0);
        assert!((y[1] + 0.005).abs() < 1e-15);
        assert!((y[2] + 0.004975).abs() < 1e-15);
        for k in 1..64 {
            let closed = -0.005 * PREEMPH_POLE.powi(k as i32 - 1);
            assert!((y[k] - closed).abs() < 1e-15, "tap {k}");
        }
    }

    #[test]
    fn preemphasis_kills_dc() {
        let y = preemph(&vec![1.0; 5000]);
        assert!(y[4999].abs() < 1e-10);
        assert!(y.windows(2).all(|w| w[1] < w[0]));
        assert!(preemph(&[0.0; 32]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preemphasis_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = preemph(&x).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(preemph_adjoint(&c)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn esr_examples() {
        let y = [0.3, -0.2, 0.9];
        assert_eq!(esr(&y, &y).unwrap(), 0.0);
        assert_eq!(esr(&y, &[0.0; 3]).unwrap(), 1.0);
        assert_eq!(esr(&[1.0, 0.0], &[0.5, 0.0]).unwrap(), 0.25);
        assert!(matches!(esr(&[0.0; 3], &y), Err(Error::ZeroEnergyReference)));
        assert!(esr(&[1.0], &y).is_err());
    }

    #[test]
    fn esr_scale_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let yh: Vec<f64> = y.iter().map(|v| v * 0.9 + rng.random_range(-0.1..0.1)).collect();
        let base = esr(&y, &yh).unwrap();
        for c in [-3.0, 0.01, 7.5] {
            let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
            let yhs: Vec<f64> = yh.iter().map(|v| v * c).collect();
            assert!((esr(&ys, &yhs).unwrap() - base).abs() < 1e-12);
        }
    }

    fn sine(freq: f64, secs: f64, sr: u32) -> AudioBuffer {
        let n = (secs * sr as f64) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        AudioBuffer::new(s, sr).unwrap()
    }

    #[test]
    fn stationary_sine_has_near_zero_ldr() {
        let y = sine(1000.0, 6.0, 16000);
        let v = ldr(&y, &LdrOptions::default()).unwrap();
        assert!(v < 0.1, "ldr {v}");
    }

    #[test]
    fn modulation_raises_ldr() {
        let sr = 16000;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise: Vec<f64> = (0..sr as usize * 7).map(|_| rng.random_range(-0.5..0.5)).collect();
        let am: Vec<f64> = noise
            .iter()
            .enumerate()
            .map(|(i, v)| v * (1.0 + 0.9 * (2.0 * std::f64::consts::PI * 2.0 * i as f64 / sr as f64).sin()))
            .collect();
        let opts = LdrOptions::default();
        let flat = ldr(&AudioBuffer::new(noise, sr).unwrap(), &opts).unwrap();
        let moving = ldr(&AudioBuffer::new(am, sr).unwrap(), &opts).unwrap();
        assert!(moving > flat, "{moving} <= {flat}");
    }

    #[test]
    fn delta_ldr_antisymmetric() {
        let a = sine(440.0, 4.0, 8000);
        let mut b = a.clone();
        for (i, v) in b.samples.iter_mut().enumerate() {
            *v *= 1.0 + 0.5 * (i as f64 * 0.001).sin();
        }
        let opts = LdrOptions::default();
        assert_eq!(delta_ldr(&a, &a, &opts).unwrap(), 0.0);
        assert_eq!(delta_ldr(&a, &b, &opts).unwrap(), -delta_ldr(&b, &a, &opts).unwrap());
    }

    #[test]
    fn bad_windows_rejected() {
        let opts = LdrOptions {
            short_window: 3.0,
            long_window: 1.0,
        };
        assert!(ldr(&sine(100.0, 1.0, 8000), &opts).is_err());
    }
}

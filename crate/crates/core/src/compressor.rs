//! Five-parameter feed-forward compressor.
//!
//! Signal flow: `|x| -> dB -> hard-knee gain computer -> dB to linear ->
//! attack/release ballistics -> multiply with x -> make-up gain`.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::AudioBuffer;

/// Floor applied to `|x|` before taking the level in dB (about -140 dBFS).
pub const LEVEL_FLOOR: f64 = 1e-7;

/// `d(10^(v/20))/dv = DB_SCALE · 10^(v/20)`.
pub(crate) const DB_SCALE: f64 = LN_10 / 20.0;

pub const DEFAULT_G_INIT: f64 = 1.0;

#[inline]
pub fn db_to_lin(db: f64) -> f64 {
    (db * DB_SCALE).exp()
}

#[inline]
pub fn lin_to_db(lin: f64) -> f64 {
    20.0 * lin.log10()
}

/// Smoothing coefficient for a time constant in milliseconds.
pub fn time_to_alpha(time_ms: f64, sample_rate: u32) -> f64 {
    -(-2200.0 / (time_ms * sample_rate as f64)).exp_m1()
}

/// Inverse of [`time_to_alpha`].
pub fn alpha_to_time(alpha: f64, sample_rate: u32) -> f64 {
    -2200.0 / (sample_rate as f64 * (-alpha).ln_1p())
}

#[inline]
pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unconstrained optimiser variables, in the order used by gradients and
/// Hessians: threshold, make-up gain, ratio, attack, release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaRaw {
    pub ct_db: f64,
    pub makeup_db: f64,
    pub ratio_raw: f64,
    pub alpha_at_raw: f64,
    pub alpha_rt_raw: f64,
}

impl ThetaRaw {
    pub const DIM: usize = 5;
    pub const NAMES: [&'static str; 5] =
        ["ct_db", "makeup_db", "ratio_raw", "alpha_at_raw", "alpha_rt_raw"];

    pub fn to_array(&self) -> [f64; 5] {
        [
            self.ct_db,
            self.makeup_db,
            self.ratio_raw,
            self.alpha_at_raw,
            self.alpha_rt_raw,
        ]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            ct_db: v[0],
            makeup_db: v[1],
            ratio_raw: v[2],
            alpha_at_raw: v[3],
            alpha_rt_raw: v[4],
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::from_array([v[0], v[1], v[2], v[3], v[4]])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBounds {
    pub ratio: [f64; 2],
    pub attack_ms: [f64; 2],
    pub release_ms: [f64; 2],
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            ratio: [1.0, 20.0],
            attack_ms: [0.1, 100.0],
            release_ms: [10.0, 1000.0],
        }
    }
}

impl ParamBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: [f64; 2]| b[0].is_finite() && b[1].is_finite() && b[0] < b[1];
        if !ok(self.ratio) || self.ratio[0] < 1.0 {
            return Err(Error::InvalidBounds("ratio"));
        }
        if !ok(self.attack_ms) || self.attack_ms[0] <= 0.0 {
            return Err(Error::InvalidBounds("attack_ms"));
        }
        if !ok(self.release_ms) || self.release_ms[0] <= 0.0 {
            return Err(Error::InvalidBounds("release_ms"));
        }
        Ok(())
    }

    /// Coefficient range for the attack. Longer times give smaller alphas.
    pub fn alpha_at(&self, sample_rate: u32) -> [f64; 2] {
        [
            time_to_alpha(self.attack_ms[1], sample_rate),
            time_to_alpha(self.attack_ms[0], sample_rate),
        ]
    }

    pub fn alpha_rt(&self, sample_rate: u32) -> [f64; 2] {
        [
            time_to_alpha(self.release_ms[1], sample_rate),
            time_to_alpha(self.release_ms[0], sample_rate),
        ]
    }
}

/// Human-readable compressor settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressorParams {
    pub ct_db: f64,
    pub ratio: f64,
    pub attack_ms: f64,
    pub release_ms: f64,
    pub makeup_db: f64,
    pub alpha_at: f64,
    pub alpha_rt: f64,
}

impl CompressorParams {
    /// Builds settings from time constants, deriving the coefficients.
    pub fn from_times(
        ct_db: f64,
        ratio: f64,
        attack_ms: f64,
        release_ms: f64,
        makeup_db: f64,
        sample_rate: u32,
    ) -> Self {
        Self {
            ct_db,
            ratio,
            attack_ms,
            release_ms,
            makeup_db,
            alpha_at: time_to_alpha(attack_ms, sample_rate),
            alpha_rt: time_to_alpha(release_ms, sample_rate),
        }
    }

    /// Initial values used when nothing better is known.
    pub fn default_init(sample_rate: u32) -> Self {
        Self::from_times(-36.0, 4.0, 1.0, 200.0, 0.0, sample_rate)
    }
}

/// Constrained values `[CT, gamma, R, alpha_at, alpha_rt]` with the first and
/// second derivatives of each with respect to its own raw variable.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Constrained {
    pub value: [f64; 5],
    pub d1: [f64; 5],
    pub d2: [f64; 5],
}

impl Constrained {
    pub fn new(theta: &ThetaRaw, bounds: &ParamBounds, sample_rate: u32) -> Self {
        let ranges = [
            bounds.ratio,
            bounds.alpha_at(sample_rate),
            bounds.alpha_rt(sample_rate),
        ];
        let raws = [theta.ratio_raw, theta.alpha_at_raw, theta.alpha_rt_raw];
        let mut value = [theta.ct_db, theta.makeup_db, 0.0, 0.0, 0.0];
        let mut d1 = [1.0, 1.0, 0.0, 0.0, 0.0];
        let mut d2 = [0.0; 5];
        for i in 0..3 {
            let [lo, hi] = ranges[i];
            let s = sigmoid(raws[i]);
            let span = hi - lo;
            value[i + 2] = lo + span * s;
            d1[i + 2] = span * s * (1.0 - s);
            d2[i + 2] = span * s * (1.0 - s) * (1.0 - 2.0 * s);
        }
        Self { value, d1, d2 }
    }

    pub fn ct_db(&self) -> f64 {
        self.value[0]
    }
    pub fn makeup_db(&self) -> f64 {
        self.value[1]
    }
    pub fn ratio(&self) -> f64 {
        self.value[2]
    }
    pub fn alpha_at(&self) -> f64 {
        self.value[3]
    }
    pub fn alpha_rt(&self) -> f64 {
        self.value[4]
    }
}

/// Maps raw variables into bounded settings through scaled sigmoids.
pub fn constrain(theta: &ThetaRaw, bounds: &ParamBounds, sample_rate: u32) -> CompressorParams {
    let c = Constrained::new(theta, bounds, sample_rate);
    CompressorParams {
        ct_db: c.ct_db(),
        ratio: c.ratio(),
        attack_ms: alpha_to_time(c.alpha_at(), sample_rate),
        release_ms: alpha_to_time(c.alpha_rt(), sample_rate),
        makeup_db: c.makeup_db(),
        alpha_at: c.alpha_at(),
        alpha_rt: c.alpha_rt(),
    }
}

/// Inverse of [`constrain`]. The coefficients (not the times) are inverted.
pub fn unconstrain(
    params: &CompressorParams,
    bounds: &ParamBounds,
    sample_rate: u32,
) -> Result<ThetaRaw> {
    let inv = |name: &'static str, v: f64, [lo, hi]: [f64; 2]| {
        if !(v > lo && v < hi) {
            return Err(Error::OutOfBounds {
                name,
                value: v,
                lo,
                hi,
            });
        }
        Ok(logit((v - lo) / (hi - lo)))
    };
    Ok(ThetaRaw {
        ct_db: params.ct_db,
        makeup_db: params.makeup_db,
        ratio_raw: inv("ratio", params.ratio, bounds.ratio)?,
        alpha_at_raw: inv("alpha_at", params.alpha_at, bounds.alpha_at(sample_rate))?,
        alpha_rt_raw: inv("alpha_rt", params.alpha_rt, bounds.alpha_rt(sample_rate))?,
    })
}

/// Input level in dB with the floor applied.
pub fn level_db(x: &[f64]) -> Vec<f64> {
    x.iter().map(|s| lin_to_db(s.abs().max(LEVEL_FLOOR))).collect()
}

/// Static gain for one level: `min(0, (1 - 1/R)(CT - L))` in dB.
#[inline]
pub(crate) fn static_gain_db(level_db: f64, ct_db: f64, ratio: f64) -> f64 {
    ((1.0 - 1.0 / ratio) * (ct_db - level_db)).min(0.0)
}

/// Hard-knee gain computer, returning linear gains in (0, 1].
pub fn gain_computer(x: &[f64], ct_db: f64, ratio: f64) -> Vec<f64> {
    level_db(x)
        .into_iter()
        .map(|l| db_to_lin(static_gain_db(l, ct_db, ratio)))
        .collect()
}

/// Per-sample intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Attack phase indicator.
    pub zeta: Vec<bool>,
    pub beta: Vec<f64>,
    pub g_hat: Vec<f64>,
    pub g_tilde: Vec<f64>,
    pub g: Vec<f64>,
    /// Filled by [`compress`]; empty when the trace comes from [`ballistics`].
    pub level_db: Vec<f64>,
    pub g_init: f64,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    /// `g[n-1]`, with the initial state at `n = 0`.
    #[inline]
    pub fn g_prev(&self, n: usize) -> f64 {
        if n == 0 {
            self.g_init
        } else {
            self.g[n - 1]
        }
    }
}

/// Attack/release smoothing written as a time-varying one-pole filter
/// `g[n] = g~[n] + beta[n]·g[n-1]`. Ties resolve to release.
pub fn ballistics(g_hat: &[f64], alpha_at: f64, alpha_rt: f64, g_init: f64) -> ForwardTrace {
    let n = g_hat.len();
    let mut trace = ForwardTrace {
        zeta: Vec::with_capacity(n),
        beta: Vec::with_capacity(n),
        g_hat: g_hat.to_vec(),
        g_tilde: Vec::with_capacity(n),
        g: Vec::with_capacity(n),
        level_db: Vec::new(),
        g_init,
    };
    let mut prev = g_init;
    for &gh in g_hat {
        let attack = gh < prev;
        let alpha = if attack { alpha_at } else { alpha_rt };
        let beta = 1.0 - alpha;
        let gt = alpha * gh;
        let g = gt + beta * prev;
        trace.zeta.push(attack);
        trace.beta.push(beta);
        trace.g_tilde.push(gt);
        trace.g.push(g);
        prev = g;
    }
    trace
}

/// Runs the compressor with explicit settings.
pub fn compress_params(x: &[f64], params: &CompressorParams, g_init: f64) -> (Vec<f64>, ForwardTrace) {
    let levels = level_db(x);
    let g_hat: Vec<f64> = levels
        .iter()
        .map(|&l| db_to_lin(static_gain_db(l, params.ct_db, params.ratio)))
        .collect();
    let mut trace = ballistics(&g_hat, params.alpha_at, params.alpha_rt, g_init);
    trace.level_db = levels;
    let makeup = db_to_lin(params.makeup_db);
    let y = x
        .iter()
        .zip(&trace.g)
        .map(|(&xn, &g)| xn * g * makeup)
        .collect();
    (y, trace)
}

/// Runs the compressor for raw parameters.
pub fn compress(
    x: &AudioBuffer,
    theta: &ThetaRaw,
    bounds: &ParamBounds,
    g_init: f64,
) -> (AudioBuffer, ForwardTrace) {
    let params = constrain(theta, bounds, x.sample_rate);
    let (y, trace) = compress_params(&x.samples, &params, g_init);
    (
        AudioBuffer {
            samples: y,
            sample_rate: x.sample_rate,
        },
        trace,
    )
}

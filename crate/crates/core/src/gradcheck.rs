//! Finite-difference checks of the analytic derivatives on seeded fixtures.
//!
//! Each draw builds a short noise-burst input, a target rendered by the
//! compressor at one random setting, and an evaluation point at another.
//! Errors are measured per component against central differences and
//! normalised by the largest component of the analytic result, so components
//! that are nearly zero do not blow up the ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{HessianStrategy, Objective};
use crate::compressor::{compress_params, constrain, ParamBounds, ThetaRaw, DEFAULT_G_INIT};
use crate::error::Result;
use crate::signal::{AudioBuffer, AudioPair};
use crate::synth::{stimulus, Stimulus};

pub const FIXTURE_RATE: u32 = 4000;

/// Raw parameters drawn from the region the fits usually visit.
pub fn random_theta(rng: &mut ChaCha8Rng) -> ThetaRaw {
    ThetaRaw {
        ct_db: rng.random_range(-40.0..-12.0),
        makeup_db: rng.random_range(-6.0..6.0),
        ratio_raw: rng.random_range(-2.5..1.5),
        alpha_at_raw: rng.random_range(-2.5..2.5),
        alpha_rt_raw: rng.random_range(-2.5..2.5),
    }
}

/// Objective over one seeded pair and the point at which to check it.
pub fn fixture(seed: u64, samples: usize, preemph: bool) -> Result<(Objective, ThetaRaw)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = ParamBounds::default();
    let x = stimulus(Stimulus::NoiseBursts, samples, FIXTURE_RATE, &mut rng);
    let target = constrain(&random_theta(&mut rng), &bounds, FIXTURE_RATE);
    let (y, _) = compress_params(&x, &target, DEFAULT_G_INIT);
    let pair = AudioPair {
        input: AudioBuffer::new(x, FIXTURE_RATE)?,
        target: AudioBuffer::new(y, FIXTURE_RATE)?,
    };
    let objective = Objective::whole(&pair, bounds, preemph)?;
    Ok((objective, random_theta(&mut rng)))
}

fn shifted(theta: &ThetaRaw, i: usize, h: f64) -> ThetaRaw {
    let mut v = theta.to_array();
    v[i] += h;
    ThetaRaw::from_array(v)
}

/// Central-difference gradient of the loss.
pub fn fd_gradient(objective: &Objective, theta: &ThetaRaw, step: f64) -> [f64; 5] {
    std::array::from_fn(|i| {
        (objective.loss(&shifted(theta, i, step)) - objective.loss(&shifted(theta, i, -step))) / (2.0 * step)
    })
}

/// Central differences of the analytic gradient; column `j` is `∂g/∂θ_j`.
pub fn fd_hessian(objective: &Objective, theta: &ThetaRaw, step: f64) -> [[f64; 5]; 5] {
    let mut h = [[0.0; 5]; 5];
    for j in 0..5 {
        let gp = objective.gradient(&shifted(theta, j, step));
        let gm = objective.gradient(&shifted(theta, j, -step));
        for i in 0..5 {
            h[i][j] = (gp.0[i] - gm.0[i]) / (2.0 * step);
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub draws: usize,
    pub max_rel_error: f64,
    pub worst_draw: u64,
    pub worst_component: usize,
}

/// Compares analytic and finite-difference gradients on `draws` fixtures
/// seeded `seed, seed + 1, ...`. Pre-emphasis alternates between draws.
pub fn gradient_check(seed: u64, samples: usize, draws: usize, step: f64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        draws,
        max_rel_error: 0.0,
        worst_draw: seed,
        worst_component: 0,
    };
    for d in 0..draws as u64 {
        let (objective, theta) = fixture(seed + d, samples, d % 2 == 0)?;
        let g = objective.gradient(&theta);
        let fd = fd_gradient(&objective, &theta, step);
        let scale = g.inf_norm().max(f64::MIN_POSITIVE);
        for i in 0..5 {
            let e = (g.0[i] - fd[i]).abs() / scale;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_draw = seed + d;
                report.worst_component = i;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianCheckReport {
    pub instances: usize,
    /// Largest pairwise `max|A − B| / max|A|` over strategy pairs.
    pub max_strategy_dev: f64,
    /// Largest deviation from gradient differences, relative to `max|H|`.
    pub max_fd_dev: f64,
}

/// Cross-checks the four Hessian strategies against each other and against
/// differences of the gradient.
pub fn hessian_check(seed: u64, samples: usize, instances: usize, step: f64) -> Result<HessianCheckReport> {
    let mut report = HessianCheckReport {
        instances,
        max_strategy_dev: 0.0,
        max_fd_dev: 0.0,
    };
    for k in 0..instances as u64 {
        let (objective, theta) = fixture(seed + k, samples, k % 2 == 0)?;
        let hs: Vec<_> = HessianStrategy::ALL
            .iter()
            .map(|&s| objective.evaluate_unsymmetrized(&theta, s).hessian)
            .collect();
        for a in 0..hs.len() {
            for b in (a + 1)..hs.len() {
                report.max_strategy_dev = report.max_strategy_dev.max(hs[a].rel_diff(&hs[b]));
            }
        }
        let fd = fd_hessian(&objective, &theta, step);
        let scale = hs[0].max_abs().max(f64::MIN_POSITIVE);
        for (i, row) in fd.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                report.max_fd_dev = report.max_fd_dev.max((hs[0].matrix[i][j] - v).abs() / scale);
            }
        }
    }
    Ok(report)
}

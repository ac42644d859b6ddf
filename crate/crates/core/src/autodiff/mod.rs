//! Analytic first- and second-order derivatives of the matching loss.
//!
//! The loss is the squared distance between the (optionally pre-emphasised)
//! compressor output and target, summed over each chunk's evaluation region.
//! Gradients come from a reverse pass through the ballistics filter run in
//! reversed time. Hessians can be assembled four ways, by composing forward
//! and reverse passes: every strategy evaluates the same matrix through a
//! different sequence of recursions, so they double as cross-checks.

mod kernels;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::compressor::{Constrained, ForwardTrace, ParamBounds, ThetaRaw, DEFAULT_G_INIT};
use crate::error::{Error, Result};
use crate::signal::{AudioPair, ChunkPlan};

use kernels::{Chunk, Primal};

/// Loss gradient with respect to [`ThetaRaw`], in its field order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gradient(pub [f64; 5]);

impl Gradient {
    pub fn inf_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, v: &[f64; 5]) -> f64 {
        self.0.iter().zip(v).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hessian {
    pub matrix: [[f64; 5]; 5],
    pub symmetrized: bool,
}

impl Hessian {
    pub fn zeros() -> Self {
        Self {
            matrix: [[0.0; 5]; 5],
            symmetrized: false,
        }
    }

    /// Replaces the matrix with `(H + H^T) / 2`.
    pub fn symmetrize(&mut self) {
        for i in 0..5 {
            for j in (i + 1)..5 {
                let avg = 0.5 * (self.matrix[i][j] + self.matrix[j][i]);
                self.matrix[i][j] = avg;
                self.matrix[j][i] = avg;
            }
        }
        self.symmetrized = true;
    }

    /// `max |H - H^T|`.
    pub fn asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                m = m.max((self.matrix[i][j] - self.matrix[j][i]).abs());
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.matrix
            .iter()
            .flatten()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// `max |A - B| / max |A|`.
    pub fn rel_diff(&self, other: &Hessian) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                d = d.max((self.matrix[i][j] - other.matrix[i][j]).abs());
            }
        }
        d / self.max_abs().max(other.max_abs()).max(f64::MIN_POSITIVE)
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().flatten().all(|v| v.is_finite())
    }

    fn add(&mut self, other: &[[f64; 5]; 5]) {
        for i in 0..5 {
            for j in 0..5 {
                self.matrix[i][j] += other[i][j];
            }
        }
    }
}

/// How the outer Jacobian of the gradient map is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HessianStrategy {
    /// Reverse pass over the reverse pass (rows).
    RevRev,
    /// Forward tangents pushed through the reverse pass (columns).
    FwdRev,
    /// Reverse pass over a forward-mode directional derivative (columns).
    RevFwd,
    /// Second-order forward tangents, one pass per unique entry.
    FwdFwd,
}

impl HessianStrategy {
    pub const ALL: [HessianStrategy; 4] = [
        HessianStrategy::RevRev,
        HessianStrategy::FwdRev,
        HessianStrategy::RevFwd,
        HessianStrategy::FwdFwd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HessianStrategy::RevRev => "rev-rev",
            HessianStrategy::FwdRev => "fwd-rev",
            HessianStrategy::RevFwd => "rev-fwd",
            HessianStrategy::FwdFwd => "fwd-fwd",
        }
    }
}

impl fmt::Display for HessianStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HessianStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rev-rev" => Ok(HessianStrategy::RevRev),
            "fwd-rev" => Ok(HessianStrategy::FwdRev),
            "rev-fwd" => Ok(HessianStrategy::RevFwd),
            "fwd-fwd" => Ok(HessianStrategy::FwdFwd),
            other => Err(Error::InvalidArgument(format!(
                "unknown Hessian strategy {other:?}"
            ))),
        }
    }
}

/// Loss, gradient and Hessian at one point.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation {
    pub loss: f64,
    pub gradient: Gradient,
    pub hessian: Hessian,
}

fn unit(i: usize) -> [f64; 5] {
    let mut e = [0.0; 5];
    e[i] = 1.0;
    e
}

/// The matching loss over a chunked input/target pair.
#[derive(Debug, Clone)]
pub struct Objective {
    chunks: Vec<Chunk>,
    bounds: ParamBounds,
    sample_rate: u32,
    g_init: f64,
}

impl Objective {
    /// Splits the pair by `plan`; the target's filtered chunks are computed
    /// once here.
    pub fn new(pair: &AudioPair, plan: &ChunkPlan, bounds: ParamBounds, preemph: bool) -> Result<Self> {
        bounds.validate()?;
        if plan.n_samples != pair.len() {
            return Err(Error::LengthMismatch(plan.n_samples, pair.len()));
        }
        let chunks = plan
            .spans()
            .map(|span| {
                let mut chunk = Chunk {
                    x: pair.input.samples[span.range.clone()].to_vec(),
                    target: Vec::new(),
                    eval_start: span.eval_start_local(),
                    preemph,
                };
                chunk.target = chunk.filter(&pair.target.samples[span.range.clone()]);
                chunk
            })
            .collect();
        Ok(Self {
            chunks,
            bounds,
            sample_rate: pair.sample_rate(),
            g_init: DEFAULT_G_INIT,
        })
    }

    /// Single chunk covering the whole pair.
    pub fn whole(pair: &AudioPair, bounds: ParamBounds, preemph: bool) -> Result<Self> {
        Self::new(pair, &ChunkPlan::whole(pair.len()), bounds, preemph)
    }

    pub fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_chunks(&self) -> usize {
        self.chunks.len()
    }

    /// Samples that enter the loss.
    pub fn n_evaluated(&self) -> usize {
        self.chunks.iter().map(|c| c.x.len() - c.eval_start).sum()
    }

    fn primal<'a>(&self, chunk: &'a Chunk, theta: &ThetaRaw) -> Primal<'a> {
        Primal::new(chunk, theta, &self.bounds, self.sample_rate, self.g_init)
    }

    /// Maps every chunk in parallel and reduces in chunk order, so results do
    /// not depend on the thread count.
    fn per_chunk<T: Send>(&self, f: impl Fn(&Chunk) -> T + Sync) -> Vec<T> {
        self.chunks.par_iter().map(&f).collect()
    }

    pub fn loss(&self, theta: &ThetaRaw) -> f64 {
        self.per_chunk(|c| self.primal(c, theta).loss())
            .into_iter()
            .sum()
    }

    pub fn loss_and_gradient(&self, theta: &ThetaRaw) -> (f64, Gradient) {
        let parts = self.per_chunk(|c| {
            let p = self.primal(c, theta);
            let adj = kernels::backward(&p, p.output_cotangent());
            (p.loss(), adj.grad)
        });
        let mut loss = 0.0;
        let mut grad = [0.0; 5];
        for (l, g) in parts {
            loss += l;
            for i in 0..5 {
                grad[i] += g[i];
            }
        }
        (loss, Gradient(grad))
    }

    pub fn gradient(&self, theta: &ThetaRaw) -> Gradient {
        self.loss_and_gradient(theta).1
    }

    /// Loss, gradient and symmetrised Hessian.
    pub fn evaluate(&self, theta: &ThetaRaw, strategy: HessianStrategy) -> Evaluation {
        let mut ev = self.evaluate_unsymmetrized(theta, strategy);
        ev.hessian.symmetrize();
        ev
    }

    pub fn hessian(&self, theta: &ThetaRaw, strategy: HessianStrategy) -> Hessian {
        self.evaluate(theta, strategy).hessian
    }

    /// As [`Objective::evaluate`] but without the final symmetrisation.
    pub fn evaluate_unsymmetrized(&self, theta: &ThetaRaw, strategy: HessianStrategy) -> Evaluation {
        let parts = self.per_chunk(|c| chunk_hessian(&self.primal(c, theta), strategy));
        let mut loss = 0.0;
        let mut grad = [0.0; 5];
        let mut hessian = Hessian::zeros();
        for (l, g, h) in parts {
            loss += l;
            for i in 0..5 {
                grad[i] += g[i];
            }
            hessian.add(&h);
        }
        Evaluation {
            loss,
            gradient: Gradient(grad),
            hessian,
        }
    }

    /// Reverse-over-reverse product `u^T ∇²L`.
    pub fn vjp_backward(&self, theta: &ThetaRaw, u: &[f64; 5]) -> [f64; 5] {
        self.reduce(|c| {
            let p = self.primal(c, theta);
            let adj = kernels::backward(&p, p.output_cotangent());
            kernels::vjp_backward(&p, &adj, u)
        })
    }

    /// Forward-over-reverse product `∇²L · dtheta`.
    pub fn jvp_backward(&self, theta: &ThetaRaw, dtheta: &[f64; 5]) -> [f64; 5] {
        self.reduce(|c| {
            let p = self.primal(c, theta);
            let adj = kernels::backward(&p, p.output_cotangent());
            let tan = kernels::tangent(&p, dtheta);
            kernels::jvp_backward(&p, &adj, &tan)
        })
    }

    /// Reverse-over-forward product `∇²L · dtheta`.
    pub fn rev_over_fwd(&self, theta: &ThetaRaw, dtheta: &[f64; 5]) -> [f64; 5] {
        self.reduce(|c| {
            let p = self.primal(c, theta);
            let tan = kernels::tangent(&p, dtheta);
            kernels::rev_over_fwd(&p, &tan)
        })
    }

    /// Directional derivative `<∇L, dtheta>` by forward mode alone.
    pub fn directional_derivative(&self, theta: &ThetaRaw, dtheta: &[f64; 5]) -> f64 {
        self.per_chunk(|c| {
            let p = self.primal(c, theta);
            let tan = kernels::tangent(&p, dtheta);
            let fy = c.filter(&tan.dy);
            (c.eval_start..fy.len())
                .map(|n| 2.0 * p.resid[n] * fy[n])
                .sum::<f64>()
        })
        .into_iter()
        .sum()
    }

    fn reduce(&self, f: impl Fn(&Chunk) -> [f64; 5] + Sync) -> [f64; 5] {
        let mut out = [0.0; 5];
        for part in self.per_chunk(f) {
            for i in 0..5 {
                out[i] += part[i];
            }
        }
        out
    }
}

type ChunkParts = (f64, [f64; 5], [[f64; 5]; 5]);

fn chunk_hessian(p: &Primal, strategy: HessianStrategy) -> ChunkParts {
    let adj = kernels::backward(p, p.output_cotangent());
    let mut h = [[0.0; 5]; 5];
    match strategy {
        HessianStrategy::RevRev => {
            for (i, row) in h.iter_mut().enumerate() {
                *row = kernels::vjp_backward(p, &adj, &unit(i));
            }
        }
        HessianStrategy::FwdRev => {
            for j in 0..5 {
                let tan = kernels::tangent(p, &unit(j));
                let col = kernels::jvp_backward(p, &adj, &tan);
                for i in 0..5 {
                    h[i][j] = col[i];
                }
            }
        }
        HessianStrategy::RevFwd => {
            for j in 0..5 {
                let tan = kernels::tangent(p, &unit(j));
                let col = kernels::rev_over_fwd(p, &tan);
                for i in 0..5 {
                    h[i][j] = col[i];
                }
            }
        }
        HessianStrategy::FwdFwd => {
            let tans: Vec<_> = (0..5).map(|i| kernels::tangent(p, &unit(i))).collect();
            let filtered: Vec<_> = tans.iter().map(|t| p.chunk.filter(&t.dy)).collect();
            for i in 0..5 {
                for j in i..5 {
                    let v = kernels::fwd_over_fwd(p, &tans[i], &tans[j], &filtered[i], &filtered[j]);
                    h[i][j] = v;
                    h[j][i] = v;
                }
            }
        }
    }
    (p.loss(), adj.grad, h)
}

fn check_trace(x: &[f64], trace: &ForwardTrace) -> Result<()> {
    let n = x.len();
    let lens = [
        trace.zeta.len(),
        trace.beta.len(),
        trace.g_hat.len(),
        trace.g_tilde.len(),
        trace.g.len(),
        trace.level_db.len(),
    ];
    if lens.iter().any(|&l| l != n) {
        return Err(Error::TraceMismatch(format!(
            "input has {n} samples, trace lengths {lens:?}"
        )));
    }
    Ok(())
}

fn bare_chunk(x: &[f64]) -> Chunk {
    Chunk {
        x: x.to_vec(),
        target: vec![0.0; x.len()],
        eval_start: 0,
        preemph: false,
    }
}

/// Pulls a per-sample cotangent on the compressor output back to the raw
/// parameters, reusing `trace` from the matching forward pass.
pub fn vjp_compressor(
    x: &[f64],
    theta: &ThetaRaw,
    bounds: &ParamBounds,
    sample_rate: u32,
    trace: &ForwardTrace,
    cotangent: &[f64],
) -> Result<Gradient> {
    check_trace(x, trace)?;
    if cotangent.len() != x.len() {
        return Err(Error::TraceMismatch(format!(
            "cotangent has {} samples, input {}",
            cotangent.len(),
            x.len()
        )));
    }
    let chunk = bare_chunk(x);
    let c = Constrained::new(theta, bounds, sample_rate);
    let p = Primal::from_trace(&chunk, c, trace.clone());
    Ok(Gradient(kernels::backward(&p, cotangent.to_vec()).grad))
}

/// Directional derivative of the compressor output along `dtheta`.
pub fn jvp_compressor(
    x: &[f64],
    theta: &ThetaRaw,
    bounds: &ParamBounds,
    sample_rate: u32,
    trace: &ForwardTrace,
    dtheta: &[f64; 5],
) -> Result<Vec<f64>> {
    check_trace(x, trace)?;
    let chunk = bare_chunk(x);
    let c = Constrained::new(theta, bounds, sample_rate);
    let p = Primal::from_trace(&chunk, c, trace.clone());
    Ok(kernels::tangent(&p, dtheta).dy)
}

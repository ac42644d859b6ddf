//! Damped Newton-Raphson with Armijo backtracking and negative-curvature
//! escape.
//!
//! The update is `θ ← θ − τν` with `Hν = g`. The step `τ` starts at 1 and is
//! halved until `L(θ − τν) ≤ L(θ) − α·τ·gᵀν`. When the Hessian is not positive
//! semi-definite, or the search along `ν` stalls, a random direction
//! orthogonal to `ν` is searched instead.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Hessian, HessianStrategy, Objective};
use crate::compressor::{constrain, CompressorParams, ThetaRaw};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NROptions {
    pub armijo_alpha: f64,
    pub max_iters: usize,
    /// Stop once `‖∇L‖∞` falls below this.
    pub grad_tol: f64,
    pub min_step: f64,
    pub max_curvature_retries: usize,
    pub rng_seed: u64,
    pub strategy: HessianStrategy,
}

impl Default for NROptions {
    fn default() -> Self {
        Self {
            armijo_alpha: 1e-4,
            max_iters: 50,
            grad_tol: 1e-9,
            min_step: 2f64.powi(-30),
            max_curvature_retries: 10,
            rng_seed: 0,
            strategy: HessianStrategy::FwdRev,
        }
    }
}

impl NROptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.armijo_alpha > 0.0 && self.armijo_alpha < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "armijo_alpha must lie in (0, 0.5), got {}",
                self.armijo_alpha
            )));
        }
        if !(self.min_step > 0.0 && self.min_step <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "min_step must lie in (0, 1], got {}",
                self.min_step
            )));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::InvalidArgument("grad_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// A twice-differentiable objective over `R^dim`.
pub trait Problem {
    fn dim(&self) -> usize;
    fn loss(&self, x: &[f64]) -> f64;
    /// Loss, gradient and (symmetric) Hessian.
    fn evaluate(&self, x: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>);
}

/// The compressor matching loss with a chosen Hessian strategy.
pub struct CompressorProblem<'a> {
    pub objective: &'a Objective,
    pub strategy: HessianStrategy,
}

impl Problem for CompressorProblem<'_> {
    fn dim(&self) -> usize {
        ThetaRaw::DIM
    }

    fn loss(&self, x: &[f64]) -> f64 {
        self.objective.loss(&ThetaRaw::from_slice(x))
    }

    fn evaluate(&self, x: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let ev = self.objective.evaluate(&ThetaRaw::from_slice(x), self.strategy);
        let g = DVector::from_column_slice(&ev.gradient.0);
        let h = DMatrix::from_fn(5, 5, |i, j| ev.hessian.matrix[i][j]);
        (ev.loss, g, h)
    }
}

/// Newton direction and curvature information.
#[derive(Debug, Clone)]
pub struct StepSolution {
    pub nu: DVector<f64>,
    pub min_eigenvalue: f64,
    pub psd: bool,
}

/// Solves `Hν = g` by LU with partial pivoting and classifies `H` by its
/// smallest eigenvalue (tolerance `-1e-10·‖H‖`).
pub fn solve_step(h: &DMatrix<f64>, g: &DVector<f64>) -> Result<StepSolution> {
    let norm = h.amax();
    let min_eigenvalue = h.clone().symmetric_eigenvalues().min();
    let psd = min_eigenvalue >= -1e-10 * norm;
    let nu = h.clone().lu().solve(g).ok_or(Error::SingularHessian)?;
    if !nu.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularHessian);
    }
    Ok(StepSolution {
        nu,
        min_eigenvalue,
        psd,
    })
}

#[derive(Debug, Clone)]
pub struct LineSearchOutcome {
    pub tau: f64,
    pub theta: DVector<f64>,
    pub loss: f64,
    /// Halvings performed before acceptance.
    pub halvings: u32,
    /// `L(θ − τν)` and the Armijo bound it was compared against.
    pub armijo_lhs: f64,
    pub armijo_rhs: f64,
}

/// Backtracking search along `-ν`. Returns `Ok(None)` when `τ` drops below
/// `min_step` without satisfying the Armijo condition.
pub fn line_search(
    theta: &DVector<f64>,
    nu: &DVector<f64>,
    loss: f64,
    grad: &DVector<f64>,
    loss_fn: impl Fn(&[f64]) -> f64,
    opts: &NROptions,
) -> Result<Option<LineSearchOutcome>> {
    let slope = grad.dot(nu);
    if !(slope > 0.0) {
        return Err(Error::NotDescent(slope));
    }
    let mut tau = 1.0;
    let mut halvings = 0;
    while tau >= opts.min_step {
        let candidate = theta - nu * tau;
        let lhs = loss_fn(candidate.as_slice());
        let rhs = loss - opts.armijo_alpha * tau * slope;
        if lhs <= rhs {
            return Ok(Some(LineSearchOutcome {
                tau,
                theta: candidate,
                loss: lhs,
                halvings,
                armijo_lhs: lhs,
                armijo_rhs: rhs,
            }));
        }
        tau *= 0.5;
        halvings += 1;
    }
    Ok(None)
}

/// Random direction orthogonal to `nu` with the same norm, signed so that it
/// is a descent direction for `θ − d`.
pub fn curvature_escape(nu: &DVector<f64>, grad: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let dim = nu.len();
    let nn = nu.norm_squared();
    let mut d = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
    if nn > 0.0 {
        // Two Gram-Schmidt passes keep the residual overlap at rounding level.
        for _ in 0..2 {
            let proj = d.dot(nu) / nn;
            d -= nu * proj;
        }
    }
    let target = if nn > 0.0 { nn.sqrt() } else { grad.norm() };
    let dn = d.norm();
    if dn > 0.0 {
        d *= target / dn;
    }
    if grad.dot(&d) < 0.0 {
        d = -d;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIters,
    StalledNegativeCurvature,
}

impl FitStatus {
    pub fn name(self) -> &'static str {
        match self {
            FitStatus::Converged => "converged",
            FitStatus::MaxIters => "max_iters",
            FitStatus::StalledNegativeCurvature => "stalled_negative_curvature",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionKind {
    Newton,
    /// `H` was singular, so the raw gradient was used.
    Gradient,
    /// Random orthogonal direction; the counter is the retry number.
    Escape(usize),
}

/// One accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm: f64,
    pub tau: f64,
    pub direction: DirectionKind,
    pub psd: bool,
    pub min_eigenvalue: f64,
    pub armijo_lhs: f64,
    pub armijo_rhs: f64,
}

/// Result of [`minimize`] on a generic problem.
#[derive(Debug, Clone)]
pub struct Minimization {
    pub x: Vec<f64>,
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub hessian: DMatrix<f64>,
    pub grad_norm: f64,
    /// Loss at the start point followed by the loss after every accepted step.
    pub loss_trajectory: Vec<f64>,
    pub status: FitStatus,
    pub iters: usize,
    pub curvature_retries: usize,
    pub log: Vec<IterationRecord>,
}

fn non_finite(what: &'static str, iter: usize) -> Error {
    Error::NonFinite { what, iter }
}

/// Runs damped Newton-Raphson on `problem` from `x0`.
pub fn minimize<P: Problem + ?Sized>(problem: &P, x0: &[f64], opts: &NROptions) -> Result<Minimization> {
    opts.validate()?;
    if x0.len() != problem.dim() {
        return Err(Error::InvalidArgument(format!(
            "start point has {} components, problem has {}",
            x0.len(),
            problem.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let mut theta = DVector::from_column_slice(x0);
    let mut log = Vec::new();
    let mut trajectory = Vec::new();
    let mut retries_total = 0;
    let mut iter = 0;

    loop {
        let (loss, grad, hess) = problem.evaluate(theta.as_slice());
        if !loss.is_finite() {
            return Err(non_finite("loss", iter));
        }
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(non_finite("gradient", iter));
        }
        if !hess.iter().all(|v| v.is_finite()) {
            return Err(non_finite("hessian", iter));
        }
        if trajectory.is_empty() {
            trajectory.push(loss);
        }
        let grad_norm = grad.amax();
        let finish = |status, retries| Minimization {
            x: theta.as_slice().to_vec(),
            loss,
            gradient: grad.as_slice().to_vec(),
            hessian: hess.clone(),
            grad_norm,
            loss_trajectory: trajectory.clone(),
            status,
            iters: iter,
            curvature_retries: retries,
            log: log.clone(),
        };
        if grad_norm < opts.grad_tol {
            return Ok(finish(FitStatus::Converged, retries_total));
        }
        if iter >= opts.max_iters {
            return Ok(finish(FitStatus::MaxIters, retries_total));
        }

        let (nu, kind, psd, min_eig) = match solve_step(&hess, &grad) {
            Ok(s) => (s.nu, DirectionKind::Newton, s.psd, s.min_eigenvalue),
            Err(Error::SingularHessian) => (grad.clone(), DirectionKind::Gradient, false, f64::NAN),
            Err(e) => return Err(e),
        };
        let loss_fn = |x: &[f64]| problem.loss(x);

        let mut accepted = None;
        let descent = grad.dot(&nu) > 0.0;
        if (psd || kind == DirectionKind::Gradient) && descent {
            accepted = line_search(&theta, &nu, loss, &grad, loss_fn, opts)?.map(|o| (o, kind));
        }
        let mut retry = 0;
        while accepted.is_none() && retry < opts.max_curvature_retries {
            retry += 1;
            retries_total += 1;
            let d = curvature_escape(&nu, &grad, &mut rng);
            if grad.dot(&d) > 0.0 {
                accepted = line_search(&theta, &d, loss, &grad, loss_fn, opts)?
                    .map(|o| (o, DirectionKind::Escape(retry)));
            }
        }
        let Some((step, direction)) = accepted else {
            return Ok(finish(FitStatus::StalledNegativeCurvature, retries_total));
        };

        assert!(
            step.armijo_lhs <= step.armijo_rhs && step.loss <= loss,
            "accepted step violates the sufficient-decrease condition"
        );
        iter += 1;
        log.push(IterationRecord {
            iter,
            loss_before: loss,
            loss_after: step.loss,
            grad_norm,
            tau: step.tau,
            direction,
            psd,
            min_eigenvalue: min_eig,
            armijo_lhs: step.armijo_lhs,
            armijo_rhs: step.armijo_rhs,
        });
        trajectory.push(step.loss);
        theta = step.theta;
    }
}

/// Outcome of fitting the compressor to one pair.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: ThetaRaw,
    pub params: CompressorParams,
    pub loss: f64,
    pub loss_trajectory: Vec<f64>,
    pub grad_norm: f64,
    pub hessian: Hessian,
    pub status: FitStatus,
    pub iters: usize,
    pub curvature_retries: usize,
    pub log: Vec<IterationRecord>,
}

/// Fits the compressor parameters to `objective` starting from `theta_init`.
pub fn fit(objective: &Objective, theta_init: &ThetaRaw, opts: &NROptions) -> Result<FitResult> {
    if !theta_init.is_finite() {
        return Err(Error::InvalidArgument("initial parameters must be finite".into()));
    }
    let problem = CompressorProblem {
        objective,
        strategy: opts.strategy,
    };
    let m = minimize(&problem, &theta_init.to_array(), opts)?;
    let theta = ThetaRaw::from_slice(&m.x);
    let mut hessian = Hessian::zeros();
    for i in 0..5 {
        for j in 0..5 {
            hessian.matrix[i][j] = m.hessian[(i, j)];
        }
    }
    hessian.symmetrized = true;
    Ok(FitResult {
        params: constrain(&theta, objective.bounds(), objective.sample_rate()),
        theta,
        loss: m.loss,
        loss_trajectory: m.loss_trajectory,
        grad_norm: m.grad_norm,
        hessian,
        status: m.status,
        iters: m.iters,
        curvature_retries: m.curvature_retries,
        log: m.log,
    })
}

/// One link of a warm-start chain.
#[derive(Debug)]
pub struct ChainEntry {
    pub label: f64,
    /// Parameters the fit started from.
    pub init: ThetaRaw,
    pub result: Result<FitResult>,
}

/// Fits each entry in the given order, starting every fit from the previous
/// successful result. Failures are recorded and do not stop the chain.
pub fn fit_chain(entries: &[(f64, Objective)], theta_init: &ThetaRaw, opts: &NROptions) -> Vec<ChainEntry> {
    let mut init = *theta_init;
    let mut out = Vec::with_capacity(entries.len());
    for (label, objective) in entries {
        let result = fit(objective, &init, opts);
        let start = init;
        if let Ok(r) = &result {
            init = r.theta;
        }
        out.push(ChainEntry {
            label: *label,
            init: start,
            result,
        });
    }
    out
}

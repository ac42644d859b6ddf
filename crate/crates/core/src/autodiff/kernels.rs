//! Per-chunk derivative kernels.
//!
//! Notation inside this file follows the signal flow:
//! `sdb` is the static gain in dB, `gh` the gain before ballistics, `g` the
//! smoothed gain, `gp` its previous value, `an = 1 - beta` the active
//! coefficient, `act` the knee indicator (gain reduction active). Prefixes:
//! `v_` first-order adjoints, `d`/`d1`/`d2` tangents, `bar_` second-order
//! adjoints. Constrained parameters are indexed by `CT`, `GAMMA`, `RATIO`,
//! `AT`, `RT`. Branch indicators are held fixed.

use crate::compressor::{self, Constrained, ForwardTrace, ParamBounds, ThetaRaw, DB_SCALE};
use crate::metrics;
use crate::scan;

pub(crate) const CT: usize = 0;
pub(crate) const GAMMA: usize = 1;
pub(crate) const RATIO: usize = 2;
pub(crate) const AT: usize = 3;
pub(crate) const RT: usize = 4;

const K: f64 = DB_SCALE;

/// One evaluation chunk: input, (pre-emphasised) target and the start of the
/// region that enters the loss.
#[derive(Debug, Clone)]
pub(crate) struct Chunk {
    pub x: Vec<f64>,
    pub target: Vec<f64>,
    pub eval_start: usize,
    pub preemph: bool,
}

impl Chunk {
    pub fn filter(&self, v: &[f64]) -> Vec<f64> {
        if self.preemph {
            metrics::preemph(v)
        } else {
            v.to_vec()
        }
    }

    pub fn filter_adjoint(&self, v: &[f64]) -> Vec<f64> {
        if self.preemph {
            metrics::preemph_adjoint(v)
        } else {
            v.to_vec()
        }
    }

    /// `2·w·v` where `w` masks out the warm-up region.
    pub fn weighted(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(n, &r)| if n >= self.eval_start { 2.0 * r } else { 0.0 })
            .collect()
    }
}

/// Gain-computer quantities shared by every kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Knee {
    pub slope: f64,
    pub ir2: f64,
    pub ir3: f64,
}

impl Knee {
    fn new(c: &Constrained) -> Self {
        let r = c.ratio();
        Self {
            slope: 1.0 - 1.0 / r,
            ir2: 1.0 / (r * r),
            ir3: 1.0 / (r * r * r),
        }
    }
}

/// Forward pass of one chunk plus the loss residual.
pub(crate) struct Primal<'a> {
    pub chunk: &'a Chunk,
    pub c: Constrained,
    pub knee: Knee,
    pub trace: ForwardTrace,
    pub makeup: f64,
    pub over: Vec<f64>,
    pub act: Vec<f64>,
    pub resid: Vec<f64>,
    pub alpha: [f64; 2],
}

impl<'a> Primal<'a> {
    pub fn new(chunk: &'a Chunk, theta: &ThetaRaw, bounds: &ParamBounds, sr: u32, g_init: f64) -> Self {
        let c = Constrained::new(theta, bounds, sr);
        let levels = compressor::level_db(&chunk.x);
        let g_hat: Vec<f64> = levels
            .iter()
            .map(|&l| compressor::db_to_lin(compressor::static_gain_db(l, c.ct_db(), c.ratio())))
            .collect();
        let mut trace = compressor::ballistics(&g_hat, c.alpha_at(), c.alpha_rt(), g_init);
        trace.level_db = levels;
        Self::from_trace(chunk, c, trace)
    }

    /// Wraps a trace produced by a matching forward pass. Lengths must agree.
    pub fn from_trace(chunk: &'a Chunk, c: Constrained, trace: ForwardTrace) -> Self {
        let knee = Knee::new(&c);
        let makeup = compressor::db_to_lin(c.makeup_db());
        let over: Vec<f64> = trace.level_db.iter().map(|l| c.ct_db() - l).collect();
        let act = over
            .iter()
            .map(|o| if knee.slope * o < 0.0 { 1.0 } else { 0.0 })
            .collect();
        let y_hat: Vec<f64> = chunk
            .x
            .iter()
            .zip(&trace.g)
            .map(|(&xn, &g)| xn * g * makeup)
            .collect();
        let resid = chunk
            .filter(&y_hat)
            .iter()
            .zip(&chunk.target)
            .map(|(a, b)| a - b)
            .collect();
        Self {
            chunk,
            c,
            knee,
            trace,
            makeup,
            over,
            act,
            resid,
            alpha: [c.alpha_at(), c.alpha_rt()],
        }
    }

    pub fn len(&self) -> usize {
        self.trace.len()
    }

    pub fn loss(&self) -> f64 {
        self.resid[self.chunk.eval_start..]
            .iter()
            .map(|r| r * r)
            .sum()
    }

    /// Cotangent of the loss with respect to the compressor output.
    pub fn output_cotangent(&self) -> Vec<f64> {
        self.chunk.filter_adjoint(&self.chunk.weighted(&self.resid))
    }

    #[inline]
    fn an(&self, n: usize) -> f64 {
        if self.trace.zeta[n] {
            self.alpha[0]
        } else {
            self.alpha[1]
        }
    }

    #[inline]
    fn phase(&self, n: usize) -> usize {
        if self.trace.zeta[n] {
            AT
        } else {
            RT
        }
    }
}

/// First-order reverse pass.
pub(crate) struct Adjoint {
    pub cot_y: Vec<f64>,
    pub v_gt: Vec<f64>,
    pub v_gh: Vec<f64>,
    pub v_sdb: Vec<f64>,
    /// Gradient with respect to the constrained parameters.
    pub v_phi: [f64; 5],
    pub grad: [f64; 5],
}

pub(crate) fn backward(p: &Primal, cot_y: Vec<f64>) -> Adjoint {
    let n_len = p.len();
    let t = &p.trace;
    let x = &p.chunk.x;
    let m = p.makeup;
    let mut v_phi = [0.0; 5];

    let mut cg = Vec::with_capacity(n_len);
    for n in 0..n_len {
        cg.push(cot_y[n] * x[n] * m);
        v_phi[GAMMA] += cot_y[n] * x[n] * t.g[n];
    }
    v_phi[GAMMA] *= K * m;

    // Reversed-time one-pole filter with multiplier beta[n+1].
    let v_gt = scan::reversed_unchecked(&t.beta, &cg, 0.0);

    let mut v_gh = Vec::with_capacity(n_len);
    let mut v_sdb = Vec::with_capacity(n_len);
    for n in 0..n_len {
        let gh = t.g_hat[n];
        let v_beta = v_gt[n] * (t.g_prev(n) - gh);
        v_phi[p.phase(n)] -= v_beta;
        let vg = v_gt[n] * p.an(n);
        let vs = vg * gh * K * p.act[n];
        v_phi[CT] += vs * p.knee.slope;
        v_phi[RATIO] += vs * p.over[n] * p.knee.ir2;
        v_gh.push(vg);
        v_sdb.push(vs);
    }

    let mut grad = [0.0; 5];
    for i in 0..5 {
        grad[i] = p.c.d1[i] * v_phi[i];
    }
    Adjoint {
        cot_y,
        v_gt,
        v_gh,
        v_sdb,
        v_phi,
        grad,
    }
}

/// First-order forward tangents along one raw-parameter direction.
pub(crate) struct Tangent {
    pub dtheta: [f64; 5],
    pub dphi: [f64; 5],
    pub dsdb: Vec<f64>,
    pub dgh: Vec<f64>,
    pub dbeta: Vec<f64>,
    pub dg: Vec<f64>,
    pub dy: Vec<f64>,
}

impl Tangent {
    #[inline]
    fn dg_prev(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.dg[n - 1]
        }
    }
}

pub(crate) fn tangent(p: &Primal, dtheta: &[f64; 5]) -> Tangent {
    let n_len = p.len();
    let t = &p.trace;
    let mut dphi = [0.0; 5];
    for i in 0..5 {
        dphi[i] = p.c.d1[i] * dtheta[i];
    }
    let mut dsdb = Vec::with_capacity(n_len);
    let mut dgh = Vec::with_capacity(n_len);
    let mut dbeta = Vec::with_capacity(n_len);
    let mut input = Vec::with_capacity(n_len);
    for n in 0..n_len {
        let ds = p.act[n] * (p.knee.slope * dphi[CT] + p.over[n] * p.knee.ir2 * dphi[RATIO]);
        let dh = t.g_hat[n] * K * ds;
        let db = -dphi[p.phase(n)];
        input.push(p.an(n) * dh + db * (t.g_prev(n) - t.g_hat[n]));
        dsdb.push(ds);
        dgh.push(dh);
        dbeta.push(db);
    }
    // Same filter as the forward ballistics, fed with the tangent input.
    let dg = scan::forward_unchecked(&t.beta, &input, 0.0);
    let x = &p.chunk.x;
    let dy = (0..n_len)
        .map(|n| x[n] * p.makeup * (dg[n] + t.g[n] * K * dphi[GAMMA]))
        .collect();
    Tangent {
        dtheta: *dtheta,
        dphi,
        dsdb,
        dgh,
        dbeta,
        dg,
        dy,
    }
}

/// Forward-over-reverse: tangent of the gradient along `tan.dtheta`.
pub(crate) fn jvp_backward(p: &Primal, adj: &Adjoint, tan: &Tangent) -> [f64; 5] {
    let n_len = p.len();
    let t = &p.trace;
    let x = &p.chunk.x;
    let m = p.makeup;
    let dphi = &tan.dphi;
    let knee = p.knee;

    let dr = p.chunk.filter(&tan.dy);
    let dcot = p.chunk.filter_adjoint(&p.chunk.weighted(&dr));

    let mut dv_phi = [0.0; 5];
    let mut input = Vec::with_capacity(n_len);
    for n in 0..n_len {
        let cot = adj.cot_y[n];
        let dcg = dcot[n] * x[n] * m + cot * x[n] * m * K * dphi[GAMMA];
        dv_phi[GAMMA] +=
            x[n] * m * (dcot[n] * t.g[n] + cot * tan.dg[n] + cot * t.g[n] * K * dphi[GAMMA]);
        // One extra addition compared with the reverse-over-reverse pass.
        let carry = if n + 1 < n_len {
            tan.dbeta[n + 1] * adj.v_gt[n + 1]
        } else {
            0.0
        };
        input.push(dcg + carry);
    }
    dv_phi[GAMMA] *= K;
    let dv_gt = scan::reversed_unchecked(&t.beta, &input, 0.0);

    for n in 0..n_len {
        let gh = t.g_hat[n];
        let dv_beta = dv_gt[n] * (t.g_prev(n) - gh) + adj.v_gt[n] * (tan.dg_prev(n) - tan.dgh[n]);
        dv_phi[p.phase(n)] -= dv_beta;
        let dv_gh = dv_gt[n] * p.an(n) - adj.v_gt[n] * tan.dbeta[n];
        let dv_sdb = p.act[n] * K * (dv_gh * gh + adj.v_gh[n] * tan.dgh[n]);
        let vs = adj.v_sdb[n];
        dv_phi[CT] += dv_sdb * knee.slope + vs * dphi[RATIO] * knee.ir2;
        dv_phi[RATIO] += dv_sdb * p.over[n] * knee.ir2
            + vs * (dphi[CT] * knee.ir2 - 2.0 * p.over[n] * dphi[RATIO] * knee.ir3);
    }

    let mut out = [0.0; 5];
    for i in 0..5 {
        out[i] = p.c.d1[i] * dv_phi[i] + p.c.d2[i] * adj.v_phi[i] * tan.dtheta[i];
    }
    out
}

/// Reverse-over-reverse: `u^T` times the Jacobian of the gradient.
pub(crate) fn vjp_backward(p: &Primal, adj: &Adjoint, u: &[f64; 5]) -> [f64; 5] {
    let n_len = p.len();
    let t = &p.trace;
    let x = &p.chunk.x;
    let m = p.makeup;
    let knee = p.knee;

    let mut out = [0.0; 5];
    let mut ub = [0.0; 5];
    for i in 0..5 {
        ub[i] = p.c.d1[i] * u[i];
        out[i] = p.c.d2[i] * adj.v_phi[i] * u[i];
    }

    let mut bar_phi = [0.0; 5];
    let mut bar_gh = vec![0.0; n_len];
    let mut bar_beta = vec![0.0; n_len];
    let mut bar_g = vec![0.0; n_len];
    let mut bar_vgt = Vec::with_capacity(n_len);

    for n in 0..n_len {
        let gh = t.g_hat[n];
        let act = p.act[n];
        let over = p.over[n];
        let vs = adj.v_sdb[n];
        // Reverse of the gain-computer sums.
        let bar_vsdb = ub[CT] * knee.slope + ub[RATIO] * over * knee.ir2;
        bar_phi[RATIO] += vs * (ub[CT] * knee.ir2 - 2.0 * ub[RATIO] * over * knee.ir3);
        bar_phi[CT] += vs * ub[RATIO] * knee.ir2;
        let bar_vgh = bar_vsdb * gh * K * act;
        bar_gh[n] += bar_vsdb * adj.v_gh[n] * K * act;
        // v_gh = v_gt·(1 - beta)
        let mut bvgt = bar_vgh * p.an(n);
        bar_beta[n] -= bar_vgh * adj.v_gt[n];
        // v_beta = v_gt·(g[n-1] - gh), summed into the phase coefficient.
        let bar_vbeta = -ub[p.phase(n)];
        bvgt += bar_vbeta * (t.g_prev(n) - gh);
        if n > 0 {
            bar_g[n - 1] += bar_vbeta * adj.v_gt[n];
        }
        bar_gh[n] -= bar_vbeta * adj.v_gt[n];
        bar_vgt.push(bvgt);
    }

    // Forward-time filter on the second-order cotangents.
    let w = scan::forward_unchecked(&t.beta, &bar_vgt, 0.0);
    for n in 1..n_len {
        bar_beta[n] += w[n - 1] * adj.v_gt[n];
    }

    let mut bar_cot = Vec::with_capacity(n_len);
    let mut gamma_acc = 0.0;
    for n in 0..n_len {
        let cot = adj.cot_y[n];
        bar_cot.push(ub[GAMMA] * K * m * x[n] * t.g[n] + w[n] * x[n] * m);
        bar_g[n] += ub[GAMMA] * K * m * cot * x[n];
        gamma_acc += w[n] * cot * x[n] * m;
    }
    bar_phi[GAMMA] += ub[GAMMA] * K * adj.v_phi[GAMMA] + K * gamma_acc;

    // Through the output cotangent into the residual and the output.
    let bar_r = p.chunk.weighted(&p.chunk.filter(&bar_cot));
    let bar_y = p.chunk.filter_adjoint(&bar_r);
    let mut gamma_acc = 0.0;
    for n in 0..n_len {
        bar_g[n] += bar_y[n] * x[n] * m;
        gamma_acc += bar_y[n] * x[n] * t.g[n] * m;
    }
    bar_phi[GAMMA] += K * gamma_acc;

    reverse_ballistics(p, &bar_g, &mut bar_gh, &mut bar_beta);
    reverse_gain_path(p, &bar_gh, &bar_beta, &mut bar_phi);

    for i in 0..5 {
        out[i] += p.c.d1[i] * bar_phi[i];
    }
    out
}

/// Adjoint of the forward ballistics for a cotangent `bar_g` on `g`.
fn reverse_ballistics(p: &Primal, bar_g: &[f64], bar_gh: &mut [f64], bar_beta: &mut [f64]) {
    let t = &p.trace;
    let big_g = scan::reversed_unchecked(&t.beta, bar_g, 0.0);
    for n in 0..p.len() {
        bar_gh[n] += big_g[n] * p.an(n);
        bar_beta[n] += big_g[n] * (t.g_prev(n) - t.g_hat[n]);
    }
}

/// Adjoint of `beta(alpha)` and `gh(sdb(CT, R))`.
fn reverse_gain_path(p: &Primal, bar_gh: &[f64], bar_beta: &[f64], bar_phi: &mut [f64; 5]) {
    let t = &p.trace;
    for n in 0..p.len() {
        bar_phi[p.phase(n)] -= bar_beta[n];
        let bar_sdb = bar_gh[n] * t.g_hat[n] * K * p.act[n];
        bar_phi[CT] += bar_sdb * p.knee.slope;
        bar_phi[RATIO] += bar_sdb * p.over[n] * p.knee.ir2;
    }
}

/// Reverse-over-forward: gradient of `<grad L, e>` where the inner product
/// is produced by a forward-mode pass.
pub(crate) fn rev_over_fwd(p: &Primal, tan: &Tangent) -> [f64; 5] {
    let n_len = p.len();
    let t = &p.trace;
    let x = &p.chunk.x;
    let m = p.makeup;
    let knee = p.knee;
    let dphi = &tan.dphi;

    // Inner forward pass ends in D = sum 2·w·r·P(dy).
    let dr = p.chunk.filter(&tan.dy);
    let bar_dy = p.chunk.filter_adjoint(&p.chunk.weighted(&p.resid));
    let bar_r = p.chunk.weighted(&dr);

    let mut bar_phi = [0.0; 5];
    let mut bar_dphi = [0.0; 5];
    let mut bar_g = vec![0.0; n_len];
    let mut bar_gh = vec![0.0; n_len];
    let mut bar_beta = vec![0.0; n_len];

    // dy = x·m·(dg + g·K·dgamma)
    let mut bar_dg = Vec::with_capacity(n_len);
    for n in 0..n_len {
        let s = bar_dy[n] * x[n] * m;
        bar_dg.push(s);
        bar_g[n] += s * K * dphi[GAMMA];
        bar_phi[GAMMA] += K * s * (tan.dg[n] + t.g[n] * K * dphi[GAMMA]);
        bar_dphi[GAMMA] += K * s * t.g[n];
    }

    // dg[n] = input[n] + beta[n]·dg[n-1]
    let big_dg = scan::reversed_unchecked(&t.beta, &bar_dg, 0.0);
    for n in 0..n_len {
        let gh = t.g_hat[n];
        let gd = big_dg[n];
        bar_beta[n] += gd * tan.dg_prev(n);
        // input = an·dgh + dbeta·(g[n-1] - gh)
        let bar_dgh = gd * p.an(n);
        bar_beta[n] -= gd * tan.dgh[n];
        let bar_dbeta = gd * (t.g_prev(n) - gh);
        if n > 0 {
            bar_g[n - 1] += gd * tan.dbeta[n];
        }
        bar_gh[n] -= gd * tan.dbeta[n];
        bar_dphi[p.phase(n)] -= bar_dbeta;
        // dgh = gh·K·dsdb
        bar_gh[n] += bar_dgh * K * tan.dsdb[n];
        let bar_dsdb = bar_dgh * gh * K * p.act[n];
        bar_dphi[CT] += bar_dsdb * knee.slope;
        bar_dphi[RATIO] += bar_dsdb * p.over[n] * knee.ir2;
        bar_phi[CT] += bar_dsdb * dphi[RATIO] * knee.ir2;
        bar_phi[RATIO] +=
            bar_dsdb * (dphi[CT] * knee.ir2 - 2.0 * p.over[n] * dphi[RATIO] * knee.ir3);
    }

    // Primal path through the residual.
    let bar_y = p.chunk.filter_adjoint(&bar_r);
    let mut gamma_acc = 0.0;
    for n in 0..n_len {
        bar_g[n] += bar_y[n] * x[n] * m;
        gamma_acc += bar_y[n] * x[n] * t.g[n] * m;
    }
    bar_phi[GAMMA] += K * gamma_acc;

    reverse_ballistics(p, &bar_g, &mut bar_gh, &mut bar_beta);
    reverse_gain_path(p, &bar_gh, &bar_beta, &mut bar_phi);

    let mut out = [0.0; 5];
    for i in 0..5 {
        out[i] = p.c.d1[i] * bar_phi[i] + p.c.d2[i] * tan.dtheta[i] * bar_dphi[i];
    }
    out
}

/// Forward-over-forward: `e_i^T H e_j` by propagating second-order tangents.
/// `fy1`/`fy2` are the filtered first-order output tangents.
pub(crate) fn fwd_over_fwd(
    p: &Primal,
    t1: &Tangent,
    t2: &Tangent,
    fy1: &[f64],
    fy2: &[f64],
) -> f64 {
    let n_len = p.len();
    let t = &p.trace;
    let x = &p.chunk.x;
    let knee = p.knee;
    let (a, b) = (&t1.dphi, &t2.dphi);
    let mut d12phi = [0.0; 5];
    for i in 0..5 {
        d12phi[i] = p.c.d2[i] * t1.dtheta[i] * t2.dtheta[i];
    }

    let mut input = Vec::with_capacity(n_len);
    for n in 0..n_len {
        let over = p.over[n];
        let d12sdb = p.act[n]
            * ((a[RATIO] * b[CT] + a[CT] * b[RATIO]) * knee.ir2
                - 2.0 * over * a[RATIO] * b[RATIO] * knee.ir3
                + knee.slope * d12phi[CT]
                + over * knee.ir2 * d12phi[RATIO]);
        let gh = t.g_hat[n];
        let d12gh = gh * K * (d12sdb + K * t1.dsdb[n] * t2.dsdb[n]);
        let d12beta = -d12phi[p.phase(n)];
        input.push(
            p.an(n) * d12gh
                + d12beta * (t.g_prev(n) - gh)
                + t1.dbeta[n] * (t2.dg_prev(n) - t2.dgh[n])
                + t2.dbeta[n] * (t1.dg_prev(n) - t1.dgh[n]),
        );
    }
    let d12g = scan::forward_unchecked(&t.beta, &input, 0.0);
    let d12y: Vec<f64> = (0..n_len)
        .map(|n| {
            x[n] * p.makeup
                * (d12g[n]
                    + K * (t1.dg[n] * b[GAMMA] + t2.dg[n] * a[GAMMA])
                    + K * t.g[n] * d12phi[GAMMA]
                    + K * K * t.g[n] * a[GAMMA] * b[GAMMA])
        })
        .collect();
    let fy12 = p.chunk.filter(&d12y);
    (p.chunk.eval_start..n_len)
        .map(|n| 2.0 * (fy1[n] * fy2[n] + p.resid[n] * fy12[n]))
        .sum()
}

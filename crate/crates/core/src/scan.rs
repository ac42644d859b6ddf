//! First-order linear recurrences `y[n] = b[n] + a[n]·y[n-1]`.
//!
//! Every one-pole filter in the toolkit (ballistics tangents and adjoints,
//! pre-emphasis and its adjoint, RMS envelopes) reduces to this recurrence.
//! Each step is an affine map `y -> a·y + b`, and affine maps compose
//! associatively, so the whole sequence can be evaluated by a work-efficient
//! Blelloch scan (up-sweep then down-sweep) in `O(n)` work and `O(log n)`
//! depth. Short inputs fall back to the sequential loop.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Inputs shorter than this are evaluated sequentially.
pub const PARALLEL_THRESHOLD: usize = 4096;

/// Levels with fewer node pairs than this run on the calling thread.
const MIN_PAIRS_PER_PARALLEL_LEVEL: usize = 2048;

/// The affine map `y -> a·y + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineElem {
    pub a: f64,
    pub b: f64,
}

impl AffineElem {
    pub const IDENTITY: AffineElem = AffineElem { a: 1.0, b: 0.0 };

    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    #[inline]
    pub fn apply(self, y: f64) -> f64 {
        self.b + self.a * y
    }
}

/// Map equivalent to applying `first` and then `then`.
#[inline]
pub fn affine_compose(first: AffineElem, then: AffineElem) -> AffineElem {
    AffineElem {
        a: then.a * first.a,
        b: then.a * first.b + then.b,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScanOptions {
    /// Inputs with fewer elements take the sequential path.
    pub min_parallel_len: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            min_parallel_len: PARALLEL_THRESHOLD,
        }
    }
}

/// Instrumentation for one scan call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanStats {
    /// Number of element-parallel phases issued (up-sweep levels, down-sweep
    /// levels and the final application). Zero on the sequential path.
    pub phases: usize,
    /// Length after padding to a power of two.
    pub padded_len: usize,
    pub elapsed: Duration,
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// Reference loop: `y[n] = b[n] + a[n]·y[n-1]` with `y[-1] = y_init`.
pub fn linrec_sequential(a: &[f64], b: &[f64], y_init: f64) -> Result<Vec<f64>> {
    check_lengths(a, b)?;
    Ok(sequential_unchecked(a, b, y_init))
}

pub(crate) fn sequential_unchecked(a: &[f64], b: &[f64], y_init: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    let mut y = y_init;
    for (&an, &bn) in a.iter().zip(b) {
        y = bn + an * y;
        out.push(y);
    }
    out
}

/// Same contract as [`linrec_sequential`], evaluated by parallel scan when the
/// input is long enough.
pub fn linrec_scan(a: &[f64], b: &[f64], y_init: f64) -> Result<Vec<f64>> {
    linrec_scan_with(a, b, y_init, &ScanOptions::default()).map(|(y, _)| y)
}

pub fn linrec_scan_with(
    a: &[f64],
    b: &[f64],
    y_init: f64,
    opts: &ScanOptions,
) -> Result<(Vec<f64>, ScanStats)> {
    check_lengths(a, b)?;
    let start = Instant::now();
    if a.len() < opts.min_parallel_len.max(1) {
        let y = sequential_unchecked(a, b, y_init);
        let stats = ScanStats {
            phases: 0,
            padded_len: a.len(),
            elapsed: start.elapsed(),
        };
        return Ok((y, stats));
    }
    let (y, mut stats) = blelloch(a, b, y_init);
    stats.elapsed = start.elapsed();
    Ok((y, stats))
}

fn blelloch(a: &[f64], b: &[f64], y_init: f64) -> (Vec<f64>, ScanStats) {
    let n = a.len();
    let padded = n.next_power_of_two();
    let mut tree: Vec<AffineElem> = Vec::with_capacity(padded);
    tree.extend(a.iter().zip(b).map(|(&a, &b)| AffineElem { a, b }));
    tree.resize(padded, AffineElem::IDENTITY);

    let mut phases = 0;

    // Up-sweep: each right node becomes the composition of its subtree.
    let mut stride = 1;
    while stride < padded {
        let width = 2 * stride;
        let op = |pair: &mut [AffineElem]| {
            pair[width - 1] = affine_compose(pair[stride - 1], pair[width - 1]);
        };
        if padded / width >= MIN_PAIRS_PER_PARALLEL_LEVEL {
            tree.par_chunks_mut(width).for_each(op);
        } else {
            tree.chunks_mut(width).for_each(op);
        }
        phases += 1;
        stride = width;
    }

    // Down-sweep to an exclusive prefix: each node receives the composition of
    // everything to its left.
    tree[padded - 1] = AffineElem::IDENTITY;
    let mut stride = padded / 2;
    while stride >= 1 {
        let width = 2 * stride;
        let op = |pair: &mut [AffineElem]| {
            let left = pair[stride - 1];
            let parent = pair[width - 1];
            pair[stride - 1] = parent;
            pair[width - 1] = affine_compose(parent, left);
        };
        if padded / width >= MIN_PAIRS_PER_PARALLEL_LEVEL {
            tree.par_chunks_mut(width).for_each(op);
        } else {
            tree.chunks_mut(width).for_each(op);
        }
        phases += 1;
        stride /= 2;
    }

    // Inclusive prefix applied to the initial state.
    let mut y = vec![0.0; n];
    y.par_iter_mut()
        .zip(tree[..n].par_iter())
        .zip(a.par_iter().zip(b.par_iter()))
        .for_each(|((out, prefix), (&an, &bn))| {
            let incl = affine_compose(*prefix, AffineElem { a: an, b: bn });
            *out = incl.apply(y_init);
        });
    phases += 1;

    (
        y,
        ScanStats {
            phases,
            padded_len: padded,
            elapsed: Duration::ZERO,
        },
    )
}

/// Reversed-time recurrence `y[n] = b[n] + a[n+1]·y[n+1]`.
///
/// The multiplier applied at step `n` is the one stored at `n + 1`, matching
/// the adjoint of the forward recurrence. The carried state `y_init` enters
/// the last sample unscaled: `y[N-1] = b[N-1] + y_init`.
pub fn linrec_reversed(a: &[f64], b: &[f64], y_init: f64) -> Result<Vec<f64>> {
    check_lengths(a, b)?;
    Ok(reversed_unchecked(a, b, y_init))
}

pub(crate) fn reversed_unchecked(a: &[f64], b: &[f64], y_init: f64) -> Vec<f64> {
    let n = a.len();
    if n == 0 {
        return Vec::new();
    }
    let mut ra = Vec::with_capacity(n);
    ra.push(1.0);
    ra.extend(a[1..].iter().rev());
    let rb: Vec<f64> = b.iter().rev().copied().collect();
    let mut y = forward_unchecked(&ra, &rb, y_init);
    y.reverse();
    y
}

/// Forward recurrence, scanning when long enough. Lengths must already match.
pub(crate) fn forward_unchecked(a: &[f64], b: &[f64], y_init: f64) -> Vec<f64> {
    if a.len() < PARALLEL_THRESHOLD {
        sequential_unchecked(a, b, y_init)
    } else {
        blelloch(a, b, y_init).0
    }
}

/// Constant-coefficient variant used by the fixed filters.
pub(crate) fn forward_const(a: f64, b: &[f64], y_init: f64) -> Vec<f64> {
    let coeffs = vec![a; b.len()];
    forward_unchecked(&coeffs, b, y_init)
}

pub(crate) fn reversed_const(a: f64, b: &[f64], y_init: f64) -> Vec<f64> {
    let coeffs = vec![a; b.len()];
    reversed_unchecked(&coeffs, b, y_init)
}

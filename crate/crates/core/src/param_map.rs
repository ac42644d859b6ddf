//! Fitted settings per device label, interpolation between them, and the
//! leave-out evaluation of interpolated renders.
//!
//! Each parameter is interpolated in its own space: dB for threshold and
//! make-up gain, log-milliseconds for attack and release, linear for ratio.
//!
//! Maps are stored as TOML:
//!
//! ```toml
//! version = 1
//! sample_rate = 44100
//! interp = "linear"          # or "cubic_spline"
//!
//! [bounds]
//! ratio = [1.0, 20.0]
//! attack_ms = [0.1, 100.0]
//! release_ms = [10.0, 1000.0]
//!
//! [[entries]]
//! label = 100.0
//! mode = "compressor"
//! fit_loss = 1.5e-3
//! fit_esr = 0.012
//! [entries.params]
//! ct_db = -31.2
//! # ratio, attack_ms, release_ms, makeup_db, alpha_at, alpha_rt
//! ```
//!
//! Unknown fields are rejected. Floats are written in shortest round-trip
//! form, so loading a saved map gives back identical values.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compressor::{compress_params, CompressorParams, ParamBounds, DEFAULT_G_INIT};
use crate::error::{Error, Result};
use crate::metrics;
use crate::signal::{AudioBuffer, AudioPair};

pub const MAP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    #[default]
    Linear,
    CubicSpline,
}

impl Interp {
    pub const ALL: [Interp; 2] = [Interp::Linear, Interp::CubicSpline];

    pub fn name(self) -> &'static str {
        match self {
            Interp::Linear => "linear",
            Interp::CubicSpline => "cubic_spline",
        }
    }
}

impl fmt::Display for Interp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Interp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Interp::Linear),
            "cubic_spline" | "spline" => Ok(Interp::CubicSpline),
            other => Err(Error::InvalidArgument(format!("unknown interpolation {other:?}"))),
        }
    }
}

/// Natural cubic spline through `(xs[i], ys[i])`.
#[derive(Debug, Clone)]
pub struct NaturalSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    /// `xs` must be strictly increasing, with at least two knots.
    pub fn new(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(Error::InvalidArgument(format!(
                "spline needs >= 2 matching knots, got {} x and {} y",
                n,
                ys.len()
            )));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("spline knots must be strictly increasing".into()));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations
            // h[i-1] m[i-1] + 2(h[i-1] + h[i]) m[i] + h[i] m[i+1] = 6 (s[i] - s[i-1]).
            let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
            let s: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for j in 0..k {
                let i = j + 1;
                diag[j] = 2.0 * (h[i - 1] + h[i]);
                rhs[j] = 6.0 * (s[i] - s[i - 1]);
            }
            for j in 1..k {
                let w = h[j] / diag[j - 1];
                diag[j] -= w * h[j];
                rhs[j] -= w * rhs[j - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for j in (0..k - 1).rev() {
                m[j + 1] = (rhs[j] - h[j + 1] * m[j + 2]) / diag[j];
            }
        }
        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            m,
        })
    }

    fn segment(&self, x: f64) -> usize {
        let last = self.xs.len() - 2;
        self.xs[1..].partition_point(|&k| k < x).min(last)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let h = x1 - x0;
        let (a, b) = (x1 - x, x - x0);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        m0 * a * a * a / (6.0 * h)
            + m1 * b * b * b / (6.0 * h)
            + (self.ys[i] - m0 * h * h / 6.0) * a / h
            + (self.ys[i + 1] - m1 * h * h / 6.0) * b / h
    }

    /// Second derivatives at the knots (zero at both ends).
    pub fn knot_curvatures(&self) -> &[f64] {
        &self.m
    }
}

/// Piecewise-linear interpolation over strictly increasing `xs`.
pub fn linear_interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let last = xs.len() - 2;
    let i = xs[1..].partition_point(|&k| k < x).min(last);
    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + t * (ys[i + 1] - ys[i])
}

/// Parameters in the space they are interpolated in:
/// `[ct_db, makeup_db, ratio, ln attack_ms, ln release_ms]`.
pub fn to_interp_space(p: &CompressorParams) -> [f64; 5] {
    [p.ct_db, p.makeup_db, p.ratio, p.attack_ms.ln(), p.release_ms.ln()]
}

/// Inverse of [`to_interp_space`]; ratio and times are clamped into `bounds`
/// in case a spline overshoots.
pub fn from_interp_space(v: [f64; 5], bounds: &ParamBounds, sample_rate: u32) -> CompressorParams {
    let clamp = |x: f64, [lo, hi]: [f64; 2]| x.clamp(lo, hi);
    CompressorParams::from_times(
        v[0],
        clamp(v[2], bounds.ratio),
        clamp(v[3].exp(), bounds.attack_ms),
        clamp(v[4].exp(), bounds.release_ms),
        v[1],
        sample_rate,
    )
}

/// Interpolates settings over `(label, params)` knots sorted by label.
pub fn interpolate_knots(
    knots: &[(f64, CompressorParams)],
    label: f64,
    method: Interp,
    bounds: &ParamBounds,
    sample_rate: u32,
) -> Result<CompressorParams> {
    if let Some((_, p)) = knots.iter().find(|(l, _)| *l == label) {
        return Ok(*p);
    }
    if knots.len() < 2 {
        return Err(Error::InsufficientKnots {
            mode: String::new(),
            have: knots.len(),
        });
    }
    let lo = knots[0].0;
    let hi = knots[knots.len() - 1].0;
    if !(label >= lo && label <= hi) {
        return Err(Error::LabelOutOfRange { label, lo, hi });
    }
    let xs: Vec<f64> = knots.iter().map(|(l, _)| *l).collect();
    let reps: Vec<[f64; 5]> = knots.iter().map(|(_, p)| to_interp_space(p)).collect();
    let mut out = [0.0; 5];
    for (k, slot) in out.iter_mut().enumerate() {
        let ys: Vec<f64> = reps.iter().map(|r| r[k]).collect();
        *slot = match method {
            Interp::Linear => linear_interp(&xs, &ys, label),
            Interp::CubicSpline => NaturalSpline::new(&xs, &ys)?.eval(label),
        };
    }
    Ok(from_interp_space(out, bounds, sample_rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapEntry {
    pub label: f64,
    pub mode: String,
    pub fit_loss: f64,
    pub fit_esr: f64,
    pub params: CompressorParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMap {
    pub sample_rate: u32,
    pub interp: Interp,
    pub bounds: ParamBounds,
    pub entries: Vec<MapEntry>,
}

/// On-disk layout: the map plus a format version.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    version: u32,
    sample_rate: u32,
    #[serde(default)]
    interp: Interp,
    bounds: ParamBounds,
    #[serde(default)]
    entries: Vec<MapEntry>,
}

impl ParameterMap {
    pub fn new(sample_rate: u32, bounds: ParamBounds, interp: Interp) -> Self {
        Self {
            sample_rate,
            interp,
            bounds,
            entries: Vec::new(),
        }
    }

    /// Adds or replaces the entry for `(mode, label)`, keeping entries sorted.
    pub fn insert(&mut self, entry: MapEntry) {
        self.entries
            .retain(|e| !(e.mode == entry.mode && e.label == entry.label));
        self.entries.push(entry);
        self.sort();
    }

    fn sort(&mut self) {
        self.entries
            .sort_by(|a, b| a.mode.cmp(&b.mode).then(a.label.total_cmp(&b.label)));
    }

    pub fn modes(&self) -> Vec<&str> {
        let mut m: Vec<&str> = self.entries.iter().map(|e| e.mode.as_str()).collect();
        m.dedup();
        m
    }

    /// Entries of one mode, sorted by label.
    pub fn entries_for(&self, mode: &str) -> Vec<&MapEntry> {
        self.entries.iter().filter(|e| e.mode == mode).collect()
    }

    /// Copy without the given labels in `mode`.
    pub fn without_labels(&self, mode: &str, labels: &[f64]) -> Self {
        let mut m = self.clone();
        m.entries
            .retain(|e| !(e.mode == mode && labels.contains(&e.label)));
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate must be positive".into()));
        }
        for w in self.entries.windows(2) {
            if w[0].mode == w[1].mode && w[0].label == w[1].label {
                return Err(Error::DuplicateLabel {
                    label: w[0].label,
                    mode: w[0].mode.clone(),
                });
            }
        }
        for e in &self.entries {
            if !e.label.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite label in mode {:?}", e.mode)));
            }
            let p = &e.params;
            let checks: [(&'static str, f64, [f64; 2]); 3] = [
                ("ratio", p.ratio, self.bounds.ratio),
                ("attack_ms", p.attack_ms, self.bounds.attack_ms),
                ("release_ms", p.release_ms, self.bounds.release_ms),
            ];
            for (name, value, [lo, hi]) in checks {
                if !(value >= lo && value <= hi) {
                    return Err(Error::OutOfBounds { name, value, lo, hi });
                }
            }
        }
        Ok(())
    }
}

/// Settings for `label` in `mode` using the map's interpolation method.
pub fn interpolate(map: &ParameterMap, mode: &str, label: f64) -> Result<CompressorParams> {
    interpolate_with(map, mode, label, map.interp)
}

pub fn interpolate_with(map: &ParameterMap, mode: &str, label: f64, method: Interp) -> Result<CompressorParams> {
    let knots: Vec<(f64, CompressorParams)> = map
        .entries_for(mode)
        .into_iter()
        .map(|e| (e.label, e.params))
        .collect();
    if knots.is_empty() {
        return Err(Error::UnknownMode(mode.to_string()));
    }
    interpolate_knots(&knots, label, method, &map.bounds, map.sample_rate).map_err(|e| match e {
        Error::InsufficientKnots { have, .. } => Error::InsufficientKnots {
            mode: mode.to_string(),
            have,
        },
        other => other,
    })
}

/// Compresses `x` with the interpolated settings for `label`.
pub fn render(map: &ParameterMap, mode: &str, label: f64, x: &AudioBuffer) -> Result<AudioBuffer> {
    render_with(map, mode, label, x, map.interp)
}

pub fn render_with(
    map: &ParameterMap,
    mode: &str,
    label: f64,
    x: &AudioBuffer,
    method: Interp,
) -> Result<AudioBuffer> {
    if x.sample_rate != map.sample_rate {
        return Err(Error::RateMismatch(map.sample_rate, x.sample_rate));
    }
    let params = interpolate_with(map, mode, label, method)?;
    let (y, _) = compress_params(&x.samples, &params, DEFAULT_G_INIT);
    AudioBuffer::new(y, x.sample_rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpEvalRow {
    pub label: f64,
    pub method: Interp,
    pub esr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpEval {
    pub rows: Vec<InterpEvalRow>,
}

impl InterpEval {
    /// Mean ESR for one method, `None` if it has no rows.
    pub fn mean_esr(&self, method: Interp) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.esr)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Leave-out evaluation: every held-out label is removed from the map, its
/// settings are interpolated from the remaining knots with each method, and
/// the render of the corpus input is scored against the corpus target with
/// pre-emphasised ESR.
pub fn interp_eval(
    map: &ParameterMap,
    mode: &str,
    held_out: &[f64],
    corpus: &[(f64, AudioPair)],
) -> Result<InterpEval> {
    let reduced = map.without_labels(mode, held_out);
    let mut rows = Vec::with_capacity(2 * held_out.len());
    for &label in held_out {
        let (_, pair) = corpus
            .iter()
            .find(|(l, _)| *l == label)
            .ok_or_else(|| Error::InvalidArgument(format!("held-out label {label} has no audio in the corpus")))?;
        for method in Interp::ALL {
            let y_hat = render_with(&reduced, mode, label, &pair.input, method)?;
            let esr = metrics::esr_preemph(&pair.target.samples, &y_hat.samples)?;
            rows.push(InterpEvalRow { label, method, esr });
        }
    }
    Ok(InterpEval { rows })
}

pub fn map_to_string(map: &ParameterMap) -> Result<String> {
    let file = MapFile {
        version: MAP_VERSION,
        sample_rate: map.sample_rate,
        interp: map.interp,
        bounds: map.bounds,
        entries: map.entries.clone(),
    };
    toml::to_string(&file).map_err(|e| Error::InvalidArgument(format!("cannot serialise map: {e}")))
}

/// Parses a map; `origin` names the source in error messages.
pub fn map_from_str(text: &str, origin: &Path) -> Result<ParameterMap> {
    let parse_err = |message: String| Error::Parse {
        path: origin.to_path_buf(),
        message,
    };
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
    match table.get("version").and_then(|v| v.as_integer()) {
        Some(v) if v == MAP_VERSION as i64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                expected: MAP_VERSION,
            })
        }
        None => return Err(parse_err("missing integer field `version`".into())),
    }
    let file: MapFile = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let mut map = ParameterMap {
        sample_rate: file.sample_rate,
        interp: file.interp,
        bounds: file.bounds,
        entries: file.entries,
    };
    map.sort();
    map.validate()?;
    Ok(map)
}

pub fn save_map(path: impl AsRef<Path>, map: &ParameterMap) -> Result<()> {
    let path = path.as_ref();
    let text = map_to_string(map)?;
    std::fs::write(path, text).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_map(path: impl AsRef<Path>) -> Result<ParameterMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    map_from_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SR: u32 = 44100;

    fn params(ct: f64, ratio: f64, at: f64, rt: f64, mk: f64) -> CompressorParams {
        CompressorParams::from_times(ct, ratio, at, rt, mk, SR)
    }

    fn sample_map() -> ParameterMap {
        let mut m = ParameterMap::new(SR, ParamBounds::default(), Interp::Linear);
        for (i, label) in [40.0, 60.0, 80.0, 100.0].into_iter().enumerate() {
            let f = i as f64;
            m.insert(MapEntry {
                label,
                mode: "compressor".into(),
                fit_loss: 1e-3 * (f + 1.0),
                fit_esr: 0.01 + 0.003 * f,
                params: params(-20.0 - 4.0 * f, 2.0 + f, 1.0 + 3.0 * f, 80.0 * (f + 1.0), 1.0 + 0.7 * f),
            });
        }
        m
    }

    #[test]
    fn spline_three_knot_example() {
        let s = NaturalSpline::new(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((s.eval(0.5) - 0.6875).abs() < 1e-15);
        assert!((s.eval(1.5) - 0.6875).abs() < 1e-15);
        assert_eq!(s.knot_curvatures(), &[0.0, -3.0, 0.0]);
    }

    #[test]
    fn spline_curvature_continuous() {
        let xs = [40.0, 47.0, 60.0, 71.0, 85.0, 100.0];
        let ys = [1.0, -0.5, 2.0, 3.5, 0.2, 1.1];
        let s = NaturalSpline::new(&xs, &ys).unwrap();
        // One-sided second differences, Richardson-extrapolated to drop the
        // O(h) third-derivative term (exact on each cubic piece).
        let left = |k: f64, h: f64| (s.eval(k) - 2.0 * s.eval(k - h) + s.eval(k - 2.0 * h)) / (h * h);
        let right = |k: f64, h: f64| (s.eval(k + 2.0 * h) - 2.0 * s.eval(k + h) + s.eval(k)) / (h * h);
        let h = 0.01;
        for &k in &xs[1..xs.len() - 1] {
            let l = 2.0 * left(k, h) - left(k, 2.0 * h);
            let r = 2.0 * right(k, h) - right(k, 2.0 * h);
            assert!((l - r).abs() <= 1e-6 * l.abs().max(r.abs()), "knot {k}: {l} vs {r}");
        }
    }

    #[test]
    fn interpolants_hit_knots() {
        let m = sample_map();
        for e in m.entries_for("compressor") {
            for method in Interp::ALL {
                assert_eq!(interpolate_with(&m, "compressor", e.label, method).unwrap(), e.params);
            }
        }
        // Same property on the raw interpolants, without the short-cut.
        let xs = [0.0, 1.5, 2.0, 4.0];
        let ys = [3.0, -1.0, 0.25, 8.0];
        let s = NaturalSpline::new(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((s.eval(*x) - y).abs() < 1e-14);
            assert_eq!(linear_interp(&xs, &ys, *x), *y);
        }
    }

    #[test]
    fn linear_midpoint_is_mean_in_interp_space() {
        let m = sample_map();
        let a = to_interp_space(&m.entries[0].params);
        let b = to_interp_space(&m.entries[1].params);
        let mid = to_interp_space(&interpolate(&m, "compressor", 50.0).unwrap());
        for k in 0..5 {
            assert!((mid[k] - 0.5 * (a[k] + b[k])).abs() < 1e-12, "component {k}");
        }
        let p = interpolate(&m, "compressor", 50.0).unwrap();
        assert!((p.attack_ms - (1.0f64 * 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn interpolation_errors() {
        let m = sample_map();
        assert!(matches!(interpolate(&m, "limiter", 50.0), Err(Error::UnknownMode(_))));
        assert!(matches!(interpolate(&m, "compressor", 30.0), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(interpolate(&m, "compressor", 101.0), Err(Error::LabelOutOfRange { .. })));
        let single = m.without_labels("compressor", &[60.0, 80.0, 100.0]);
        assert!(matches!(
            interpolate(&single, "compressor", 50.0),
            Err(Error::InsufficientKnots { have: 1, .. })
        ));
    }

    #[test]
    fn render_silence_and_knots() {
        let m = sample_map();
        let silence = AudioBuffer::new(vec![0.0; 256], SR).unwrap();
        assert!(render(&m, "compressor", 70.0, &silence).unwrap().samples.iter().all(|&v| v == 0.0));
        let x = AudioBuffer::new((0..500).map(|i| (i as f64 * 0.05).sin() * 0.7).collect(), SR).unwrap();
        let at_knot = render(&m, "compressor", 60.0, &x).unwrap();
        let (direct, _) = compress_params(&x.samples, &m.entries[1].params, 1.0);
        assert_eq!(at_knot.samples, direct);
        let other_rate = AudioBuffer::new(vec![0.1; 10], 48000).unwrap();
        assert!(matches!(render(&m, "compressor", 60.0, &other_rate), Err(Error::RateMismatch(..))));
    }

    #[test]
    fn round_trip_exact() {
        let mut m = sample_map();
        m.interp = Interp::CubicSpline;
        m.entries[0].params.ct_db = -20.123456789012345;
        m.entries[1].fit_loss = 1.0 / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.toml");
        save_map(&path, &m).unwrap();
        assert_eq!(load_map(&path).unwrap(), m);
    }

    #[test]
    fn strict_parsing() {
        let m = sample_map();
        let text = map_to_string(&m).unwrap();
        let origin = Path::new("map.toml");

        let truncated = &text[..text.len() / 2];
        match map_from_str(truncated, origin) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("line"), "{message}"),
            other => panic!("expected parse error, got {other:?}"),
        }

        let extra = text.replacen("fit_esr", "colour = 3\nfit_esr", 1);
        match map_from_str(&extra, origin) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("colour"), "{message}"),
            other => panic!("expected parse error, got {other:?}"),
        }

        let future = text.replacen("version = 1", "version = 2", 1);
        assert!(matches!(map_from_str(&future, origin), Err(Error::Version { found: 2, .. })));

        let dup = text.replacen("label = 60.0", "label = 40.0", 1);
        assert!(matches!(map_from_str(&dup, origin), Err(Error::DuplicateLabel { .. })));
    }

    #[test]
    fn leave_out_semantics() {
        let m = sample_map();
        let x = AudioBuffer::new((0..2000).map(|i| (i as f64 * 0.01).sin() * 0.8).collect(), SR).unwrap();
        let truth = render(&m, "compressor", 60.0, &x).unwrap();
        let corpus = vec![(60.0, AudioPair { input: x, target: truth })];
        assert!(interp_eval(&m, "compressor", &[], &corpus).unwrap().rows.is_empty());
        let ev = interp_eval(&m, "compressor", &[60.0], &corpus).unwrap();
        assert_eq!(ev.rows.len(), 2);
        // The knot itself was removed, so the render no longer matches exactly.
        assert!(ev.rows.iter().all(|r| r.esr > 0.0));
        assert!(ev.mean_esr(Interp::Linear).is_some());
    }

    proptest! {
        #[test]
        fn linear_monotone_between_knots(y0 in -50.0f64..50.0, y1 in -50.0f64..50.0, t in 0.0f64..1.0) {
            let v = linear_interp(&[10.0, 20.0], &[y0, y1], 10.0 + 10.0 * t);
            prop_assert!(v >= y0.min(y1) - 1e-12 && v <= y0.max(y1) + 1e-12);
        }
    }
}

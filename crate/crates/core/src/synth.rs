//! Synthetic paired corpora with known ground-truth settings.
//!
//! Each label gets its own seeded stimulus `x` and the target
//! `y = compress(x, θ*(label))`, where `θ*` follows a smooth curve through a
//! few knots (natural spline in the map's interpolation space). Stimuli move
//! across the threshold in both directions so attack and release are both
//! exercised.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressor::{compress_params, unconstrain, CompressorParams, ParamBounds, ThetaRaw, DEFAULT_G_INIT};
use crate::error::{Error, Result};
use crate::metrics::LdrOptions;
use crate::param_map::{interpolate_knots, Interp};
use crate::signal::{load_wav, pair_validate, save_wav, AudioBuffer, AudioPair};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stimulus {
    /// White-noise segments alternating between loud and quiet levels.
    NoiseBursts,
    /// Sine carrier with a slow, deep amplitude modulation.
    AmTone,
    /// Tone plus noise at piecewise-constant levels.
    StepEnvelope,
    /// Sections of the other three, back to back.
    Mixed,
}

impl Stimulus {
    pub fn name(self) -> &'static str {
        match self {
            Stimulus::NoiseBursts => "noise_bursts",
            Stimulus::AmTone => "am_tone",
            Stimulus::StepEnvelope => "step_envelope",
            Stimulus::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Stimulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stimulus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise_bursts" => Ok(Stimulus::NoiseBursts),
            "am_tone" => Ok(Stimulus::AmTone),
            "step_envelope" => Ok(Stimulus::StepEnvelope),
            "mixed" => Ok(Stimulus::Mixed),
            other => Err(Error::InvalidArgument(format!("unknown stimulus {other:?}"))),
        }
    }
}

fn db(level: f64) -> f64 {
    10f64.powf(level / 20.0)
}

fn random_len(rng: &mut ChaCha8Rng, sr: u32, lo_sec: f64, hi_sec: f64) -> usize {
    ((rng.random_range(lo_sec..hi_sec) * sr as f64) as usize).max(1)
}

fn noise_bursts(n: usize, sr: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut loud = rng.random_bool(0.5);
    while out.len() < n {
        let len = random_len(rng, sr, 0.1, 0.6);
        let level = if loud {
            db(rng.random_range(-8.0..-1.0))
        } else {
            db(rng.random_range(-45.0..-25.0))
        };
        for _ in 0..len.min(n - out.len()) {
            out.push(level * rng.random_range(-1.0..1.0));
        }
        loud = !loud;
    }
    out
}

fn am_tone(n: usize, sr: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tau = std::f64::consts::TAU;
    let carrier = rng.random_range(110.0..880.0);
    let rate = rng.random_range(0.7..3.0);
    let phase = rng.random_range(0.0..tau);
    (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            let depth = 0.5 + 0.5 * (tau * rate * t + phase).sin();
            db(-36.0 + 34.0 * depth) * (tau * carrier * t).sin()
        })
        .collect()
}

fn step_envelope(n: usize, sr: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tau = std::f64::consts::TAU;
    let carrier = rng.random_range(200.0..1200.0);
    let mut out = Vec::with_capacity(n);
    let mut high = rng.random_bool(0.5);
    while out.len() < n {
        let len = random_len(rng, sr, 0.25, 0.75);
        let level = if high {
            db(rng.random_range(-10.0..-2.0))
        } else {
            db(rng.random_range(-40.0..-22.0))
        };
        for _ in 0..len.min(n - out.len()) {
            let t = out.len() as f64 / sr as f64;
            out.push(level * (0.7 * (tau * carrier * t).sin() + 0.3 * rng.random_range(-1.0..1.0)));
        }
        high = !high;
    }
    out
}

/// Seeded stimulus of `n` samples, quantised to float32 so it survives a
/// WAV round trip unchanged.
pub fn stimulus(kind: Stimulus, n: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let x = match kind {
        Stimulus::NoiseBursts => noise_bursts(n, sample_rate, rng),
        Stimulus::AmTone => am_tone(n, sample_rate, rng),
        Stimulus::StepEnvelope => step_envelope(n, sample_rate, rng),
        Stimulus::Mixed => {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let len = random_len(rng, sample_rate, 1.0, 2.0).min(n - out.len());
                let part = match rng.random_range(0..3) {
                    0 => noise_bursts(len, sample_rate, rng),
                    1 => am_tone(len, sample_rate, rng),
                    _ => step_envelope(len, sample_rate, rng),
                };
                out.extend(part);
            }
            out
        }
    };
    x.into_iter().map(|v| v as f32 as f64).collect()
}

/// One knot of the ground-truth curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveKnot {
    pub label: f64,
    pub ct_db: f64,
    pub ratio: f64,
    pub attack_ms: f64,
    pub release_ms: f64,
    pub makeup_db: f64,
}

/// Ground-truth settings as a function of the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaCurve {
    pub knots: Vec<CurveKnot>,
}

impl ThetaCurve {
    /// A curve shaped like a peak-reduction knob over [40, 100]: more
    /// compression, faster ballistics and more make-up at higher labels.
    pub fn peak_reduction() -> Self {
        let k = |label, ct_db, ratio, attack_ms, release_ms, makeup_db| CurveKnot {
            label,
            ct_db,
            ratio,
            attack_ms,
            release_ms,
            makeup_db,
        };
        Self {
            knots: vec![
                k(40.0, -16.0, 2.0, 12.0, 320.0, 1.0),
                k(70.0, -25.0, 3.5, 5.0, 190.0, 3.5),
                k(100.0, -36.0, 6.5, 2.0, 90.0, 7.0),
            ],
        }
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        Some((self.knots.first()?.label, self.knots.last()?.label))
    }

    pub fn eval(&self, label: f64, bounds: &ParamBounds, sample_rate: u32) -> Result<CompressorParams> {
        let knots: Vec<(f64, CompressorParams)> = self
            .knots
            .iter()
            .map(|k| {
                (
                    k.label,
                    CompressorParams::from_times(k.ct_db, k.ratio, k.attack_ms, k.release_ms, k.makeup_db, sample_rate),
                )
            })
            .collect();
        interpolate_knots(&knots, label, Interp::CubicSpline, bounds, sample_rate)
    }
}

fn default_mode() -> String {
    "compressor".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Seconds per pair.
    pub duration: f64,
    pub sample_rate: u32,
    pub labels: Vec<f64>,
    pub stimulus: Stimulus,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub bounds: ParamBounds,
    pub theta_curve: ThetaCurve,
}

impl CorpusSpec {
    /// Seven labels 40..100 on [`ThetaCurve::peak_reduction`].
    pub fn example(seed: u64, sample_rate: u32) -> Self {
        Self {
            seed,
            duration: 6.0,
            sample_rate,
            labels: (0..7).map(|i| 40.0 + 10.0 * i as f64).collect(),
            stimulus: Stimulus::Mixed,
            mode: default_mode(),
            bounds: ParamBounds::default(),
            theta_curve: ThetaCurve::peak_reduction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        let min_duration = 2.0 * LdrOptions::default().long_window;
        if !(self.duration >= min_duration) {
            return Err(Error::InvalidArgument(format!(
                "duration {} s is shorter than {min_duration} s",
                self.duration
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate must be positive".into()));
        }
        if self.labels.is_empty() || self.labels.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("labels must be non-empty and strictly increasing".into()));
        }
        let knots = &self.theta_curve.knots;
        if knots.is_empty() || knots.windows(2).any(|w| !(w[1].label > w[0].label)) {
            return Err(Error::InvalidArgument("curve knots must be non-empty and strictly increasing".into()));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    fn rng_for(&self, index: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Ground truth and in-memory pair for `labels[index]`, at full precision.
    pub fn pair(&self, index: usize) -> Result<(CompressorParams, AudioPair)> {
        self.validate()?;
        let label = *self
            .labels
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("label index {index} out of range")))?;
        let params = self.theta_curve.eval(label, &self.bounds, self.sample_rate)?;
        let mut rng = self.rng_for(index);
        let x = stimulus(self.stimulus, self.n_samples(), self.sample_rate, &mut rng);
        let (y, _) = compress_params(&x, &params, DEFAULT_G_INIT);
        let pair = pair_validate(
            AudioBuffer::new(x, self.sample_rate)?,
            AudioBuffer::new(y, self.sample_rate)?,
        )?;
        Ok((params, pair))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub label: f64,
    /// Paths relative to the manifest.
    pub input: String,
    pub target: String,
    pub params: CompressorParams,
    /// Raw parameters, present when every setting lies strictly inside the
    /// bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<ThetaRaw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub sample_rate: u32,
    pub seed: u64,
    pub mode: String,
    pub stimulus: Stimulus,
    pub bounds: ParamBounds,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("cannot serialise manifest: {e}")))?;
        std::fs::write(path, text).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads every pair listed in the manifest at `path`.
    pub fn load_pairs(&self, path: impl AsRef<Path>) -> Result<Vec<(f64, AudioPair)>> {
        let base = path.as_ref().parent().map(Path::to_path_buf).unwrap_or_default();
        self.entries
            .iter()
            .map(|e| {
                let pair = pair_validate(load_wav(base.join(&e.input))?, load_wav(base.join(&e.target))?)?;
                Ok((e.label, pair))
            })
            .collect()
    }
}

fn entry_dir(index: usize) -> String {
    format!("{index:03}")
}

/// Writes `NNN/x.wav`, `NNN/y.wav` for every label plus `manifest.toml`
/// into `out_dir`, and returns the manifest.
pub fn generate(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let entries = (0..spec.labels.len())
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let (params, pair) = spec.pair(i)?;
            let dir = out_dir.join(entry_dir(i));
            std::fs::create_dir_all(&dir).map_err(|source| Error::Write {
                path: dir.clone(),
                source,
            })?;
            save_wav(dir.join("x.wav"), &pair.input)?;
            save_wav(dir.join("y.wav"), &pair.target)?;
            let rel = |f: &str| -> String {
                PathBuf::from(entry_dir(i)).join(f).to_string_lossy().into_owned()
            };
            Ok(ManifestEntry {
                label: spec.labels[i],
                input: rel("x.wav"),
                target: rel("y.wav"),
                theta: unconstrain(&params, &spec.bounds, spec.sample_rate).ok(),
                params,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        sample_rate: spec.sample_rate,
        seed: spec.seed,
        mode: spec.mode.clone(),
        stimulus: spec.stimulus,
        bounds: spec.bounds,
        entries,
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

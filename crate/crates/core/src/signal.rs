//! Audio buffers, WAV I/O, pair validation and chunk planning.

use std::ops::Range;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Mono audio at full scale ±1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSample { index });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::Read {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Reads a mono PCM16, PCM24 or float32 RIFF/WAVE file.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Multichannel {
            channels: spec.channels,
        });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Int, 24) => reader
            .into_samples::<i32>()
            .map(|s| s.map(|v| v as f64 / 8_388_608.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{fmt:?} {bits}-bit")));
        }
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes a mono float32 WAV file.
pub fn save_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let write_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::Write {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(write_err)?;
    for &s in &audio.samples {
        writer.write_sample(s as f32).map_err(write_err)?;
    }
    writer.finalize().map_err(write_err)
}

/// Dry input and processed target with matching rate and length.
#[derive(Debug, Clone)]
pub struct AudioPair {
    pub input: AudioBuffer,
    pub target: AudioBuffer,
}

impl AudioPair {
    pub fn sample_rate(&self) -> u32 {
        self.input.sample_rate
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

pub fn pair_validate(input: AudioBuffer, target: AudioBuffer) -> Result<AudioPair> {
    if input.sample_rate != target.sample_rate {
        return Err(Error::RateMismatch(input.sample_rate, target.sample_rate));
    }
    if input.len() != target.len() {
        return Err(Error::LengthMismatch(input.len(), target.len()));
    }
    Ok(AudioPair { input, target })
}

/// Overlapping chunk layout. Each chunk after the first spends its first
/// `overlap_len` samples warming up state; the first chunk evaluates from
/// sample 0 because nothing precedes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunk_len: usize,
    pub overlap_len: usize,
    pub eval_offset: usize,
    pub chunk_starts: Vec<usize>,
    pub n_samples: usize,
}

/// One chunk of a plan, in absolute sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSpan {
    pub range: Range<usize>,
    pub eval: Range<usize>,
}

impl ChunkSpan {
    /// Offset of the evaluation region inside the chunk.
    pub fn eval_start_local(&self) -> usize {
        self.eval.start - self.range.start
    }
}

impl ChunkPlan {
    pub fn spans(&self) -> impl Iterator<Item = ChunkSpan> + '_ {
        self.chunk_starts.iter().enumerate().map(move |(i, &start)| {
            let end = (start + self.chunk_len).min(self.n_samples);
            let eval_start = if i == 0 { start } else { start + self.eval_offset };
            ChunkSpan {
                range: start..end,
                eval: eval_start..end,
            }
        })
    }

    pub fn len(&self) -> usize {
        self.chunk_starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_starts.is_empty()
    }

    /// A single chunk spanning the whole signal.
    pub fn whole(n_samples: usize) -> Self {
        Self {
            chunk_len: n_samples.max(1),
            overlap_len: 0,
            eval_offset: 0,
            chunk_starts: vec![0],
            n_samples,
        }
    }
}

pub const DEFAULT_CHUNK_SEC: f64 = 12.0;
pub const DEFAULT_OVERLAP_SEC: f64 = 1.0;

pub fn plan_chunks(
    n_samples: usize,
    sample_rate: u32,
    chunk_sec: f64,
    overlap_sec: f64,
) -> Result<ChunkPlan> {
    if !(chunk_sec > overlap_sec && overlap_sec >= 0.0) || !chunk_sec.is_finite() {
        return Err(Error::InvalidChunking {
            chunk_sec,
            overlap_sec,
        });
    }
    if n_samples == 0 {
        return Err(Error::EmptyAudio);
    }
    let chunk_len = (chunk_sec * sample_rate as f64).round() as usize;
    let overlap_len = (overlap_sec * sample_rate as f64).round() as usize;
    if chunk_len <= overlap_len {
        return Err(Error::InvalidChunking {
            chunk_sec,
            overlap_sec,
        });
    }
    let hop = chunk_len - overlap_len;
    let mut chunk_starts = vec![0];
    let mut start = hop;
    while start + overlap_len < n_samples {
        chunk_starts.push(start);
        start += hop;
    }
    Ok(ChunkPlan {
        chunk_len,
        overlap_len,
        eval_offset: overlap_len,
        chunk_starts,
        n_samples,
    })
}

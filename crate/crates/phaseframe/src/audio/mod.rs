//! WAV ingestion/emission, SNR-controlled mixing, dataset manifests, excerpt
//! slicing, and a synthetic speech-like corpus generator for desk-scale runs.
//!
//! Every pipeline stage works on mono 16 kHz audio; anything else is rejected
//! at ingestion, never silently resampled. Samples are kept in `f64` in
//! memory (mixing gains are exact to well below 1e-9 dB) and quantized only
//! at the file boundary.

pub mod corpus;
pub mod dataset;
pub mod manifest;
pub mod mix;
pub mod wav;

pub use corpus::{make_synthetic_corpus, CorpusSpec};
pub use dataset::{load_pairs, ExcerptPair};
pub use manifest::{read_manifest, write_manifest, MixRecord, Split};
pub use mix::{mix_at_snr, slice_excerpts, MixOutput};
pub use wav::{wav_read, wav_write, SampleFormat};

use thiserror::Error;

/// The only sample rate the pipeline accepts.
pub const PIPELINE_SAMPLE_RATE: u32 = 16_000;

/// Peak level clips are normalized to at ingestion.
pub const PEAK_NORM_TARGET: f64 = 0.95;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed WAV file {path}: {reason}")]
    MalformedWav { path: String, reason: String },
    #[error("unsupported WAV format in {path}: {reason}")]
    UnsupportedWav { path: String, reason: String },
    #[error("unsupported sample rate {got} Hz in {path}; the pipeline requires {want} Hz and does not resample")]
    UnsupportedRate { path: String, got: u32, want: u32 },
    #[error("silent clip: {0}")]
    SilentClip(String),
    #[error("invalid audio input: {0}")]
    InvalidInput(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Mono audio clip with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidInput("zero sample rate".into()));
        }
        for (i, &v) in samples.iter().enumerate() {
            if !v.is_finite() {
                return Err(AudioError::InvalidInput(format!(
                    "non-finite sample at index {i}"
                )));
            }
            if v.abs() > 1.0 {
                return Err(AudioError::InvalidInput(format!(
                    "sample {v} at index {i} outside [-1, 1]"
                )));
            }
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |acc, &v| acc.max(v.abs()))
    }

    pub fn energy(&self) -> f64 {
        crate::nn::kernels::sum_squares(&self.samples)
    }

    /// Scale so the peak hits `target`; errors on silence.
    pub fn peak_normalized(&self, target: f64) -> Result<Self, AudioError> {
        let peak = self.peak();
        if peak == 0.0 {
            return Err(AudioError::SilentClip(
                "cannot peak-normalize a silent clip".into(),
            ));
        }
        let gain = target / peak;
        Ok(Self {
            samples: self.samples.iter().map(|&v| v * gain).collect(),
            sample_rate: self.sample_rate,
        })
    }
}

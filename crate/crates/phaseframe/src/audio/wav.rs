//! RIFF/WAVE reader and writer for the two formats the pipeline speaks:
//! mono 16 kHz, 16-bit PCM or 32-bit IEEE float. Everything else is an
//! explicit error. Unknown chunks are skipped on read.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AudioClip, AudioError, PIPELINE_SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    /// 16-bit signed PCM; write quantizes with `round(x * 32767)`.
    Pcm16,
    /// 32-bit IEEE float; sample-exact round trip for f32 values.
    Float32,
}

pub fn wav_write(path: &Path, clip: &AudioClip, format: SampleFormat) -> Result<(), AudioError> {
    let n = clip.len();
    let (format_code, bits, data_len) = match format {
        SampleFormat::Pcm16 => (1u16, 16u16, n * 2),
        SampleFormat::Float32 => (3u16, 32u16, n * 4),
    };
    let byte_rate = clip.sample_rate() * bits as u32 / 8;
    let block_align = bits / 8;

    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format_code.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    match format {
        SampleFormat::Pcm16 => {
            for &v in clip.samples() {
                let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
        SampleFormat::Float32 => {
            for &v in clip.samples() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }

    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn wav_read(path: &Path) -> Result<AudioClip, AudioError> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    let malformed = |reason: &str| AudioError::MalformedWav {
        path: name.clone(),
        reason: reason.to_string(),
    };
    let unsupported = |reason: String| AudioError::UnsupportedWav {
        path: name.clone(),
        reason,
    };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE header"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut at = 12;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = u32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap()) as usize;
        let body_start = at + 8;
        if body_start + size > bytes.len() {
            return Err(malformed("chunk overruns file"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed("fmt chunk too short"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        at = body_start + size + (size & 1);
    }

    let (format_code, channels, rate, bits) = fmt.ok_or_else(|| malformed("no fmt chunk"))?;
    let data = data.ok_or_else(|| malformed("no data chunk"))?;

    if channels != 1 {
        return Err(unsupported(format!("{channels} channels; the pipeline is mono")));
    }
    if rate != PIPELINE_SAMPLE_RATE {
        return Err(AudioError::UnsupportedRate {
            path: name,
            got: rate,
            want: PIPELINE_SAMPLE_RATE,
        });
    }

    let samples: Vec<f64> = match (format_code, bits) {
        (1, 16) => {
            if data.len() % 2 != 0 {
                return Err(malformed("PCM16 data length not a multiple of 2"));
            }
            data.chunks_exact(2)
                .map(|c| {
                    let v = i16::from_le_bytes(c.try_into().unwrap());
                    (v as f64 / 32767.0).max(-1.0)
                })
                .collect()
        }
        (3, 32) => {
            if data.len() % 4 != 0 {
                return Err(malformed("float32 data length not a multiple of 4"));
            }
            data.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        other => {
            return Err(unsupported(format!(
                "format code/bit depth {other:?}; only 16-bit PCM and 32-bit float are accepted"
            )))
        }
    };

    AudioClip::new(samples, rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn float_roundtrip_is_sample_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ramp.wav");
        let ramp: Vec<f64> = (0..1000).map(|i| (i as f32 / 1000.0 - 0.5) as f64).collect();
        let clip = AudioClip::new(ramp.clone(), 16_000).unwrap();
        wav_write(&path, &clip, SampleFormat::Float32).unwrap();
        let back = wav_read(&path).unwrap();
        assert_eq!(back.samples(), &ramp[..]);
        assert_eq!(back.sample_rate(), 16_000);
    }

    #[test]
    fn pcm16_roundtrip_within_quantization_bound() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let sine: Vec<f64> = (0..2000)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin())
            .collect();
        let clip = AudioClip::new(sine.clone(), 16_000).unwrap();
        wav_write(&path, &clip, SampleFormat::Pcm16).unwrap();
        let back = wav_read(&path).unwrap();
        let bound = 2f64.powi(-15);
        for (a, b) in back.samples().iter().zip(&sine) {
            assert!((a - b).abs() <= bound, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_wrong_sample_rate() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cd.wav");
        // Hand-build a 44.1 kHz header.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 4).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&44_100u32.to_le_bytes());
        bytes.extend_from_slice(&88_200u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, bytes).unwrap();
        match wav_read(&path) {
            Err(AudioError::UnsupportedRate { got, want, .. }) => {
                assert_eq!(got, 44_100);
                assert_eq!(want, 16_000);
            }
            other => panic!("expected UnsupportedRate, got {other:?}"),
        }
    }

    #[test]
    fn rejects_garbage_and_skips_unknown_chunks() {
        let dir = tempdir().unwrap();
        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"not a wav at all").unwrap();
        assert!(matches!(
            wav_read(&bad),
            Err(AudioError::MalformedWav { .. })
        ));

        // A LIST chunk before fmt/data must be skipped.
        let path = dir.path().join("list.wav");
        let clip = AudioClip::new(vec![0.25, -0.25], 16_000).unwrap();
        wav_write(&path, &clip, SampleFormat::Float32).unwrap();
        let original = std::fs::read(&path).unwrap();
        let mut with_list = Vec::new();
        with_list.extend_from_slice(&original[..12]);
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(b"abc\0"); // odd size + pad
        with_list.extend_from_slice(&original[12..]);
        let riff_len = (with_list.len() - 8) as u32;
        with_list[4..8].copy_from_slice(&riff_len.to_le_bytes());
        std::fs::write(&path, with_list).unwrap();
        let back = wav_read(&path).unwrap();
        assert_eq!(back.samples().len(), 2);
    }
}

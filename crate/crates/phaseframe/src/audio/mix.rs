//! SNR-controlled additive mixing and excerpt slicing.

use super::{AudioClip, AudioError, PEAK_NORM_TARGET};
use crate::nn::kernels::sum_squares;

/// Result of [`mix_at_snr`]. `noise_gain` is the gain applied to the noise to
/// hit the requested SNR; `joint_gain` is the common rescale applied to both
/// outputs when the raw mixture would clip (it preserves the SNR exactly).
#[derive(Debug, Clone)]
pub struct MixOutput {
    pub noisy: AudioClip,
    pub clean: AudioClip,
    pub noise_gain: f64,
    pub joint_gain: f64,
}

/// Mix `clean + g * noise` with `g` chosen so that
/// `10 log10(||clean||^2 / ||g noise||^2)` equals `snr_db` exactly.
pub fn mix_at_snr(
    clean: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
) -> Result<MixOutput, AudioError> {
    if clean.len() != noise.len() {
        return Err(AudioError::InvalidInput(format!(
            "clean ({}) and noise ({}) lengths differ; crop or loop the noise first",
            clean.len(),
            noise.len()
        )));
    }
    if clean.is_empty() {
        return Err(AudioError::InvalidInput("empty signals".into()));
    }
    let clean_energy = sum_squares(clean.samples());
    let noise_energy = sum_squares(noise.samples());
    if clean_energy == 0.0 {
        return Err(AudioError::SilentClip("clean signal is silent".into()));
    }
    if noise_energy == 0.0 {
        return Err(AudioError::SilentClip("noise signal is silent".into()));
    }

    let noise_gain = (clean_energy / noise_energy).sqrt() * 10f64.powf(-snr_db / 20.0);
    let mix: Vec<f64> = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(&s, &v)| s + noise_gain * v)
        .collect();
    let peak = mix.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let joint_gain = if peak > PEAK_NORM_TARGET {
        PEAK_NORM_TARGET / peak
    } else {
        1.0
    };

    let noisy = AudioClip::new(mix.iter().map(|&v| v * joint_gain).collect(), clean.sample_rate())?;
    let clean_out = AudioClip::new(
        clean.samples().iter().map(|&v| v * joint_gain).collect(),
        clean.sample_rate(),
    )?;
    Ok(MixOutput {
        noisy,
        clean: clean_out,
        noise_gain,
        joint_gain,
    })
}

/// Contiguous excerpts of `length_s` seconds every `hop_s` seconds; a final
/// partial excerpt is dropped. A clip shorter than one excerpt yields none.
pub fn slice_excerpts(clip: &AudioClip, length_s: f64, hop_s: f64) -> Vec<AudioClip> {
    let len = (length_s * clip.sample_rate() as f64).round() as usize;
    let hop = (hop_s * clip.sample_rate() as f64).round() as usize;
    if len == 0 || hop == 0 || clip.len() < len {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= clip.len() {
        out.push(
            AudioClip::new(clip.samples()[start..start + len].to_vec(), clip.sample_rate())
                .expect("slice of a valid clip is valid"),
        );
        start += hop;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(len: usize, seed: u64, amp: f64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new(
            (0..len).map(|_| rng.gen_range(-amp..amp)).collect(),
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn equal_energy_at_zero_db_gives_unit_gain() {
        let clean = AudioClip::new(vec![0.5, -0.5, 0.5, -0.5], 16_000).unwrap();
        let noise = AudioClip::new(vec![0.5, 0.5, -0.5, -0.5], 16_000).unwrap();
        let out = mix_at_snr(&clean, &noise, 0.0).unwrap();
        assert!((out.noise_gain - 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_to_one_energy_at_zero_db_gives_gain_two() {
        let clean = AudioClip::new(vec![0.8, -0.8], 16_000).unwrap();
        let noise = AudioClip::new(vec![0.4, 0.4], 16_000).unwrap();
        let out = mix_at_snr(&clean, &noise, 0.0).unwrap();
        assert!((out.noise_gain - 2.0).abs() < 1e-12);
    }

    #[test]
    fn achieved_snr_matches_requested_to_1e9_db() {
        let clean = random_clip(4000, 1, 0.4);
        let noise = random_clip(4000, 2, 0.4);
        for &snr in &[-10.0, -5.0, 0.0, 5.0, 10.0, 20.0] {
            let out = mix_at_snr(&clean, &noise, snr).unwrap();
            // Recover the noise component from the mixture and re-measure.
            let noise_part: Vec<f64> = out
                .noisy
                .samples()
                .iter()
                .zip(out.clean.samples())
                .map(|(&n, &c)| n - c)
                .collect();
            let measured = 10.0
                * (sum_squares(out.clean.samples()) / sum_squares(&noise_part)).log10();
            assert!(
                (measured - snr).abs() < 1e-9,
                "requested {snr}, measured {measured}"
            );
        }
    }

    #[test]
    fn joint_gain_engages_only_on_clipping_risk() {
        let clean = random_clip(2000, 3, 0.9);
        let noise = random_clip(2000, 4, 0.9);
        let loud = mix_at_snr(&clean, &noise, -10.0).unwrap();
        assert!(loud.joint_gain < 1.0);
        assert!(loud.noisy.peak() <= PEAK_NORM_TARGET + 1e-12);

        let quiet_clean = random_clip(2000, 5, 0.05);
        let quiet_noise = random_clip(2000, 6, 0.05);
        let quiet = mix_at_snr(&quiet_clean, &quiet_noise, 10.0).unwrap();
        assert_eq!(quiet.joint_gain, 1.0);
    }

    #[test]
    fn silent_inputs_rejected() {
        let silent = AudioClip::new(vec![0.0; 100], 16_000).unwrap();
        let ok = random_clip(100, 7, 0.5);
        assert!(matches!(
            mix_at_snr(&silent, &ok, 0.0),
            Err(AudioError::SilentClip(_))
        ));
        assert!(matches!(
            mix_at_snr(&ok, &silent, 0.0),
            Err(AudioError::SilentClip(_))
        ));
    }

    #[test]
    fn excerpt_counts() {
        let six = random_clip(6 * 16_000, 8, 0.5);
        assert_eq!(slice_excerpts(&six, 2.0, 2.0).len(), 3);
        let five = random_clip(5 * 16_000, 9, 0.5);
        assert_eq!(slice_excerpts(&five, 2.0, 2.0).len(), 2);
        let short = random_clip(16_000, 10, 0.5);
        assert!(slice_excerpts(&short, 2.0, 2.0).is_empty());
    }

    #[test]
    fn excerpt_concatenation_reproduces_prefix() {
        let clip = random_clip(5 * 16_000 + 123, 11, 0.5);
        let excerpts = slice_excerpts(&clip, 2.0, 2.0);
        let mut rebuilt = Vec::new();
        for e in &excerpts {
            rebuilt.extend_from_slice(e.samples());
        }
        assert_eq!(&clip.samples()[..rebuilt.len()], &rebuilt[..]);
    }
}

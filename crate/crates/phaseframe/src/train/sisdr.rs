//! Scale-invariant signal-to-distortion ratio.
//!
//! The metric projects the estimate onto the reference (`alpha = <est, ref> /
//! ||ref||^2`) and reports `10 log10(||alpha ref||^2 / ||est - alpha ref||^2)`
//! in dB, clamped to [-60, 60] for reporting. The training loss uses the same
//! quantity with small epsilon floors inside the ratio (see
//! [`LOSS_RATIO_FLOOR`]) so a perfect batch cannot produce an infinite loss.

use thiserror::Error;

use crate::nn::kernels::{dot, sum_squares};

/// Reporting clamp in dB.
pub const SI_SDR_CLAMP_DB: f64 = 60.0;

/// Epsilon added to numerator and denominator of the loss-path ratio.
pub const LOSS_RATIO_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SiSdrError {
    #[error("signals have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("reference signal is all zero")]
    ZeroReference,
    #[error("signals are empty")]
    Empty,
}

/// Unclamped SI-SDR in dB. `+inf` for an exact reconstruction.
pub fn si_sdr_unclamped(reference: &[f64], estimate: &[f64]) -> Result<f64, SiSdrError> {
    if reference.is_empty() {
        return Err(SiSdrError::Empty);
    }
    if reference.len() != estimate.len() {
        return Err(SiSdrError::LengthMismatch(reference.len(), estimate.len()));
    }
    let power = sum_squares(reference);
    if power <= 0.0 {
        return Err(SiSdrError::ZeroReference);
    }
    let alpha = dot(estimate, reference) / power;
    let target_energy = alpha * alpha * power;
    let mut error_energy = 0.0;
    for (&e, &r) in estimate.iter().zip(reference) {
        let d = e - alpha * r;
        error_energy += d * d;
    }
    if error_energy == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target_energy / error_energy).log10())
}

/// SI-SDR in dB clamped to `[-60, 60]`; the reporting form.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64, SiSdrError> {
    Ok(si_sdr_unclamped(reference, estimate)?.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_is_absorbed() {
        let s: Vec<f64> = (0..64).map(|i| ((i as f64) * 0.37).sin()).collect();
        let scaled: Vec<f64> = s.iter().map(|v| 2.7 * v).collect();
        assert_eq!(si_sdr(&s, &scaled).unwrap(), SI_SDR_CLAMP_DB);
    }

    #[test]
    fn hand_worked_half_half() {
        // s=[1,0], est=[0.5,0.5]: alpha=0.5, target energy 0.25, error
        // energy 0.25 -> 0 dB.
        let val = si_sdr(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(val.abs() < 1e-12, "got {val}");
    }

    #[test]
    fn orthogonal_noise_gives_energy_ratio() {
        // est = s + n with n orthogonal to s and ||s||^2 / ||n||^2 = 10.
        let mut s = vec![0.0; 8];
        let mut n = vec![0.0; 8];
        s[0] = 1.0;
        n[1] = (0.1f64).sqrt();
        let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
        let val = si_sdr(&s, &est).unwrap();
        assert!((val - 10.0).abs() < 1e-9, "got {val}");
    }

    #[test]
    fn zero_reference_rejected() {
        assert!(matches!(
            si_sdr(&[0.0, 0.0], &[1.0, 0.0]),
            Err(SiSdrError::ZeroReference)
        ));
    }

    #[test]
    fn perfect_reconstruction_clamps_to_plus_sixty() {
        let s = [0.3, -0.4, 0.9];
        assert_eq!(si_sdr(&s, &s).unwrap(), SI_SDR_CLAMP_DB);
    }
}

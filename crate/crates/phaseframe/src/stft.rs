//! Analysis/synthesis front-end: framing, windowing, zero-padded forward DFT,
//! inverse DFT with weighted overlap-add, and polar decomposition.
//!
//! Conventions, fixed once and tested:
//!
//! - Frames are causal: frame `l` covers samples `[l*hop, l*hop + frame_len)`.
//!   There is no center padding; the signal tail is zero-padded to complete
//!   the final frame, and edge attenuation is corrected by the squared-window
//!   normalization in [`istft`].
//! - The forward DFT is one-sided, non-normalized, of even size `dft_size >=
//!   frame_len` (frames are zero-padded before the transform); the inverse
//!   carries the `1/N` factor.
//! - The default window is the half-sample-offset square-root Hann
//!   `w(n) = sin(pi*(n+0.5)/M)`, used for both analysis and synthesis. It is
//!   strictly positive and satisfies the constant-overlap-add identity
//!   `w^2(n) + w^2(n + M/2) = 1` exactly at 50% overlap, so every sample
//!   (including the very first) survives the round trip.
//! - Phase of a zero-magnitude bin is the fixed convention `(cos, sin) = (1, 0)`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::scalar::{rl, Real};

/// Floor applied to the accumulated squared-window sum before division.
pub const WINDOW_SUM_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum StftError {
    #[error("invalid STFT config: {0}")]
    InvalidConfig(String),
    #[error("signal of {len} samples is shorter than one frame ({frame_len} samples); nothing to analyze even after tail padding")]
    SignalTooShort { len: usize, frame_len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Analysis/synthesis parameters: frame length `M`, hop `H`, DFT size `N`
/// (`N >= M`, frames are zero-padded to `N`), sample rate and the window.
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig<T> {
    frame_len: usize,
    hop: usize,
    dft_size: usize,
    sample_rate: u32,
    window: Vec<T>,
}

impl<T: Real> StftConfig<T> {
    /// Config with the default square-root Hann window.
    pub fn new(
        frame_len: usize,
        hop: usize,
        dft_size: usize,
        sample_rate: u32,
    ) -> Result<Self, StftError> {
        Self::with_window(
            frame_len,
            hop,
            dft_size,
            sample_rate,
            sqrt_hann_window(frame_len),
        )
    }

    /// Config with an explicit window of length `frame_len`.
    pub fn with_window(
        frame_len: usize,
        hop: usize,
        dft_size: usize,
        sample_rate: u32,
        window: Vec<T>,
    ) -> Result<Self, StftError> {
        if frame_len == 0 || hop == 0 {
            return Err(StftError::InvalidConfig(
                "frame length and hop must be positive".into(),
            ));
        }
        if hop > frame_len {
            return Err(StftError::InvalidConfig(format!(
                "hop {hop} exceeds frame length {frame_len}"
            )));
        }
        if dft_size < frame_len {
            return Err(StftError::InvalidConfig(format!(
                "DFT size {dft_size} smaller than frame length {frame_len}"
            )));
        }
        if dft_size % 2 != 0 {
            return Err(StftError::InvalidConfig(format!(
                "DFT size {dft_size} must be even"
            )));
        }
        if sample_rate == 0 {
            return Err(StftError::InvalidConfig("sample rate must be positive".into()));
        }
        if window.len() != frame_len {
            return Err(StftError::InvalidConfig(format!(
                "window length {} does not match frame length {}",
                window.len(),
                frame_len
            )));
        }
        Ok(Self {
            frame_len,
            hop,
            dft_size,
            sample_rate,
            window,
        })
    }

    /// Frame length `M` in samples.
    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    /// Hop `H` in samples.
    pub fn hop(&self) -> usize {
        self.hop
    }

    /// DFT size `N`.
    pub fn dft_size(&self) -> usize {
        self.dft_size
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    /// Number of one-sided bins `K = N/2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.dft_size / 2 + 1
    }

    /// Overlap ratio `R = (M - H) / M`.
    pub fn overlap_ratio(&self) -> f64 {
        (self.frame_len - self.hop) as f64 / self.frame_len as f64
    }

    /// Physical frame length `M / f_s` in seconds.
    pub fn frame_len_seconds(&self) -> f64 {
        self.frame_len as f64 / self.sample_rate as f64
    }

    /// Frame count for a signal of `len` samples: every sample is covered and
    /// the final frame is completed by zero padding.
    pub fn num_frames(&self, len: usize) -> Result<usize, StftError> {
        if len < self.frame_len {
            return Err(StftError::SignalTooShort {
                len,
                frame_len: self.frame_len,
            });
        }
        Ok((len - self.frame_len).div_ceil(self.hop) + 1)
    }

    /// Length of the zero-padded signal covered by `n_frames` frames.
    pub fn padded_len(&self, n_frames: usize) -> usize {
        (n_frames - 1) * self.hop + self.frame_len
    }
}

/// Half-sample-offset periodic square-root Hann: `w(n) = sin(pi*(n+0.5)/M)`.
pub fn sqrt_hann_window<T: Real>(len: usize) -> Vec<T> {
    (0..len)
        .map(|n| rl::<T>((std::f64::consts::PI * (n as f64 + 0.5) / len as f64).sin()))
        .collect()
}

/// One-sided complex spectrogram: `K x L` planes of real and imaginary parts,
/// stored row-major (`bin * n_frames + frame`).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T> {
    pub re: Vec<T>,
    pub im: Vec<T>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub config: StftConfig<T>,
    pub original_len: usize,
}

impl<T: Real> ComplexSpectrogram<T> {
    pub fn at(&self, bin: usize, frame: usize) -> (T, T) {
        let i = bin * self.n_frames + frame;
        (self.re[i], self.im[i])
    }

    fn check_consistent(&self) -> Result<(), StftError> {
        if self.n_bins != self.config.n_bins() {
            return Err(StftError::ShapeMismatch(format!(
                "spectrogram has {} bins but config implies {}",
                self.n_bins,
                self.config.n_bins()
            )));
        }
        if self.re.len() != self.n_bins * self.n_frames || self.im.len() != self.re.len() {
            return Err(StftError::ShapeMismatch(
                "re/im plane sizes do not match bins x frames".into(),
            ));
        }
        if self.n_frames == 0 {
            return Err(StftError::ShapeMismatch("spectrogram has no frames".into()));
        }
        let expect = self.config.num_frames(self.original_len)?;
        if expect != self.n_frames {
            return Err(StftError::ShapeMismatch(format!(
                "original_len {} implies {} frames, spectrogram has {}",
                self.original_len, expect, self.n_frames
            )));
        }
        Ok(())
    }
}

/// Magnitude/phase view of a spectrogram, all planes `K x L` row-major.
/// `cos^2 + sin^2 = 1` everywhere; zero-magnitude bins carry `(1, 0)`.
#[derive(Debug, Clone)]
pub struct Polar<T> {
    pub mag: Vec<T>,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

/// Forward STFT of a real signal.
pub fn stft<T: Real>(
    signal: &[T],
    config: &StftConfig<T>,
) -> Result<ComplexSpectrogram<T>, StftError> {
    let n_frames = config.num_frames(signal.len())?;
    let n = config.dft_size;
    let m = config.frame_len;
    let k_bins = config.n_bins();

    let fft = FftPlanner::<T>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut re = vec![T::zero(); k_bins * n_frames];
    let mut im = vec![T::zero(); k_bins * n_frames];

    for l in 0..n_frames {
        let start = l * config.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let x = if i < m && start + i < signal.len() {
                signal[start + i] * config.window[i]
            } else {
                T::zero()
            };
            *slot = Complex::new(x, T::zero());
        }
        fft.process(&mut buf);
        for k in 0..k_bins {
            re[k * n_frames + l] = buf[k].re;
            im[k * n_frames + l] = buf[k].im;
        }
    }

    Ok(ComplexSpectrogram {
        re,
        im,
        n_bins: k_bins,
        n_frames,
        config: config.clone(),
        original_len: signal.len(),
    })
}

/// Accumulated squared synthesis window, floored for safe division.
fn window_sum_squares<T: Real>(config: &StftConfig<T>, n_frames: usize) -> Vec<T> {
    let mut wsum = vec![T::zero(); config.padded_len(n_frames)];
    for l in 0..n_frames {
        let start = l * config.hop;
        for (i, &w) in config.window.iter().enumerate() {
            wsum[start + i] = wsum[start + i] + w * w;
        }
    }
    let floor = rl::<T>(WINDOW_SUM_FLOOR);
    for v in wsum.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    wsum
}

/// Inverse STFT with weighted overlap-add; output trimmed to `original_len`.
pub fn istft<T: Real>(spec: &ComplexSpectrogram<T>) -> Result<Vec<T>, StftError> {
    spec.check_consistent()?;
    let config = &spec.config;
    let n = config.dft_size;
    let m = config.frame_len;
    let l_frames = spec.n_frames;

    let ifft = FftPlanner::<T>::new().plan_fft_inverse(n);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut ola = vec![T::zero(); config.padded_len(l_frames)];
    let inv_n = T::one() / rl::<T>(n as f64);

    for l in 0..l_frames {
        // Hermitian expansion of the one-sided spectrum. The imaginary parts
        // of the DC and Nyquist bins cannot contribute to a real signal and
        // are dropped here.
        buf[0] = Complex::new(spec.re[l], T::zero());
        buf[n / 2] = Complex::new(spec.re[(n / 2) * l_frames + l], T::zero());
        for k in 1..n / 2 {
            let c = Complex::new(spec.re[k * l_frames + l], spec.im[k * l_frames + l]);
            buf[k] = c;
            buf[n - k] = c.conj();
        }
        ifft.process(&mut buf);
        let start = l * config.hop;
        for i in 0..m {
            ola[start + i] = ola[start + i] + buf[i].re * inv_n * config.window[i];
        }
    }

    let wsum = window_sum_squares(config, l_frames);
    let mut out = Vec::with_capacity(spec.original_len);
    for t in 0..spec.original_len {
        out.push(ola[t] / wsum[t]);
    }
    Ok(out)
}

/// Adjoint of [`istft`] as a linear map from the one-sided `(re, im)` planes
/// to the trimmed time signal. Given the gradient of a scalar with respect to
/// the istft output, returns the gradient with respect to `re` and `im`.
/// Backbone of reverse-mode differentiation through synthesis.
pub fn istft_adjoint<T: Real>(
    grad_out: &[T],
    config: &StftConfig<T>,
    n_frames: usize,
) -> (Vec<T>, Vec<T>) {
    let n = config.dft_size;
    let m = config.frame_len;
    let k_bins = config.n_bins();
    let padded = config.padded_len(n_frames);
    debug_assert!(grad_out.len() <= padded);

    // Undo trim + normalization.
    let wsum = window_sum_squares(config, n_frames);
    let mut g_ola = vec![T::zero(); padded];
    for (t, &g) in grad_out.iter().enumerate() {
        g_ola[t] = g / wsum[t];
    }

    // Adjoint of (inverse DFT -> truncate to M -> window -> overlap-add) is
    // (gather frame -> window -> zero-pad -> forward DFT scaled by 1/N),
    // with the off-DC/Nyquist bins picking up a factor 2 from the Hermitian
    // expansion and the imaginary part a sign flip.
    let fft = FftPlanner::<T>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut d_re = vec![T::zero(); k_bins * n_frames];
    let mut d_im = vec![T::zero(); k_bins * n_frames];
    let inv_n = T::one() / rl::<T>(n as f64);
    let two = rl::<T>(2.0);

    for l in 0..n_frames {
        let start = l * config.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < m {
                g_ola[start + i] * config.window[i]
            } else {
                T::zero()
            };
            *slot = Complex::new(v, T::zero());
        }
        fft.process(&mut buf);
        for k in 0..k_bins {
            let scale = if k == 0 || k == n / 2 { inv_n } else { two * inv_n };
            d_re[k * n_frames + l] = buf[k].re * scale;
            // The forward DFT of the gradient frame already carries the
            // -sin factor in its imaginary part.
            d_im[k * n_frames + l] = if k == 0 || k == n / 2 {
                T::zero()
            } else {
                buf[k].im * scale
            };
        }
    }
    (d_re, d_im)
}

/// Polar decomposition. `cos^2 + sin^2 = 1` wherever magnitude is nonzero;
/// zero-magnitude bins get the fixed `(1, 0)` convention.
pub fn polar_split<T: Real>(spec: &ComplexSpectrogram<T>) -> Polar<T> {
    let len = spec.re.len();
    let mut mag = Vec::with_capacity(len);
    let mut cos = Vec::with_capacity(len);
    let mut sin = Vec::with_capacity(len);
    for i in 0..len {
        let (re, im) = (spec.re[i], spec.im[i]);
        let m = re.hypot(im);
        if m == T::zero() {
            mag.push(T::zero());
            cos.push(T::one());
            sin.push(T::zero());
        } else {
            mag.push(m);
            cos.push(re / m);
            sin.push(im / m);
        }
    }
    Polar { mag, cos, sin }
}

/// Rebuild a complex spectrogram from magnitude and unit phase planes.
pub fn combine<T: Real>(
    mag: &[T],
    cos: &[T],
    sin: &[T],
    config: &StftConfig<T>,
    original_len: usize,
) -> Result<ComplexSpectrogram<T>, StftError> {
    let k_bins = config.n_bins();
    let n_frames = config.num_frames(original_len)?;
    let expect = k_bins * n_frames;
    if mag.len() != expect || cos.len() != expect || sin.len() != expect {
        return Err(StftError::ShapeMismatch(format!(
            "plane length {} vs expected {} ({} bins x {} frames)",
            mag.len(),
            expect,
            k_bins,
            n_frames
        )));
    }
    let mut re = Vec::with_capacity(expect);
    let mut im = Vec::with_capacity(expect);
    for i in 0..expect {
        re.push(mag[i] * cos[i]);
        im.push(mag[i] * sin[i]);
    }
    Ok(ComplexSpectrogram {
        re,
        im,
        n_bins: k_bins,
        n_frames,
        config: config.clone(),
        original_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct O(N^2) one-sided DFT of a windowed, zero-padded frame.
    fn dft_direct(frame: &[f64], n: usize) -> Vec<(f64, f64)> {
        let k_bins = n / 2 + 1;
        (0..k_bins)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (i, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let err: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let norm: f64 = b.iter().map(|y| y * y).sum();
        (err / norm).sqrt()
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let config = StftConfig::<f64>::new(64, 32, 512, 16_000).unwrap();
        let spec = stft(&vec![0.0; 1000], &config).unwrap();
        assert!(spec.re.iter().chain(spec.im.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn paper_grid_bin_count() {
        // 32 ms at 16 kHz -> M = 512; N = 512 -> K = 257.
        let config = StftConfig::<f64>::new(512, 256, 512, 16_000).unwrap();
        assert_eq!(config.frame_len_seconds(), 0.032);
        assert_eq!(config.n_bins(), 257);
        // 4 ms -> M = 64, zero-padded to N = 512 -> same K.
        let short = StftConfig::<f64>::new(64, 32, 512, 16_000).unwrap();
        assert_eq!(short.n_bins(), 257);
        assert_eq!(short.frame_len_seconds(), 0.004);
    }

    #[test]
    fn stft_matches_direct_dft_on_zero_padded_frames() {
        // 4 ms frames zero-padded to 512: bins must equal the 512-point DFT
        // of the 64 windowed samples followed by 448 zeros.
        let config = StftConfig::<f64>::new(64, 32, 512, 16_000).unwrap();
        let signal = random_signal(200, 7);
        let spec = stft(&signal, &config).unwrap();
        for l in 0..spec.n_frames {
            let mut frame = vec![0.0; 64];
            for i in 0..64 {
                if l * 32 + i < signal.len() {
                    frame[i] = signal[l * 32 + i] * config.window()[i];
                }
            }
            let oracle = dft_direct(&frame, 512);
            for k in 0..spec.n_bins {
                let (re, im) = spec.at(k, l);
                let (ore, oim) = oracle[k];
                assert!((re - ore).abs() < 1e-9, "re mismatch at k={k} l={l}");
                assert!((im - oim).abs() < 1e-9, "im mismatch at k={k} l={l}");
            }
        }
    }

    #[test]
    fn roundtrip_f64_every_frame_length() {
        for &m in &[16usize, 32, 64, 128, 256, 512] {
            let config = StftConfig::<f64>::new(m, m / 2, 512, 16_000).unwrap();
            let signal = random_signal(16_000, m as u64);
            let rec = istft(&stft(&signal, &config).unwrap()).unwrap();
            let err = rel_l2(&rec, &signal);
            assert!(err < 1e-10, "M={m}: relative error {err}");
        }
    }

    #[test]
    fn roundtrip_f32_every_frame_length() {
        for &m in &[16usize, 32, 64, 128, 256, 512] {
            let config = StftConfig::<f32>::new(m, m / 2, 512, 16_000).unwrap();
            let signal: Vec<f32> = random_signal(16_000, m as u64)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            let rec = istft(&stft(&signal, &config).unwrap()).unwrap();
            let err: f64 = {
                let e: f64 = rec
                    .iter()
                    .zip(&signal)
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum();
                let n: f64 = signal.iter().map(|&y| (y as f64).powi(2)).sum();
                (e / n).sqrt()
            };
            assert!(err < 1e-6, "M={m}: relative error {err}");
        }
    }

    #[test]
    fn zero_spectrogram_inverts_to_zero() {
        let config = StftConfig::<f64>::new(64, 32, 512, 16_000).unwrap();
        let spec = stft(&vec![0.0; 500], &config).unwrap();
        let rec = istft(&spec).unwrap();
        assert_eq!(rec.len(), 500);
        assert!(rec.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn consistent_spectrogram_has_silent_padded_tail() {
        // Frames of an stft-produced spectrogram invert to M samples plus a
        // ~zero tail in the padded region; keeping or dropping that tail must
        // not change the reconstruction.
        let config = StftConfig::<f64>::new(64, 32, 512, 16_000).unwrap();
        let signal = random_signal(640, 3);
        let spec = stft(&signal, &config).unwrap();

        let n = config.dft_size();
        let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
        let mut tail_max: f64 = 0.0;
        for l in 0..spec.n_frames {
            let mut buf = vec![Complex::new(0.0, 0.0); n];
            buf[0] = Complex::new(spec.re[l], 0.0);
            buf[n / 2] = Complex::new(spec.re[(n / 2) * spec.n_frames + l], 0.0);
            for k in 1..n / 2 {
                let c = Complex::new(spec.re[k * spec.n_frames + l], spec.im[k * spec.n_frames + l]);
                buf[k] = c;
                buf[n - k] = c.conj();
            }
            ifft.process(&mut buf);
            for i in config.frame_len()..n {
                tail_max = tail_max.max((buf[i].re / n as f64).abs());
            }
        }
        assert!(tail_max < 1e-12, "padded tail leaked energy: {tail_max}");

        let rec = istft(&spec).unwrap();
        assert!(rel_l2(&rec, &signal) < 1e-12);
    }

    #[test]
    fn linearity() {
        let config = StftConfig::<f64>::new(128, 64, 512, 16_000).unwrap();
        let x = random_signal(2000, 1);
        let y = random_signal(2000, 2);
        let (a, b) = (0.7, -1.3);
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(&xi, &yi)| a * xi + b * yi).collect();
        let sx = stft(&x, &config).unwrap();
        let sy = stft(&y, &config).unwrap();
        let sm = stft(&mixed, &config).unwrap();
        let scale: f64 = sm.re.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..sm.re.len() {
            assert!((sm.re[i] - (a * sx.re[i] + b * sy.re[i])).abs() < 1e-10 * scale);
            assert!((sm.im[i] - (a * sx.im[i] + b * sy.im[i])).abs() < 1e-10 * scale);
        }
    }

    #[test]
    fn parseval_on_rectangular_no_overlap_config() {
        // Rectangular window, H = M, N = M: time-domain frame energy equals
        // 1/N times the one-sided-expanded spectral energy.
        let m = 256;
        let config =
            StftConfig::<f64>::with_window(m, m, m, 16_000, vec![1.0; m]).unwrap();
        let signal = random_signal(m * 4, 11);
        let spec = stft(&signal, &config).unwrap();
        for l in 0..spec.n_frames {
            let time_energy: f64 = signal[l * m..(l + 1) * m].iter().map(|v| v * v).sum();
            let mut spec_energy = 0.0;
            for k in 0..spec.n_bins {
                let (re, im) = spec.at(k, l);
                let w = if k == 0 || k == m / 2 { 1.0 } else { 2.0 };
                spec_energy += w * (re * re + im * im);
            }
            spec_energy /= m as f64;
            assert!(
                (time_energy - spec_energy).abs() / time_energy < 1e-9,
                "frame {l}: {time_energy} vs {spec_energy}"
            );
        }
    }

    #[test]
    fn polar_conventions() {
        let config = StftConfig::<f64>::new(4, 2, 4, 16_000).unwrap();
        let mut spec = stft(&vec![0.0; 8], &config).unwrap();
        spec.re[0] = 3.0;
        spec.im[0] = 4.0;
        let polar = polar_split(&spec);
        assert!((polar.mag[0] - 5.0).abs() < 1e-12);
        assert!((polar.cos[0] - 0.6).abs() < 1e-12);
        assert!((polar.sin[0] - 0.8).abs() < 1e-12);
        // Zero bin -> (0, 1, 0), and the convention is idempotent under
        // combine -> polar_split.
        assert_eq!(polar.mag[1], 0.0);
        assert_eq!(polar.cos[1], 1.0);
        assert_eq!(polar.sin[1], 0.0);
        let rebuilt = combine(&polar.mag, &polar.cos, &polar.sin, &config, 8).unwrap();
        let again = polar_split(&rebuilt);
        assert_eq!(again.cos[1], 1.0);
        assert_eq!(again.sin[1], 0.0);
    }

    #[test]
    fn polar_roundtrip_random() {
        let config = StftConfig::<f64>::new(64, 32, 128, 16_000).unwrap();
        let signal = random_signal(500, 21);
        let spec = stft(&signal, &config).unwrap();
        let polar = polar_split(&spec);
        let rebuilt = combine(&polar.mag, &polar.cos, &polar.sin, &config, 500).unwrap();
        let scale: f64 = spec.re.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..spec.re.len() {
            assert!((rebuilt.re[i] - spec.re[i]).abs() < 1e-12 * scale);
            assert!((rebuilt.im[i] - spec.im[i]).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn combine_cross_phase_matches_elementwise_oracle() {
        let config = StftConfig::<f64>::new(32, 16, 64, 16_000).unwrap();
        let x = stft(&random_signal(300, 5), &config).unwrap();
        let y = stft(&random_signal(300, 6), &config).unwrap();
        let px = polar_split(&x);
        let py = polar_split(&y);
        let crossed = combine(&px.mag, &py.cos, &py.sin, &config, 300).unwrap();
        for i in 0..crossed.re.len() {
            assert!((crossed.re[i] - px.mag[i] * py.cos[i]).abs() < 1e-15);
            assert!((crossed.im[i] - px.mag[i] * py.sin[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn combine_all_ones_real() {
        let config = StftConfig::<f64>::new(8, 4, 8, 16_000).unwrap();
        let k = config.n_bins();
        let frames = config.num_frames(16).unwrap();
        let ones = vec![1.0; k * frames];
        let cos = vec![1.0; k * frames];
        let sin = vec![0.0; k * frames];
        let spec = combine(&ones, &cos, &sin, &config, 16).unwrap();
        assert!(spec.re.iter().all(|&v| v == 1.0));
        assert!(spec.im.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_short_signal_and_bad_shapes() {
        let config = StftConfig::<f64>::new(64, 32, 512, 16_000).unwrap();
        assert!(matches!(
            stft(&vec![0.0; 63], &config),
            Err(StftError::SignalTooShort { .. })
        ));
        let other = StftConfig::<f64>::new(32, 16, 64, 16_000).unwrap();
        let mut spec = stft(&vec![0.1; 640], &config).unwrap();
        spec.config = other;
        assert!(matches!(istft(&spec), Err(StftError::ShapeMismatch(_))));
    }

    #[test]
    fn istft_adjoint_agrees_with_jacobian_dot_products() {
        // <A z, g> == <z, A* g> for the linear map A = istft.
        let config = StftConfig::<f64>::new(16, 8, 32, 16_000).unwrap();
        let len = 48;
        let n_frames = config.num_frames(len).unwrap();
        let k_bins = config.n_bins();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let re: Vec<f64> = (0..k_bins * n_frames).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let im: Vec<f64> = (0..k_bins * n_frames).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let spec = ComplexSpectrogram {
            re: re.clone(),
            im: im.clone(),
            n_bins: k_bins,
            n_frames,
            config: config.clone(),
            original_len: len,
        };
        let out = istft(&spec).unwrap();
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();

        let (dre, dim) = istft_adjoint(&g, &config, n_frames);
        let rhs: f64 = re.iter().zip(&dre).map(|(a, b)| a * b).sum::<f64>()
            + im.iter().zip(&dim).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

//! Phase-aware speech enhancement built on a fully configurable STFT front-end.
//!
//! The crate provides, bottom to top:
//!
//! - [`stft`]: analysis/synthesis front-end (framing, windowing, zero-padded
//!   forward DFT, weighted overlap-add inverse, polar decomposition).
//! - [`nn`]: a small deterministic differentiable-computation core — tensors,
//!   the handful of layer kinds the enhancer needs, reverse-mode gradients and
//!   an Adam optimizer.
//! - [`model`]: the two-sub-network enhancer (magnitude mask + phase residual).
//! - [`train`]: SI-SDR loss, the joint training loop with early stopping, and
//!   checkpoint persistence.
//! - [`audio`]: WAV I/O, SNR-controlled mixing, manifests and a synthetic
//!   speech-like corpus generator for desk-scale runs.
//! - [`metrics`]: SI-SDR / ESTOI evaluation of the joint, magnitude-only and
//!   phase-only reconstructions, with bootstrap confidence intervals.
//! - [`harness`]: the frame-length sweep experiment, report rendering and the
//!   command-line interface.
//!
//! See the `examples/` directory for one runnable example per capability, and
//! the `phaseframe` binary for the CLI.

pub mod audio;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod stft;
pub mod train;

pub use scalar::Real;

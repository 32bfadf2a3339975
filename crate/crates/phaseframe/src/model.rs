//! The two-sub-network enhancer: a magnitude-masking CNN and a phase-residual
//! CNN producing `(|S|, cos, sin)` estimates from a noisy spectrogram.
//!
//! The magnitude sub-network feeds the noisy magnitude through an input dense
//! layer, a chain of residual blocks (`x + conv(bn(relu(x)))` with depthwise
//! separable convolutions along time) and an output dense layer; a sigmoid
//! turns the head into a real mask in `[0, 1]` that multiplies the input.
//! The phase sub-network sees the estimated magnitude concatenated with the
//! cosine and sine of the noisy phase along the channel axis, runs its own
//! block chain, and emits a `2K`-channel residual that is added to the noisy
//! phase pair and renormalized to the unit circle per bin.
//!
//! Parameter count depends only on the bin count `K`, never on the frame
//! length, so pinning the DFT size keeps models across a frame-length sweep
//! at identical capacity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::tape::BatchStats;
use crate::nn::{Mode, NnError, ParamInit, Tape, Tensor, Var};
use crate::scalar::{rl, Real};
use crate::stft::{polar_split, ComplexSpectrogram, StftError};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum: `new = (1 - m) * old + m * batch`.
pub const BN_MOMENTUM: f64 = 0.1;
/// Pre-normalization norms below this fall back to the noisy phase.
pub const PHASE_FALLBACK_NORM: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model built for {model} bins, input has {input}")]
    BinMismatch { model: usize, input: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Stft(#[from] StftError),
}

/// Architecture hyperparameters. `paper_scale` carries the published sizes;
/// `desk_scale` is the default the experiment harness can actually train on a
/// workstation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_bins: usize,
    pub mag_blocks: usize,
    pub mag_channels: usize,
    pub phase_blocks: usize,
    pub phase_channels: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Published architecture: 15 magnitude blocks at 1536 channels, 6 phase
    /// blocks at 1024 channels.
    pub fn paper_scale(n_bins: usize, seed: u64) -> Self {
        Self {
            n_bins,
            mag_blocks: 15,
            mag_channels: 1536,
            phase_blocks: 6,
            phase_channels: 1024,
            kernel_size: 5,
            seed,
        }
    }

    /// Workstation-sized default used by the sweep harness.
    pub fn desk_scale(n_bins: usize, seed: u64) -> Self {
        Self {
            n_bins,
            mag_blocks: 2,
            mag_channels: 64,
            phase_blocks: 2,
            phase_channels: 48,
            kernel_size: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_bins == 0
            || self.mag_blocks == 0
            || self.mag_channels == 0
            || self.phase_blocks == 0
            || self.phase_channels == 0
        {
            return Err(ModelError::InvalidConfig(
                "bin count, block counts and channel counts must be positive".into(),
            ));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count; matches the instantiated model
    /// exactly.
    pub fn param_count(&self) -> usize {
        let k = self.n_bins;
        let block = |c: usize| 2 * c + c * self.kernel_size + c * c + c;
        let mag = (self.mag_channels * k + self.mag_channels)
            + self.mag_blocks * block(self.mag_channels)
            + (k * self.mag_channels + k);
        let phase = (self.phase_channels * 3 * k + self.phase_channels)
            + self.phase_blocks * block(self.phase_channels)
            + (2 * k * self.phase_channels + 2 * k);
        mag + phase
    }
}

#[derive(Debug, Clone, Copy)]
struct DenseIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    gamma: usize,
    beta: usize,
    depthwise: usize,
    pointwise_w: usize,
    pointwise_b: usize,
    bn_slot: usize,
}

#[derive(Debug, Clone)]
struct SubnetLayout {
    input: DenseIdx,
    blocks: Vec<BlockIdx>,
    output: DenseIdx,
}

/// Running batch-norm statistics for one block.
#[derive(Debug, Clone)]
pub struct RunningBn<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Parameter set of both sub-networks plus architecture hyperparameters.
/// Parameters live in a flat registry in declaration order; the checkpoint
/// format and the optimizer state follow that order.
pub struct EnhancerModel<T> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    bn_running: Vec<RunningBn<T>>,
    mag: SubnetLayout,
    phase: SubnetLayout,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass<T> {
    /// Sigmoid mask, `[B, K, L]`, strictly inside `(0, 1)`.
    pub mask: Var,
    /// Estimated magnitude `mask * |X|`.
    pub mag_hat: Var,
    /// Estimated unit phase, cosine plane.
    pub cos_hat: Var,
    /// Estimated unit phase, sine plane.
    pub sin_hat: Var,
    /// Parameter leaves in declaration order.
    pub param_vars: Vec<Var>,
    /// Batch statistics per batch-norm layer (train mode only).
    pub bn_stats: Vec<BatchStats<T>>,
}

/// Eval-mode network output as plain `K x L` planes.
pub struct Enhanced<T> {
    pub mag: Vec<T>,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
    pub mask: Vec<T>,
}

struct SubnetSpec<'a> {
    prefix: &'a str,
    c_in: usize,
    channels: usize,
    c_out: usize,
    blocks: usize,
    kernel: usize,
}

impl<T: Real> EnhancerModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut model = Self {
            config: config.clone(),
            params: Vec::new(),
            names: Vec::new(),
            bn_running: Vec::new(),
            mag: SubnetLayout {
                input: DenseIdx { w: 0, b: 0 },
                blocks: Vec::new(),
                output: DenseIdx { w: 0, b: 0 },
            },
            phase: SubnetLayout {
                input: DenseIdx { w: 0, b: 0 },
                blocks: Vec::new(),
                output: DenseIdx { w: 0, b: 0 },
            },
        };
        let mut init = ParamInit::new(config.seed);
        let k = config.n_bins;
        model.mag = model.build_subnet(
            &SubnetSpec {
                prefix: "mag",
                c_in: k,
                channels: config.mag_channels,
                c_out: k,
                blocks: config.mag_blocks,
                kernel: config.kernel_size,
            },
            &mut init,
        );
        model.phase = model.build_subnet(
            &SubnetSpec {
                prefix: "phase",
                c_in: 3 * k,
                channels: config.phase_channels,
                c_out: 2 * k,
                blocks: config.phase_blocks,
                kernel: config.kernel_size,
            },
            &mut init,
        );
        Ok(model)
    }

    fn push(&mut self, t: Tensor<T>, name: String) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn build_subnet(&mut self, spec: &SubnetSpec<'_>, init: &mut ParamInit) -> SubnetLayout {
        let p = spec.prefix;
        let c = spec.channels;
        let input = DenseIdx {
            w: self.push(
                init.uniform_fan_in(&[c, spec.c_in], spec.c_in),
                format!("{p}.input.weight"),
            ),
            b: self.push(
                init.uniform_fan_in(&[c], spec.c_in),
                format!("{p}.input.bias"),
            ),
        };
        let mut blocks = Vec::with_capacity(spec.blocks);
        for bi in 0..spec.blocks {
            let gamma = self.push(init.constant(&[c], 1.0), format!("{p}.block{bi}.bn.gamma"));
            let beta = self.push(init.constant(&[c], 0.0), format!("{p}.block{bi}.bn.beta"));
            let depthwise = self.push(
                init.uniform_fan_in(&[c, spec.kernel], spec.kernel),
                format!("{p}.block{bi}.depthwise.weight"),
            );
            let pointwise_w = self.push(
                init.uniform_fan_in(&[c, c], c),
                format!("{p}.block{bi}.pointwise.weight"),
            );
            let pointwise_b = self.push(
                init.uniform_fan_in(&[c], c),
                format!("{p}.block{bi}.pointwise.bias"),
            );
            self.bn_running.push(RunningBn {
                mean: vec![T::zero(); c],
                var: vec![T::one(); c],
            });
            blocks.push(BlockIdx {
                gamma,
                beta,
                depthwise,
                pointwise_w,
                pointwise_b,
                bn_slot: self.bn_running.len() - 1,
            });
        }
        let output = DenseIdx {
            w: self.push(
                init.uniform_fan_in(&[spec.c_out, c], c),
                format!("{p}.output.weight"),
            ),
            b: self.push(init.uniform_fan_in(&[spec.c_out], c), format!("{p}.output.bias")),
        };
        SubnetLayout {
            input,
            blocks,
            output,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn bn_running(&self) -> &[RunningBn<T>] {
        &self.bn_running
    }

    pub fn bn_running_mut(&mut self) -> &mut [RunningBn<T>] {
        &mut self.bn_running
    }

    /// Instantiated trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Record the full enhancer on `tape`. Inputs are `[B, K, L]` planes of
    /// the noisy magnitude and unit phase. In train mode the returned
    /// [`ForwardPass::bn_stats`] must be fed to [`Self::apply_bn_updates`].
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x_mag: Var,
        x_cos: Var,
        x_sin: Var,
        mode: Mode,
    ) -> Result<ForwardPass<T>, ModelError> {
        let (_, k, _) = tape.value(x_mag).dims3()?;
        if k != self.config.n_bins {
            return Err(ModelError::BinMismatch {
                model: self.config.n_bins,
                input: k,
            });
        }

        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let mut bn_stats = Vec::new();

        // Magnitude sub-network: sigmoid mask applied to the noisy magnitude.
        let mag_logits = self.run_subnet(tape, &self.mag, x_mag, mode, &param_vars, &mut bn_stats)?;
        let mask = tape.sigmoid(mag_logits);
        let mag_hat = tape.mul(mask, x_mag)?;

        // Phase sub-network: residual on the noisy phase pair, renormalized
        // to the unit circle.
        let phase_in = tape.concat_channels(&[mag_hat, x_cos, x_sin])?;
        let residual =
            self.run_subnet(tape, &self.phase, phase_in, mode, &param_vars, &mut bn_stats)?;
        let base = tape.concat_channels(&[x_cos, x_sin])?;
        let refined = tape.phase_refine(base, residual, PHASE_FALLBACK_NORM)?;
        let cos_hat = tape.slice_channels(refined, 0, k)?;
        let sin_hat = tape.slice_channels(refined, k, 2 * k)?;

        Ok(ForwardPass {
            mask,
            mag_hat,
            cos_hat,
            sin_hat,
            param_vars,
            bn_stats,
        })
    }

    fn run_subnet(
        &self,
        tape: &mut Tape<T>,
        layout: &SubnetLayout,
        x: Var,
        mode: Mode,
        param_vars: &[Var],
        bn_stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var, ModelError> {
        let mut h = tape.dense(x, param_vars[layout.input.w], param_vars[layout.input.b])?;
        for block in &layout.blocks {
            let activated = tape.relu(h);
            let normalized = match mode {
                Mode::Train => {
                    let (v, stats) = tape.batch_norm_train(
                        activated,
                        param_vars[block.gamma],
                        param_vars[block.beta],
                        BN_EPS,
                    )?;
                    bn_stats.push(stats);
                    v
                }
                Mode::Eval => {
                    let running = &self.bn_running[block.bn_slot];
                    tape.batch_norm_eval(
                        activated,
                        param_vars[block.gamma],
                        param_vars[block.beta],
                        &running.mean,
                        &running.var,
                        BN_EPS,
                    )?
                }
            };
            let conv = tape.dsconv1d(
                normalized,
                param_vars[block.depthwise],
                param_vars[block.pointwise_w],
                param_vars[block.pointwise_b],
            )?;
            h = tape.add(h, conv)?;
        }
        Ok(tape.dense(h, param_vars[layout.output.w], param_vars[layout.output.b])?)
    }

    /// Fold train-mode batch statistics into the running estimates. The
    /// running variance uses the unbiased batch variance.
    pub fn apply_bn_updates(&mut self, stats: &[BatchStats<T>]) {
        debug_assert_eq!(stats.len(), self.bn_running.len());
        let momentum = rl::<T>(BN_MOMENTUM);
        let keep = T::one() - momentum;
        for (running, batch) in self.bn_running.iter_mut().zip(stats) {
            let bessel = if batch.count > 1 {
                rl::<T>(batch.count as f64 / (batch.count - 1) as f64)
            } else {
                T::one()
            };
            for c in 0..running.mean.len() {
                running.mean[c] = keep * running.mean[c] + momentum * batch.mean[c];
                running.var[c] = keep * running.var[c] + momentum * batch.var[c] * bessel;
            }
        }
    }

    /// Force the network into the identity map: the mask saturates at ~1 and
    /// the phase residual is exactly zero. Test and diagnostics hook.
    pub fn force_identity(&mut self) {
        let zero = T::zero();
        let big = rl::<T>(30.0);
        for idx in [self.mag.output.w, self.phase.output.w] {
            for v in self.params[idx].data_mut() {
                *v = zero;
            }
        }
        for v in self.params[self.mag.output.b].data_mut() {
            *v = big;
        }
        for v in self.params[self.phase.output.b].data_mut() {
            *v = zero;
        }
    }

    /// Zero only the phase head (exact noisy-phase passthrough).
    pub fn zero_phase_head(&mut self) {
        for idx in [self.phase.output.w, self.phase.output.b] {
            for v in self.params[idx].data_mut() {
                *v = T::zero();
            }
        }
    }
}

/// Run the frozen model on one spectrogram (batch norm in eval mode) and
/// return the estimated magnitude, unit phase planes and the mask.
pub fn enhance<T: Real>(
    model: &EnhancerModel<T>,
    spec: &ComplexSpectrogram<T>,
) -> Result<Enhanced<T>, ModelError> {
    if spec.n_bins != model.config.n_bins {
        return Err(ModelError::BinMismatch {
            model: model.config.n_bins,
            input: spec.n_bins,
        });
    }
    let polar = polar_split(spec);
    let (k, l) = (spec.n_bins, spec.n_frames);
    let mut tape = Tape::new();
    let x_mag = tape.constant(Tensor::from_vec(&[1, k, l], polar.mag).map_err(ModelError::Nn)?);
    let x_cos = tape.constant(Tensor::from_vec(&[1, k, l], polar.cos).map_err(ModelError::Nn)?);
    let x_sin = tape.constant(Tensor::from_vec(&[1, k, l], polar.sin).map_err(ModelError::Nn)?);
    let pass = model.forward(&mut tape, x_mag, x_cos, x_sin, Mode::Eval)?;
    Ok(Enhanced {
        mag: tape.value(pass.mag_hat).data().to_vec(),
        cos: tape.value(pass.cos_hat).data().to_vec(),
        sin: tape.value(pass.sin_hat).data().to_vec(),
        mask: tape.value(pass.mask).data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::{stft, StftConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            n_bins: 9,
            mag_blocks: 2,
            mag_channels: 6,
            phase_blocks: 2,
            phase_channels: 4,
            kernel_size: 3,
            seed,
        }
    }

    fn random_planes(k: usize, l: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mag: Vec<f64> = (0..k * l).map(|_| rng.gen_range(0.0..2.0)).collect();
        let phases: Vec<f64> = (0..k * l)
            .map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
            .collect();
        let cos: Vec<f64> = phases.iter().map(|p| p.cos()).collect();
        let sin: Vec<f64> = phases.iter().map(|p| p.sin()).collect();
        (
            Tensor::from_vec(&[1, k, l], mag).unwrap(),
            Tensor::from_vec(&[1, k, l], cos).unwrap(),
            Tensor::from_vec(&[1, k, l], sin).unwrap(),
        )
    }

    #[test]
    fn param_count_formula_matches_instantiation() {
        for config in [
            tiny_config(1),
            ModelConfig::desk_scale(257, 9),
            ModelConfig {
                n_bins: 33,
                mag_blocks: 3,
                mag_channels: 10,
                phase_blocks: 1,
                phase_channels: 7,
                kernel_size: 5,
                seed: 2,
            },
        ] {
            let model = EnhancerModel::<f32>::new(config.clone()).unwrap();
            assert_eq!(model.param_count(), config.param_count(), "{config:?}");
        }
    }

    #[test]
    fn mask_bounded_and_magnitude_never_amplified() {
        let model = EnhancerModel::<f64>::new(tiny_config(3)).unwrap();
        let (mag, cos, sin) = random_planes(9, 12, 4);
        let mut tape = Tape::new();
        let (xm, xc, xs) = (
            tape.constant(mag.clone()),
            tape.constant(cos),
            tape.constant(sin),
        );
        let pass = model.forward(&mut tape, xm, xc, xs, Mode::Eval).unwrap();
        for (&m, &x) in tape
            .value(pass.mag_hat)
            .data()
            .iter()
            .zip(mag.data())
        {
            assert!(m >= 0.0 && m <= x, "mag_hat {m} vs |X| {x}");
        }
        for &v in tape.value(pass.mask).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn zero_spectrogram_gives_zero_magnitude_and_unit_phase() {
        let model = EnhancerModel::<f64>::new(tiny_config(5)).unwrap();
        let config = StftConfig::<f64>::new(16, 8, 16, 16_000).unwrap();
        let spec = stft(&vec![0.0; 64], &config).unwrap();
        let out = enhance(&model, &spec).unwrap();
        assert!(out.mag.iter().all(|&v| v == 0.0));
        for (c, s) in out.cos.iter().zip(&out.sin) {
            assert!((c * c + s * s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_phase_head_reproduces_noisy_phase_bit_exactly() {
        let mut model = EnhancerModel::<f64>::new(tiny_config(6)).unwrap();
        model.zero_phase_head();
        let (mag, cos, sin) = random_planes(9, 10, 7);
        let mut tape = Tape::new();
        let (xm, xc, xs) = (
            tape.constant(mag),
            tape.constant(cos.clone()),
            tape.constant(sin.clone()),
        );
        let pass = model.forward(&mut tape, xm, xc, xs, Mode::Eval).unwrap();
        assert_eq!(tape.value(pass.cos_hat).data(), cos.data());
        assert_eq!(tape.value(pass.sin_hat).data(), sin.data());
    }

    #[test]
    fn phase_output_is_unit_norm() {
        let model = EnhancerModel::<f64>::new(tiny_config(8)).unwrap();
        let (mag, cos, sin) = random_planes(9, 25, 9);
        let mut tape = Tape::new();
        let (xm, xc, xs) = (tape.constant(mag), tape.constant(cos), tape.constant(sin));
        let pass = model.forward(&mut tape, xm, xc, xs, Mode::Eval).unwrap();
        let c = tape.value(pass.cos_hat).data();
        let s = tape.value(pass.sin_hat).data();
        for i in 0..c.len() {
            assert!((c[i] * c[i] + s[i] * s[i] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_output_independent_of_batch_composition() {
        let model = EnhancerModel::<f64>::new(tiny_config(10)).unwrap();
        let (k, l) = (9, 8);
        let (mag, cos, sin) = random_planes(k, l, 11);

        // Batch of two identical items.
        let dup = |t: &Tensor<f64>| {
            let mut data = t.data().to_vec();
            data.extend_from_slice(t.data());
            Tensor::from_vec(&[2, k, l], data).unwrap()
        };
        let mut tape = Tape::new();
        let (xm, xc, xs) = (
            tape.constant(dup(&mag)),
            tape.constant(dup(&cos)),
            tape.constant(dup(&sin)),
        );
        let pass = model.forward(&mut tape, xm, xc, xs, Mode::Eval).unwrap();
        let out = tape.value(pass.mag_hat).data();
        let plane = k * l;
        assert_eq!(&out[..plane], &out[plane..]);

        // Single-item batch gives the same per-utterance answer.
        let mut tape1 = Tape::new();
        let (m1, c1, s1) = (tape1.constant(mag), tape1.constant(cos), tape1.constant(sin));
        let single = model.forward(&mut tape1, m1, c1, s1, Mode::Eval).unwrap();
        assert_eq!(tape1.value(single.mag_hat).data(), &out[..plane]);
    }

    #[test]
    fn identical_seeds_give_identical_models() {
        let a = EnhancerModel::<f32>::new(tiny_config(42)).unwrap();
        let b = EnhancerModel::<f32>::new(tiny_config(42)).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        let c = EnhancerModel::<f32>::new(tiny_config(43)).unwrap();
        assert!(a
            .params()
            .iter()
            .zip(c.params())
            .any(|(pa, pc)| pa.data() != pc.data()));
    }

    #[test]
    fn rejects_bin_mismatch() {
        let model = EnhancerModel::<f64>::new(tiny_config(12)).unwrap();
        let (mag, cos, sin) = random_planes(7, 5, 13);
        let mut tape = Tape::new();
        let (xm, xc, xs) = (tape.constant(mag), tape.constant(cos), tape.constant(sin));
        assert!(matches!(
            model.forward(&mut tape, xm, xc, xs, Mode::Eval),
            Err(ModelError::BinMismatch { .. })
        ));
    }
}

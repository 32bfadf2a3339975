//! Reverse-mode differentiation on an append-only tape.
//!
//! A forward pass records one node per operation; [`Tape::backward`] walks the
//! nodes in reverse, propagating vector-Jacobian products. Interior gradients
//! are dropped as soon as they are consumed; leaf gradients stay readable via
//! [`Tape::grad`]. The op set is exactly what the enhancer and its time-domain
//! loss need — this is not a general autodiff framework.

use rayon::prelude::*;

use crate::scalar::{rl, Real};
use crate::stft::{istft, istft_adjoint, ComplexSpectrogram, StftConfig};

use super::kernels::{axpy, dot, sum, sum_squares};
use super::tensor::Tensor;
use super::NnError;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Batch-norm behavior selector for model forwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics reported by a train-mode batch norm, used by
/// the owning layer to update its running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, the one used for normalization.
    pub var: Vec<T>,
    /// Number of reduced elements per channel (batch x time).
    pub count: usize,
}

struct BnCtx<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

struct IstftCtx<T> {
    config: StftConfig<T>,
    n_frames: usize,
    original_len: usize,
}

struct SiSdrItem<T> {
    alpha: T,
    num: T,
    den: T,
    saturated: bool,
}

enum Op<T> {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: BnCtx<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        parts: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        from: usize,
        to: usize,
    },
    PhaseRefine {
        base: Var,
        residual: Var,
        fallback_norm: T,
    },
    Istft {
        re: Var,
        im: Var,
        ctx: IstftCtx<T>,
    },
    SiSdrLoss {
        est: Var,
        target: Tensor<T>,
        items: Vec<SiSdrItem<T>>,
    },
    SumAll {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (parameter or input that needs a gradient).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    /// Present only for leaves (interior gradients are dropped).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// `y[b,:,l] = W x[b,:,l] + bias`, applied per time step.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (batch, c_in, time) = self.value(x).dims3()?;
        let (c_out, w_in) = self.value(w).dims2()?;
        let b_len = self.value(b).dims1()?;
        if w_in != c_in || b_len != c_out {
            return Err(NnError::ShapeMismatch(format!(
                "dense: x has {c_in} channels, W is {c_out}x{w_in}, bias {b_len}"
            )));
        }
        if batch == 0 || time == 0 {
            return Err(NnError::InvalidOperation("dense on empty batch".into()));
        }
        let y = dense_forward(self.value(x), self.value(w), self.value(b));
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(y, Op::Dense { x, w, b }, req))
    }

    /// Depthwise 1-d convolution along time: one odd-length kernel per
    /// channel, zero same-padding.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var, NnError> {
        let (_, channels, _) = self.value(x).dims3()?;
        let (w_ch, k) = self.value(w).dims2()?;
        if w_ch != channels {
            return Err(NnError::ShapeMismatch(format!(
                "depthwise: {channels} input channels vs {w_ch} kernels"
            )));
        }
        if k % 2 == 0 {
            return Err(NnError::InvalidOperation(format!(
                "depthwise kernel size {k} must be odd for symmetric same-padding"
            )));
        }
        let y = depthwise_forward(self.value(x), self.value(w));
        let req = self.requires(x) || self.requires(w);
        Ok(self.push(y, Op::DepthwiseConv { x, w }, req))
    }

    /// Depthwise separable convolution: depthwise along time, then a
    /// pointwise (1x1) channel-mixing layer with bias.
    pub fn dsconv1d(
        &mut self,
        x: Var,
        depthwise_w: Var,
        pointwise_w: Var,
        pointwise_b: Var,
    ) -> Result<Var, NnError> {
        let mid = self.depthwise_conv1d(x, depthwise_w)?;
        self.dense(mid, pointwise_w, pointwise_b)
    }

    /// Train-mode batch norm: statistics over batch and time, per channel.
    /// Returns the output together with the batch statistics so the caller
    /// can update its running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>), NnError> {
        let (batch, channels, time) = self.value(x).dims3()?;
        if batch * time == 0 {
            return Err(NnError::InvalidOperation(
                "batch norm over an empty batch".into(),
            ));
        }
        self.check_affine(gamma, beta, channels)?;
        let (y, xhat, inv_std, stats) =
            bn_train_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let var = self.push(
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                ctx: BnCtx { xhat, inv_std },
            },
            req,
        );
        Ok((var, stats))
    }

    /// Eval-mode batch norm: a deterministic affine map from running stats.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var, NnError> {
        let (_, channels, _) = self.value(x).dims3()?;
        self.check_affine(gamma, beta, channels)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(NnError::ShapeMismatch(
                "running stats length does not match channel count".into(),
            ));
        }
        let eps_t = rl::<T>(eps);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps_t).sqrt())
            .collect();
        let y = bn_eval_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            &inv_std,
        );
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            req,
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Var, channels: usize) -> Result<(), NnError> {
        let g = self.value(gamma).dims1()?;
        let b = self.value(beta).dims1()?;
        if g != channels || b != channels {
            return Err(NnError::ShapeMismatch(format!(
                "batch norm affine params ({g}, {b}) vs {channels} channels"
            )));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let req = self.requires(x);
        self.push(y, Op::Relu { x }, req)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            *v = T::one() / (T::one() + (-*v).exp());
        }
        let req = self.requires(x);
        self.push(y, Op::Sigmoid { x }, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check_same_shape(a, b, "add")?;
        let mut y = self.value(a).clone();
        for (yi, &bi) in y.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *yi = *yi + bi;
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(y, Op::Add { a, b }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check_same_shape(a, b, "mul")?;
        let mut y = self.value(a).clone();
        for (yi, &bi) in y.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *yi = *yi * bi;
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(y, Op::Mul { a, b }, req))
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(NnError::InvalidOperation("concat of nothing".into()));
        }
        let (batch, _, time) = self.value(parts[0]).dims3()?;
        let mut total = 0;
        for &p in parts {
            let (b, c, l) = self.value(p).dims3()?;
            if b != batch || l != time {
                return Err(NnError::ShapeMismatch(
                    "concat parts disagree on batch or time".into(),
                ));
            }
            total += c;
        }
        let mut y = Tensor::zeros(&[batch, total, time]);
        {
            let out = y.data_mut();
            for bi in 0..batch {
                let mut at = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (_, c, _) = t.dims3().unwrap();
                    let src = &t.data()[bi * c * time..(bi + 1) * c * time];
                    let dst_off = bi * total * time + at * time;
                    out[dst_off..dst_off + c * time].copy_from_slice(src);
                    at += c;
                }
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            y,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    /// Channel range `[from, to)` of `x`.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var, NnError> {
        let (batch, channels, time) = self.value(x).dims3()?;
        if from >= to || to > channels {
            return Err(NnError::InvalidOperation(format!(
                "slice [{from}, {to}) of {channels} channels"
            )));
        }
        let c_out = to - from;
        let mut y = Tensor::zeros(&[batch, c_out, time]);
        {
            let src = self.value(x).data();
            let dst = y.data_mut();
            for bi in 0..batch {
                let s = bi * channels * time + from * time;
                let d = bi * c_out * time;
                dst[d..d + c_out * time].copy_from_slice(&src[s..s + c_out * time]);
            }
        }
        let req = self.requires(x);
        Ok(self.push(y, Op::SliceChannels { x, from, to }, req))
    }

    /// Phase-residual refinement: both inputs are `[B, 2K, L]` with channel
    /// `k` carrying a cosine and channel `k + K` the matching sine. The sum
    /// `base + residual` is normalized per bin to the unit circle. Bins whose
    /// pre-normalization norm falls below `fallback_norm`, and bins whose
    /// residual is exactly zero, pass the base through unchanged (the latter
    /// bit-exactly).
    pub fn phase_refine(
        &mut self,
        base: Var,
        residual: Var,
        fallback_norm: f64,
    ) -> Result<Var, NnError> {
        self.check_same_shape(base, residual, "phase_refine")?;
        let (_, channels, _) = self.value(base).dims3()?;
        if channels % 2 != 0 {
            return Err(NnError::ShapeMismatch(format!(
                "phase_refine needs an even channel count, got {channels}"
            )));
        }
        let y = phase_refine_forward(
            self.value(base),
            self.value(residual),
            rl::<T>(fallback_norm),
        );
        let req = self.requires(base) || self.requires(residual);
        Ok(self.push(
            y,
            Op::PhaseRefine {
                base,
                residual,
                fallback_norm: rl::<T>(fallback_norm),
            },
            req,
        ))
    }

    /// Batched inverse STFT: `re`, `im` are `[B, K, L]`, output is
    /// `[B, original_len]`.
    pub fn istft_batch(
        &mut self,
        re: Var,
        im: Var,
        config: &StftConfig<T>,
        original_len: usize,
    ) -> Result<Var, NnError> {
        self.check_same_shape(re, im, "istft")?;
        let (batch, k, l) = self.value(re).dims3()?;
        if k != config.n_bins() {
            return Err(NnError::ShapeMismatch(format!(
                "istft: {k} bins vs config {}",
                config.n_bins()
            )));
        }
        let frames = config
            .num_frames(original_len)
            .map_err(|e| NnError::InvalidOperation(e.to_string()))?;
        if frames != l {
            return Err(NnError::ShapeMismatch(format!(
                "istft: {l} frames vs {frames} implied by original_len {original_len}"
            )));
        }
        let mut y = Tensor::zeros(&[batch, original_len]);
        {
            let re_t = self.value(re);
            let im_t = self.value(im);
            let plane = k * l;
            let rows: Vec<Vec<T>> = (0..batch)
                .into_par_iter()
                .map(|bi| {
                    let spec = ComplexSpectrogram {
                        re: re_t.data()[bi * plane..(bi + 1) * plane].to_vec(),
                        im: im_t.data()[bi * plane..(bi + 1) * plane].to_vec(),
                        n_bins: k,
                        n_frames: l,
                        config: config.clone(),
                        original_len,
                    };
                    istft(&spec).expect("shapes validated above")
                })
                .collect();
            let out = y.data_mut();
            for (bi, row) in rows.iter().enumerate() {
                out[bi * original_len..(bi + 1) * original_len].copy_from_slice(row);
            }
        }
        let req = self.requires(re) || self.requires(im);
        Ok(self.push(
            y,
            Op::Istft {
                re,
                im,
                ctx: IstftCtx {
                    config: config.clone(),
                    n_frames: l,
                    original_len,
                },
            },
            req,
        ))
    }

    /// Mean over the batch of the negative scale-invariant SDR between
    /// estimate rows and target rows, clamped to `+-clamp_db` per utterance.
    /// Scalar output.
    pub fn si_sdr_loss(
        &mut self,
        est: Var,
        target: Tensor<T>,
        clamp_db: f64,
    ) -> Result<Var, NnError> {
        if self.value(est).shape() != target.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "si_sdr_loss: estimate {:?} vs target {:?}",
                self.value(est).shape(),
                target.shape()
            )));
        }
        let (batch, time) = self.value(est).dims2()?;
        if batch == 0 || time == 0 {
            return Err(NnError::InvalidOperation("si_sdr_loss on empty batch".into()));
        }
        let eps = rl::<T>(crate::train::sisdr::LOSS_RATIO_FLOOR);
        let clamp = rl::<T>(clamp_db);
        let ten_over_ln10 = rl::<T>(10.0 / std::f64::consts::LN_10);
        let mut items = Vec::with_capacity(batch);
        let mut total = T::zero();
        for bi in 0..batch {
            let s = &target.data()[bi * time..(bi + 1) * time];
            let x = &self.value(est).data()[bi * time..(bi + 1) * time];
            let p = sum_squares(s);
            if p <= T::zero() {
                return Err(NnError::InvalidOperation(format!(
                    "si_sdr_loss: all-zero reference at batch index {bi}"
                )));
            }
            let a = dot(x, s);
            let alpha = a / p;
            let num = alpha * alpha * p + eps;
            let mut den = T::zero();
            for i in 0..time {
                let e = x[i] - alpha * s[i];
                den = den + e * e;
            }
            den = den + eps;
            let sdr = ten_over_ln10 * (num.ln() - den.ln());
            let (sdr, saturated) = if sdr > clamp {
                (clamp, true)
            } else if sdr < -clamp {
                (-clamp, true)
            } else {
                (sdr, false)
            };
            total = total - sdr;
            items.push(SiSdrItem {
                alpha,
                num,
                den,
                saturated,
            });
        }
        let value = Tensor::scalar(total / rl::<T>(batch as f64));
        let req = self.requires(est);
        Ok(self.push(value, Op::SiSdrLoss { est, target, items }, req))
    }

    /// Scalar sum of all elements (test/diagnostic head).
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(sum(self.value(x).data()));
        let req = self.requires(x);
        self.push(value, Op::SumAll { x }, req)
    }

    /// Scalar sum of squares (test/diagnostic head).
    pub fn sum_squares_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(sum_squares(self.value(x).data()));
        let req = self.requires(x);
        self.push(value, Op::SumSquares { x }, req)
    }

    /// Reverse pass from a scalar loss. Gradients of leaves become available
    /// through [`Tape::grad`]; everything interior is freed on the fly.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(NnError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Dense { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    if self.requires(w) {
                        let dw = dense_backward_w(&g, self.value(x));
                        accumulate(&mut grads, w, dw);
                    }
                    if self.requires(b) {
                        let db = dense_backward_b(&g);
                        accumulate(&mut grads, b, db);
                    }
                    if self.requires(x) {
                        let dx = dense_backward_x(&g, self.value(w), self.value(x).shape());
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::DepthwiseConv { x, w } => {
                    let (x, w) = (*x, *w);
                    if self.requires(w) {
                        let dw = depthwise_backward_w(&g, self.value(x), self.value(w).shape());
                        accumulate(&mut grads, w, dw);
                    }
                    if self.requires(x) {
                        let dx = depthwise_backward_x(&g, self.value(w), self.value(x).shape());
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    ctx,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (dx, dgamma, dbeta) = bn_train_backward(&g, ctx, self.value(gamma));
                    if self.requires(gamma) {
                        accumulate(&mut grads, gamma, dgamma);
                    }
                    if self.requires(beta) {
                        accumulate(&mut grads, beta, dbeta);
                    }
                    if self.requires(x) {
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (dx, dgamma, dbeta) =
                        bn_eval_backward(&g, self.value(x), self.value(gamma), mean, inv_std);
                    if self.requires(gamma) {
                        accumulate(&mut grads, gamma, dgamma);
                    }
                    if self.requires(beta) {
                        accumulate(&mut grads, beta, dbeta);
                    }
                    if self.requires(x) {
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    let mut dx = g;
                    for (gi, &xi) in dx.data_mut().iter_mut().zip(self.value(x).data()) {
                        if xi <= T::zero() {
                            *gi = T::zero();
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let mut dx = g;
                    for (gi, &yi) in dx.data_mut().iter_mut().zip(self.nodes[i].value.data()) {
                        *gi = *gi * yi * (T::one() - yi);
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.requires(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        let mut da = g.clone();
                        for (gi, &bi) in da.data_mut().iter_mut().zip(self.value(b).data()) {
                            *gi = *gi * bi;
                        }
                        accumulate(&mut grads, a, da);
                    }
                    if self.requires(b) {
                        let mut db = g;
                        for (gi, &ai) in db.data_mut().iter_mut().zip(self.value(a).data()) {
                            *gi = *gi * ai;
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::ConcatChannels { parts } => {
                    let parts = parts.clone();
                    let (batch, total, time) = self.nodes[i].value.dims3().unwrap();
                    let mut at = 0;
                    for p in parts {
                        let (_, c, _) = self.value(p).dims3().unwrap();
                        if self.requires(p) {
                            let mut dp = Tensor::zeros(&[batch, c, time]);
                            let dst = dp.data_mut();
                            for bi in 0..batch {
                                let s = bi * total * time + at * time;
                                let d = bi * c * time;
                                dst[d..d + c * time].copy_from_slice(&g.data()[s..s + c * time]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        at += c;
                    }
                }
                Op::SliceChannels { x, from, to } => {
                    let (x, from, to) = (*x, *from, *to);
                    let (batch, channels, time) = self.value(x).dims3().unwrap();
                    let c_out = to - from;
                    let mut dx = Tensor::zeros(&[batch, channels, time]);
                    {
                        let dst = dx.data_mut();
                        for bi in 0..batch {
                            let d = bi * channels * time + from * time;
                            let s = bi * c_out * time;
                            for j in 0..c_out * time {
                                dst[d + j] = dst[d + j] + g.data()[s + j];
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::PhaseRefine {
                    base,
                    residual,
                    fallback_norm,
                } => {
                    let (base, residual, fb) = (*base, *residual, *fallback_norm);
                    let dv = phase_refine_backward(
                        &g,
                        self.value(base),
                        self.value(residual),
                        &self.nodes[i].value,
                        fb,
                    );
                    if self.requires(residual) {
                        accumulate(&mut grads, residual, dv.clone());
                    }
                    if self.requires(base) {
                        accumulate(&mut grads, base, dv);
                    }
                }
                Op::Istft { re, im, ctx } => {
                    let (re, im) = (*re, *im);
                    let (batch, k, l) = self.value(re).dims3().unwrap();
                    let plane = k * l;
                    let time = ctx.original_len;
                    let pairs: Vec<(Vec<T>, Vec<T>)> = (0..batch)
                        .into_par_iter()
                        .map(|bi| {
                            istft_adjoint(
                                &g.data()[bi * time..(bi + 1) * time],
                                &ctx.config,
                                ctx.n_frames,
                            )
                        })
                        .collect();
                    let mut dre = Tensor::zeros(&[batch, k, l]);
                    let mut dim = Tensor::zeros(&[batch, k, l]);
                    for (bi, (r, m)) in pairs.iter().enumerate() {
                        dre.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(r);
                        dim.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(m);
                    }
                    if self.requires(re) {
                        accumulate(&mut grads, re, dre);
                    }
                    if self.requires(im) {
                        accumulate(&mut grads, im, dim);
                    }
                }
                Op::SiSdrLoss { est, target, items } => {
                    let est = *est;
                    let dx = si_sdr_backward(&g, self.value(est), target, items);
                    accumulate(&mut grads, est, dx);
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let seed = g.data()[0];
                    let dx = Tensor::full(self.value(x).shape(), seed);
                    accumulate(&mut grads, x, dx);
                }
                Op::SumSquares { x } => {
                    let x = *x;
                    let seed = g.data()[0];
                    let two = rl::<T>(2.0);
                    let mut dx = self.value(x).clone();
                    for v in dx.data_mut() {
                        *v = *v * two * seed;
                    }
                    accumulate(&mut grads, x, dx);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e = *e + *d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn dense_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (batch, c_in, time) = x.dims3().unwrap();
    let (c_out, _) = w.dims2().unwrap();
    let mut y = Tensor::zeros(&[batch, c_out, time]);
    y.data_mut()
        .par_chunks_mut(time)
        .enumerate()
        .for_each(|(row, out)| {
            let bi = row / c_out;
            let o = row % c_out;
            out.fill(bias.data()[o]);
            let xb = &x.data()[bi * c_in * time..(bi + 1) * c_in * time];
            for i in 0..c_in {
                axpy(out, w.data()[o * c_in + i], &xb[i * time..(i + 1) * time]);
            }
        });
    y
}

fn dense_backward_w<T: Real>(g: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let (batch, c_in, time) = x.dims3().unwrap();
    let (_, c_out, _) = g.dims3().unwrap();
    let mut dw = Tensor::zeros(&[c_out, c_in]);
    dw.data_mut()
        .par_chunks_mut(c_in)
        .enumerate()
        .for_each(|(o, row)| {
            for bi in 0..batch {
                let gb = &g.data()[(bi * c_out + o) * time..(bi * c_out + o + 1) * time];
                let xb = &x.data()[bi * c_in * time..(bi + 1) * c_in * time];
                for i in 0..c_in {
                    row[i] = row[i] + dot(gb, &xb[i * time..(i + 1) * time]);
                }
            }
        });
    dw
}

fn dense_backward_b<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (batch, c_out, time) = g.dims3().unwrap();
    let mut db = Tensor::zeros(&[c_out]);
    for o in 0..c_out {
        let mut acc = T::zero();
        for bi in 0..batch {
            acc = acc + sum(&g.data()[(bi * c_out + o) * time..(bi * c_out + o + 1) * time]);
        }
        db.data_mut()[o] = acc;
    }
    db
}

fn dense_backward_x<T: Real>(g: &Tensor<T>, w: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let (batch, c_in, time) = (x_shape[0], x_shape[1], x_shape[2]);
    let (c_out, _) = w.dims2().unwrap();
    let mut dx = Tensor::zeros(x_shape);
    dx.data_mut()
        .par_chunks_mut(time)
        .enumerate()
        .for_each(|(row, out)| {
            let bi = row / c_in;
            let i = row % c_in;
            for o in 0..c_out {
                let gb = &g.data()[(bi * c_out + o) * time..(bi * c_out + o + 1) * time];
                axpy(out, w.data()[o * c_in + i], gb);
            }
        });
    let _ = batch;
    dx
}

fn depthwise_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (batch, channels, time) = x.dims3().unwrap();
    let (_, k) = w.dims2().unwrap();
    let pad = (k - 1) / 2;
    let mut y = Tensor::zeros(&[batch, channels, time]);
    y.data_mut()
        .par_chunks_mut(time)
        .enumerate()
        .for_each(|(row, out)| {
            let c = row % channels;
            let xin = &x.data()[row * time..(row + 1) * time];
            for i in 0..k {
                let shift = i as isize - pad as isize;
                let wi = w.data()[c * k + i];
                shifted_axpy(out, wi, xin, shift);
            }
        });
    let _ = batch;
    y
}

/// `y[l] += a * x[l + shift]` over the valid range.
fn shifted_axpy<T: Real>(y: &mut [T], a: T, x: &[T], shift: isize) {
    let time = y.len() as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (time - shift).clamp(0, time) as usize;
    if lo >= hi {
        return;
    }
    let xs = (lo as isize + shift) as usize;
    axpy(&mut y[lo..hi], a, &x[xs..xs + (hi - lo)]);
}

/// Offset dot product `sum_l g[l] * x[l + shift]` over the valid range.
fn shifted_dot<T: Real>(g: &[T], x: &[T], shift: isize) -> T {
    let time = g.len() as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (time - shift).clamp(0, time) as usize;
    if lo >= hi {
        return T::zero();
    }
    let xs = (lo as isize + shift) as usize;
    dot(&g[lo..hi], &x[xs..xs + (hi - lo)])
}

fn depthwise_backward_x<T: Real>(g: &Tensor<T>, w: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let channels = x_shape[1];
    let time = x_shape[2];
    let (_, k) = w.dims2().unwrap();
    let pad = (k - 1) / 2;
    let mut dx = Tensor::zeros(x_shape);
    dx.data_mut()
        .par_chunks_mut(time)
        .enumerate()
        .for_each(|(row, out)| {
            let c = row % channels;
            let gin = &g.data()[row * time..(row + 1) * time];
            for i in 0..k {
                let shift = pad as isize - i as isize;
                let wi = w.data()[c * k + i];
                shifted_axpy(out, wi, gin, shift);
            }
        });
    dx
}

fn depthwise_backward_w<T: Real>(g: &Tensor<T>, x: &Tensor<T>, w_shape: &[usize]) -> Tensor<T> {
    let (batch, channels, time) = x.dims3().unwrap();
    let k = w_shape[1];
    let pad = (k - 1) / 2;
    let mut dw = Tensor::zeros(w_shape);
    dw.data_mut()
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(c, row)| {
            for bi in 0..batch {
                let base = (bi * channels + c) * time;
                let gr = &g.data()[base..base + time];
                let xr = &x.data()[base..base + time];
                for i in 0..k {
                    let shift = i as isize - pad as isize;
                    row[i] = row[i] + shifted_dot(gr, xr, shift);
                }
            }
        });
    dw
}

type BnForward<T> = (Tensor<T>, Tensor<T>, Vec<T>, BatchStats<T>);

fn bn_train_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> BnForward<T> {
    let (batch, channels, time) = x.dims3().unwrap();
    let count = batch * time;
    let inv_count = T::one() / rl::<T>(count as f64);
    let eps_t = rl::<T>(eps);

    let stats: Vec<(T, T)> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut acc = T::zero();
            for bi in 0..batch {
                let base = (bi * channels + c) * time;
                acc = acc + sum(&x.data()[base..base + time]);
            }
            let mean = acc * inv_count;
            let mut var_acc = T::zero();
            for bi in 0..batch {
                let base = (bi * channels + c) * time;
                for &v in &x.data()[base..base + time] {
                    let d = v - mean;
                    var_acc = var_acc + d * d;
                }
            }
            (mean, var_acc * inv_count)
        })
        .collect();

    let mean: Vec<T> = stats.iter().map(|s| s.0).collect();
    let var: Vec<T> = stats.iter().map(|s| s.1).collect();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();

    let mut xhat = Tensor::zeros(&[batch, channels, time]);
    let mut y = Tensor::zeros(&[batch, channels, time]);
    {
        let xs = x.data();
        let xh = xhat.data_mut();
        xh.par_chunks_mut(time).enumerate().for_each(|(row, out)| {
            let c = row % channels;
            let (m, is) = (mean[c], inv_std[c]);
            for (o, &v) in out.iter_mut().zip(&xs[row * time..(row + 1) * time]) {
                *o = (v - m) * is;
            }
        });
        let ys = y.data_mut();
        ys.par_chunks_mut(time).enumerate().for_each(|(row, out)| {
            let c = row % channels;
            let (gm, bt) = (gamma.data()[c], beta.data()[c]);
            for (o, &h) in out.iter_mut().zip(&xhat.data()[row * time..(row + 1) * time]) {
                *o = gm * h + bt;
            }
        });
    }
    let stats = BatchStats { mean, var, count };
    (y, xhat, inv_std, stats)
}

fn bn_eval_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Tensor<T> {
    let (_, channels, time) = x.dims3().unwrap();
    let mut y = Tensor::zeros(x.shape());
    let xs = x.data();
    y.data_mut()
        .par_chunks_mut(time)
        .enumerate()
        .for_each(|(row, out)| {
            let c = row % channels;
            let (m, is, gm, bt) = (mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
            for (o, &v) in out.iter_mut().zip(&xs[row * time..(row + 1) * time]) {
                *o = gm * (v - m) * is + bt;
            }
        });
    y
}

fn bn_train_backward<T: Real>(
    g: &Tensor<T>,
    ctx: &BnCtx<T>,
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (batch, channels, time) = ctx.xhat.dims3().unwrap();
    let count = rl::<T>((batch * time) as f64);

    let sums: Vec<(T, T)> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for bi in 0..batch {
                let base = (bi * channels + c) * time;
                let gr = &g.data()[base..base + time];
                sg = sg + sum(gr);
                sgx = sgx + dot(gr, &ctx.xhat.data()[base..base + time]);
            }
            (sg, sgx)
        })
        .collect();

    let mut dgamma = Tensor::zeros(&[channels]);
    let mut dbeta = Tensor::zeros(&[channels]);
    for c in 0..channels {
        dbeta.data_mut()[c] = sums[c].0;
        dgamma.data_mut()[c] = sums[c].1;
    }

    let mut dx = Tensor::zeros(ctx.xhat.shape());
    dx.data_mut()
        .par_chunks_mut(time)
        .enumerate()
        .for_each(|(row, out)| {
            let c = row % channels;
            let (sg, sgx) = sums[c];
            let scale = gamma.data()[c] * ctx.inv_std[c] / count;
            let gr = &g.data()[row * time..(row + 1) * time];
            let xh = &ctx.xhat.data()[row * time..(row + 1) * time];
            for i in 0..time {
                out[i] = scale * (count * gr[i] - sg - xh[i] * sgx);
            }
        });
    (dx, dgamma, dbeta)
}

fn bn_eval_backward<T: Real>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (batch, channels, time) = x.dims3().unwrap();
    let mut dgamma = Tensor::zeros(&[channels]);
    let mut dbeta = Tensor::zeros(&[channels]);
    for c in 0..channels {
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for bi in 0..batch {
            let base = (bi * channels + c) * time;
            let gr = &g.data()[base..base + time];
            sg = sg + sum(gr);
            for (i, &gi) in gr.iter().enumerate() {
                sgx = sgx + gi * (x.data()[base + i] - mean[c]) * inv_std[c];
            }
        }
        dbeta.data_mut()[c] = sg;
        dgamma.data_mut()[c] = sgx;
    }
    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(time)
        .enumerate()
        .for_each(|(row, out)| {
            let c = row % channels;
            let scale = gamma.data()[c] * inv_std[c];
            let gr = &g.data()[row * time..(row + 1) * time];
            for i in 0..time {
                out[i] = scale * gr[i];
            }
        });
    (dx, dgamma, dbeta)
}

fn phase_refine_forward<T: Real>(
    base: &Tensor<T>,
    residual: &Tensor<T>,
    fallback_norm: T,
) -> Tensor<T> {
    let (batch, channels, time) = base.dims3().unwrap();
    let half = channels / 2;
    let mut y = Tensor::zeros(base.shape());
    {
        let out = y.data_mut();
        for bi in 0..batch {
            for k in 0..half {
                let ci = (bi * channels + k) * time;
                let si = (bi * channels + half + k) * time;
                for l in 0..time {
                    let (bc, bs) = (base.data()[ci + l], base.data()[si + l]);
                    let (rc, rs) = (residual.data()[ci + l], residual.data()[si + l]);
                    if rc == T::zero() && rs == T::zero() {
                        out[ci + l] = bc;
                        out[si + l] = bs;
                        continue;
                    }
                    let (c, s) = (bc + rc, bs + rs);
                    let n = c.hypot(s);
                    if n < fallback_norm {
                        out[ci + l] = bc;
                        out[si + l] = bs;
                    } else {
                        out[ci + l] = c / n;
                        out[si + l] = s / n;
                    }
                }
            }
        }
    }
    y
}

fn phase_refine_backward<T: Real>(
    g: &Tensor<T>,
    base: &Tensor<T>,
    residual: &Tensor<T>,
    _out: &Tensor<T>,
    fallback_norm: T,
) -> Tensor<T> {
    let (batch, channels, time) = base.dims3().unwrap();
    let half = channels / 2;
    let mut dv = Tensor::zeros(base.shape());
    {
        let out = dv.data_mut();
        for bi in 0..batch {
            for k in 0..half {
                let ci = (bi * channels + k) * time;
                let si = (bi * channels + half + k) * time;
                for l in 0..time {
                    let (bc, bs) = (base.data()[ci + l], base.data()[si + l]);
                    let (rc, rs) = (residual.data()[ci + l], residual.data()[si + l]);
                    let (c, s) = (bc + rc, bs + rs);
                    let n = c.hypot(s);
                    // Degenerate bins clamp to the base phase: flat region.
                    if n < fallback_norm && !(rc == T::zero() && rs == T::zero()) {
                        continue;
                    }
                    let (uc, us) = (c / n, s / n);
                    let (gc, gs) = (g.data()[ci + l], g.data()[si + l]);
                    let proj = uc * gc + us * gs;
                    out[ci + l] = (gc - uc * proj) / n;
                    out[si + l] = (gs - us * proj) / n;
                }
            }
        }
    }
    dv
}

fn si_sdr_backward<T: Real>(
    g: &Tensor<T>,
    est: &Tensor<T>,
    target: &Tensor<T>,
    items: &[SiSdrItem<T>],
) -> Tensor<T> {
    let (batch, time) = est.dims2().unwrap();
    let seed = g.data()[0];
    let scale = -seed / rl::<T>(batch as f64);
    let ten_over_ln10 = rl::<T>(10.0 / std::f64::consts::LN_10);
    let two = rl::<T>(2.0);
    let mut dx = Tensor::zeros(est.shape());
    for bi in 0..batch {
        let item = &items[bi];
        if item.saturated {
            continue;
        }
        let s = &target.data()[bi * time..(bi + 1) * time];
        let x = &est.data()[bi * time..(bi + 1) * time];
        let p = sum_squares(s);
        // <e, s> = <x, s> - alpha * P, kept explicit so the gradient matches
        // finite differences even with the epsilon floors.
        let a = dot(x, s);
        let es = a - item.alpha * p;
        let num_coef = two * item.alpha / item.num;
        let den_coef = two / item.den;
        let out = &mut dx.data_mut()[bi * time..(bi + 1) * time];
        for i in 0..time {
            let e = x[i] - item.alpha * s[i];
            let d_ln_num = num_coef * s[i];
            let d_ln_den = den_coef * (e - es / p * s[i]);
            out[i] = scale * ten_over_ln10 * (d_ln_num - d_ln_den);
        }
    }
    dx
}

//! Per-layer ternarization with a trainable threshold.
//!
//! Weights of a layer are summarized by their mean `μ` and population standard
//! deviation `σ`. A trainable scalar `δ` is clipped to `δᶜ = hardtanh(|δ|, 0, 3σ)`
//! and every weight maps to a code in `{−1, 0, +1}` around `μ ± δᶜ`. The codes
//! are multiplied by the upper-truncated Gaussian mean `S = μ + σ·m(δᶜ/σ)`.
//!
//! Two gradient paths exist, one per training phase:
//!
//! * threshold phase: `S` is a tape function of `δ` (frozen `μ`, `σ`), the
//!   codes are constants and the weights get nothing;
//! * weight phase: `S` is a constant and the code node passes `g/S` back to the
//!   weights, so `∂(S·Tern(w))/∂w = 1`. With gradient correctness disabled the
//!   code node passes `g` unchanged (plain STE).

use serde::Serialize;

use crate::autograd::{register_custom_grad, Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{
    clip_threshold, d_truncated_mean_d_delta, hardtanh, hardtanh_grad, signum0, truncated_upper_mean,
    TruncGaussParams, CLIP_SIGMAS,
};
use crate::tensor::Tensor;

/// Default threshold initialization: `δ = 0.1·max|w|`.
pub const DEFAULT_INIT_FRACTION: f64 = 0.1;

/// Arithmetic mean and population standard deviation (divide by N).
pub fn layer_stats(w: &[f64]) -> Result<(f64, f64)> {
    if w.len() < 2 {
        return Err(Error::InvalidParameter(format!("layer statistics need ≥ 2 weights, got {}", w.len())));
    }
    let n = w.len() as f64;
    let mu = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    Ok((mu, var.sqrt()))
}

/// Trainable threshold plus the statistics cached by the last refresh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantizerState {
    delta: f64,
    mu: f64,
    sigma: f64,
    delta_c: f64,
    scale: f64,
}

impl QuantizerState {
    /// A state with the given threshold whose caches still need a [`refresh`](Self::refresh).
    pub fn new(delta: f64) -> Self {
        Self { delta, mu: 0.0, sigma: 0.0, delta_c: 0.0, scale: 0.0 }
    }

    /// `δ = fraction·max|w|`, refreshed against `w`.
    pub fn with_init_fraction(w: &[f64], fraction: f64) -> Result<Self> {
        if !(fraction >= 0.0 && fraction.is_finite()) {
            return Err(Error::InvalidParameter(format!("threshold init fraction must be ≥ 0, got {fraction}")));
        }
        let max_abs = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self::new(fraction * max_abs).refresh(w)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn delta_c(&self) -> f64 {
        self.delta_c
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Replaces the threshold. Caches become stale until the next refresh.
    pub fn set_delta(&mut self, delta: f64) {
        self.delta = delta;
    }

    /// Recomputes `μ`, `σ`, `δᶜ` and `S` from `w`; `δ` is untouched.
    pub fn refresh(&self, w: &[f64]) -> Result<Self> {
        let (mu, sigma) = layer_stats(w)?;
        self.with_stats(mu, sigma, w.len())
    }

    /// Rebuilds the caches from externally supplied statistics.
    pub fn with_stats(&self, mu: f64, sigma: f64, count: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::DegenerateLayer { layer: String::new(), count });
        }
        let delta_c = clip_threshold(self.delta, sigma)?;
        let scale = truncated_upper_mean(&TruncGaussParams::new(mu, sigma, delta_c)?);
        if !(scale > 0.0) {
            return Err(Error::NonPositiveScale { layer: String::new(), scale });
        }
        Ok(Self { delta: self.delta, mu, sigma, delta_c, scale })
    }

    /// True when the caches equal a refresh against `w`.
    pub fn is_fresh(&self, w: &[f64]) -> bool {
        self.refresh(w).map(|s| s == *self).unwrap_or(false)
    }

    /// `∂S/∂δ` through the clip: `m'(α)·sign(δ)·1{|δ| ∈ (0, 3σ)}`.
    pub fn scale_grad_wrt_delta(&self) -> Result<f64> {
        let p = TruncGaussParams::new(self.mu, self.sigma, self.delta_c)?;
        let clip = hardtanh_grad(self.delta.abs(), 0.0, CLIP_SIGMAS * self.sigma);
        Ok(d_truncated_mean_d_delta(&p) * clip * signum0(self.delta))
    }

    pub fn codes(&self, w: &Tensor) -> TernaryCodes {
        TernaryCodes::from_weights(w, self)
    }
}

/// Elementwise ternarization around `μ ± δᶜ`; values on the boundary map to 0.
pub fn tern(w: &Tensor, mu: f64, delta_c: f64) -> Tensor {
    w.map(|v| tern_value(v, mu, delta_c) as f64)
}

#[inline]
fn tern_value(v: f64, mu: f64, delta_c: f64) -> i8 {
    if v > mu + delta_c {
        1
    } else if v < mu - delta_c {
        -1
    } else {
        0
    }
}

/// Codes in `{−1, 0, +1}` for one layer with the scale that restores effective weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryCodes {
    shape: Vec<usize>,
    codes: Vec<i8>,
    scale: f64,
}

impl TernaryCodes {
    pub fn new(shape: Vec<usize>, codes: Vec<i8>, scale: f64) -> Result<Self> {
        if let Some(&bad) = codes.iter().find(|c| !(-1..=1).contains(*c)) {
            return Err(Error::InvalidCode(bad));
        }
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::ShapeMismatch {
                op: "ternary codes",
                detail: format!("shape {shape:?} vs {} codes", codes.len()),
            });
        }
        Ok(Self { shape, codes, scale })
    }

    pub fn from_weights(w: &Tensor, state: &QuantizerState) -> Self {
        let codes = w.data().iter().map(|&v| tern_value(v, state.mu, state.delta_c)).collect();
        Self { shape: w.shape().to_vec(), codes, scale: state.scale }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.codes.iter().map(|&c| c as f64).collect()).expect("codes match shape")
    }

    /// `scale · code`, elementwise.
    pub fn effective_weights(&self) -> Tensor {
        self.to_tensor().map(|c| c * self.scale)
    }
}

/// Fraction of zero codes.
pub fn sparsity(codes: &TernaryCodes) -> Result<f64> {
    if codes.is_empty() {
        return Err(Error::Empty("layer"));
    }
    Ok(codes.codes.iter().filter(|&&c| c == 0).count() as f64 / codes.len() as f64)
}

/// Which half of the alternating update the forward pass serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantPhase {
    /// Weights train through the STE; `S` is frozen.
    Weight { grad_correctness: bool },
    /// The threshold trains through `S`; codes are frozen.
    Threshold,
}

/// Tape handles for one quantized weight.
#[derive(Debug, Clone, Copy)]
pub struct QuantizedWeight {
    /// Code tensor, shaped like the weight.
    pub codes: Var,
    /// Scalar `S`.
    pub scale: Var,
    /// Trainable threshold leaf (threshold phase only).
    pub delta: Option<Var>,
}

/// Records the codes and scale of `weight` on the tape, wired for `phase`.
pub fn quantize_weight(tape: &mut Tape, weight: Var, state: &QuantizerState, phase: QuantPhase) -> Result<QuantizedWeight> {
    let w = tape.value(weight);
    if cfg!(debug_assertions) && !state.is_fresh(w.data()) {
        return Err(Error::StaleQuantizer(String::new()));
    }
    let (mu, sigma, delta_c, scale) = (state.mu, state.sigma, state.delta_c, state.scale);
    match phase {
        QuantPhase::Threshold => {
            let codes = tape.constant(tern(w, mu, delta_c));
            let delta = tape.leaf(Tensor::scalar(state.delta).with_grad());
            let scale = scale_from_delta(tape, delta, mu, sigma)?;
            Ok(QuantizedWeight { codes, scale, delta: Some(delta) })
        }
        QuantPhase::Weight { grad_correctness } => {
            let factor = if grad_correctness { scale.recip() } else { 1.0 };
            let ste = register_custom_grad(
                "tern",
                move |x| Ok(tern(x[0], mu, delta_c)),
                move |ctx| vec![ctx.grad_output.iter().map(|g| g * factor).collect()],
            );
            let codes = tape.apply_custom(&ste, &[weight])?;
            let scale = tape.constant(Tensor::scalar(scale));
            Ok(QuantizedWeight { codes, scale, delta: None })
        }
    }
}

/// `w' = S·Tern(w)` on the tape.
pub fn forward_quantized(tape: &mut Tape, weight: Var, state: &QuantizerState, phase: QuantPhase) -> Result<(Var, QuantizedWeight)> {
    let q = quantize_weight(tape, weight, state, phase)?;
    let effective = tape.mul_scalar(q.scale, q.codes)?;
    Ok((effective, q))
}

/// `S(δ) = μ + σ·m(hardtanh(|δ|, 0, 3σ)/σ)` as a chain of custom tape nodes.
pub fn scale_from_delta(tape: &mut Tape, delta: Var, mu: f64, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    let cap = CLIP_SIGMAS * sigma;
    let abs = register_custom_grad(
        "abs",
        |x| Ok(x[0].map(f64::abs)),
        |ctx| vec![vec![ctx.grad_output[0] * signum0(ctx.inputs[0].data()[0])]],
    );
    let clip = register_custom_grad(
        "hardtanh",
        move |x| Ok(Tensor::scalar(hardtanh(x[0].item()?, 0.0, cap)?)),
        move |ctx| vec![vec![ctx.grad_output[0] * hardtanh_grad(ctx.inputs[0].data()[0], 0.0, cap)]],
    );
    let mean = register_custom_grad(
        "truncated_upper_mean",
        move |x| Ok(Tensor::scalar(truncated_upper_mean(&TruncGaussParams::new(mu, sigma, x[0].item()?)?))),
        move |ctx| {
            let p = TruncGaussParams::new(mu, sigma, ctx.inputs[0].data()[0]).expect("clipped threshold in range");
            vec![vec![ctx.grad_output[0] * d_truncated_mean_d_delta(&p)]]
        },
    );
    let a = tape.apply_custom(&abs, &[delta])?;
    let c = tape.apply_custom(&clip, &[a])?;
    tape.apply_custom(&mean, &[c])
}

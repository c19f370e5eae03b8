//! Finite-difference verification of every analytic gradient used in training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::error::Result;
use crate::gaussian::{clip_threshold, d_truncated_mean_d_delta, truncated_upper_mean, TruncGaussParams, CLIP_SIGMAS};
use crate::network::{apply_linear, run_layers, ForwardMode, Model};
use crate::tensor::Tensor;
use crate::ternarizer::{QuantPhase, QuantizerState};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, errs: &[f64], tolerance: f64) -> Self {
        let max_rel_err = errs.iter().fold(0.0f64, |m, &e| if e.is_nan() { f64::NAN } else { m.max(e) });
        Self { name: name.into(), checked: errs.len(), max_rel_err, tolerance, passed: max_rel_err <= tolerance && !errs.is_empty() }
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `∂S/∂δ` against central differences at random `(μ, σ, δ)` whose clipped
/// threshold stays at least `1e-3·σ` away from `0` and `3σ`.
pub fn check_scale_derivative(rng: &mut impl Rng, samples: usize) -> Result<CheckResult> {
    let mut errs = Vec::with_capacity(samples);
    while errs.len() < samples {
        // Weight layers are near-centred: |μ| ≤ σ/2 keeps S positive.
        let sigma = rng.gen_range(0.01..2.0);
        let mu = sigma * rng.gen_range(-0.5..0.5);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let delta: f64 = sign * rng.gen_range(1e-3 * sigma..(CLIP_SIGMAS - 1e-3) * sigma);
        let s = |d: f64| -> f64 {
            let dc = clip_threshold(d, sigma).expect("sigma > 0");
            truncated_upper_mean(&TruncGaussParams::new(mu, sigma, dc).expect("valid"))
        };
        let state = QuantizerState::new(delta).with_stats(mu, sigma, 2)?;
        let analytic = state.scale_grad_wrt_delta()?;
        let numeric = central_difference(s, delta, FD_STEP);
        errs.push(rel_err(analytic, numeric, 1e-8));
    }
    Ok(CheckResult::new("scale_derivative", &errs, 1e-5))
}

/// `∂S/∂δᶜ` in standardized form against central differences on a grid
/// inside the clip range.
pub fn check_mills_derivative() -> Result<CheckResult> {
    let f = |d: f64| truncated_upper_mean(&TruncGaussParams::new(0.0, 1.0, d).expect("inside clip"));
    let errs = (0..=59)
        .map(|i| {
            let d = 0.025 + 0.05 * i as f64;
            let p = TruncGaussParams::new(0.0, 1.0, d)?;
            Ok(rel_err(d_truncated_mean_d_delta(&p), central_difference(f, d, FD_STEP), 1e-8))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckResult::new("mills_derivative", &errs, 1e-5))
}

/// Builds a model with nonzero random biases so no unit sits exactly on a
/// ReLU kink.
fn random_model(descriptor: &str, rng: &mut ChaCha8Rng) -> Result<Model> {
    let mut model = Model::build_from_config(descriptor, rng.gen())?;
    for p in model.params_mut() {
        p.bias.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    Ok(model)
}

fn random_batch(model: &Model, n: usize, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
    let mut shape = vec![n];
    shape.extend_from_slice(model.arch().input_shape());
    let len: usize = shape.iter().product();
    let x = Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape");
    let classes = model.arch().num_classes();
    (x, (0..n).map(|_| rng.gen_range(0..classes)).collect())
}

fn float_loss(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let pass = model.forward(&mut tape, vx, ForwardMode::Float)?;
    let loss = tape.softmax_cross_entropy(pass.logits, y)?;
    tape.value(loss).item()
}

/// Float-mode weight and bias gradients against central differences on a
/// random subset of coordinates.
pub fn check_float_network(descriptor: &str, rng: &mut ChaCha8Rng, coords_per_tensor: usize) -> Result<CheckResult> {
    let model = random_model(descriptor, rng)?;
    let (x, y) = random_batch(&model, 4, rng);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let pass = model.forward(&mut tape, vx, ForwardMode::Float)?;
    let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
    tape.backward(loss)?;
    let mut errs = Vec::new();
    for (li, vars) in pass.params.iter().enumerate() {
        for (is_bias, var) in [(false, vars.weight), (true, vars.bias)] {
            let analytic = tape.grad(var).expect("leaf").to_vec();
            for _ in 0..coords_per_tensor {
                let i = rng.gen_range(0..analytic.len());
                let at = |v: f64| {
                    let mut m = model.clone();
                    let p = &mut m.params_mut()[li];
                    let t = if is_bias { &mut p.bias } else { &mut p.weight };
                    t.data_mut()[i] = v;
                    float_loss(&m, &x, &y).expect("same shapes")
                };
                let p = &model.params()[li];
                let x0 = if is_bias { p.bias.data()[i] } else { p.weight.data()[i] };
                errs.push(rel_err(analytic[i], central_difference(at, x0, FD_STEP), 1e-6));
            }
        }
    }
    Ok(CheckResult::new(&format!("float_network[{descriptor}]"), &errs, 1e-4))
}

/// Threshold-phase loss with codes frozen at their current values and each
/// layer's scale recomputed from `deltas`.
fn threshold_loss(model: &Model, x: &Tensor, y: &[usize], codes: &[Option<Tensor>], deltas: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let logits = run_layers(model.arch(), &mut tape, vx, |tape, idx, spec, input| {
        let p = &model.params()[idx];
        let out = match (&p.quant, &codes[idx]) {
            (Some(q), Some(c)) => {
                let dc = clip_threshold(deltas[idx], q.sigma())?;
                let s = truncated_upper_mean(&TruncGaussParams::new(q.mu(), q.sigma(), dc)?);
                let c = tape.constant(c.clone());
                let acc = apply_linear(tape, spec, input, c)?;
                tape.scale_by(acc, s)
            }
            _ => {
                let w = tape.constant(p.weight.clone());
                apply_linear(tape, spec, input, w)?
            }
        };
        let b = tape.constant(p.bias.clone());
        tape.add_bias(out, b)
    })?;
    let loss = tape.softmax_cross_entropy(logits, y)?;
    tape.value(loss).item()
}

/// Threshold-phase tape gradients `∂L/∂δ` against central differences.
pub fn check_threshold_phase(descriptor: &str, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut model = random_model(descriptor, rng)?;
    model.init_thresholds(rng.gen_range(0.05..0.5))?;
    let (x, y) = random_batch(&model, 6, rng);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let pass = model.forward(&mut tape, vx, ForwardMode::Ternary(QuantPhase::Threshold))?;
    let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
    tape.backward(loss)?;
    let codes: Vec<Option<Tensor>> = model.ternary_codes().into_iter().map(|c| c.map(|c| c.to_tensor())).collect();
    let deltas: Vec<f64> = model.params().iter().map(|p| p.quant.map_or(0.0, |q| q.delta())).collect();
    let mut errs = Vec::new();
    for (li, vars) in pass.params.iter().enumerate() {
        let Some(dv) = vars.delta else { continue };
        let analytic = tape.grad(dv).expect("threshold leaf")[0];
        let at = |d: f64| {
            let mut ds = deltas.clone();
            ds[li] = d;
            threshold_loss(&model, &x, &y, &codes, &ds).expect("same shapes")
        };
        errs.push(rel_err(analytic, central_difference(at, deltas[li], FD_STEP), 1e-6));
    }
    Ok(CheckResult::new(&format!("threshold_phase[{descriptor}]"), &errs, 1e-5))
}

/// Weight-phase gradients with the `1/S` correction equal the float-model
/// gradients taken at the effective weights `S·Tern(w)`.
pub fn check_ste_identity(descriptor: &str, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut model = random_model(descriptor, rng)?;
    model.init_thresholds(0.1)?;
    let (x, y) = random_batch(&model, 5, rng);
    let grads = |m: &Model, mode: ForwardMode| -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let pass = m.forward(&mut tape, vx, mode)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
        tape.backward(loss)?;
        Ok(pass.params.iter().map(|v| tape.grad(v.weight).expect("leaf").to_vec()).collect())
    };
    let ternary = grads(&model, ForwardMode::Ternary(QuantPhase::Weight { grad_correctness: true }))?;
    let mut surrogate = model.clone();
    for (p, c) in surrogate.params_mut().iter_mut().zip(model.ternary_codes()) {
        if let Some(c) = c {
            p.weight = c.effective_weights();
        }
    }
    let float = grads(&surrogate, ForwardMode::Float)?;
    let scale = float.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let errs: Vec<f64> = ternary
        .iter()
        .flatten()
        .zip(float.iter().flatten())
        .map(|(a, b)| rel_err(*a, *b, 1e-3 * scale))
        .collect();
    Ok(CheckResult::new(&format!("ste_identity[{descriptor}]"), &errs, 1e-6))
}

/// `S·(x·Tern(w))` against `x·(S·Tern(w))` on random instances.
pub fn check_commutation(rng: &mut ChaCha8Rng, instances: usize) -> Result<CheckResult> {
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (n, d, k) = (rng.gen_range(1..5), rng.gen_range(2..20), rng.gen_range(1..8));
        let w = Tensor::new(vec![d, k], (0..d * k).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let Ok(state) = QuantizerState::with_init_fraction(w.data(), rng.gen_range(0.0..0.5)) else { continue };
        let codes = state.codes(&w);
        let mut tape = Tape::new();
        let vx = tape.constant(x);
        let vc = tape.constant(codes.to_tensor());
        let ve = tape.constant(codes.effective_weights());
        let acc = tape.matmul(vx, vc)?;
        let after = tape.scale_by(acc, codes.scale());
        let before = tape.matmul(vx, ve)?;
        let scale = tape.value(before).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in tape.value(after).data().iter().zip(tape.value(before).data()) {
            errs.push(rel_err(*a, *b, 1e-12f64.max(1e-9 * scale)));
        }
    }
    Ok(CheckResult::new("commutation", &errs, 1e-6))
}

/// The full suite on small dense and convolutional models.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = "in:1x6x6,conv:3:3:1:1,relu,conv:4:2:2:0,relu,flatten,dense:3";
    Ok(vec![
        check_mills_derivative()?,
        check_scale_derivative(&mut rng, 1000)?,
        check_float_network("mlp-7-6-5-3", &mut rng, 8)?,
        check_float_network(conv, &mut rng, 8)?,
        check_threshold_phase("mlp-7-6-5-3", &mut rng)?,
        check_threshold_phase(conv, &mut rng)?,
        check_ste_identity("mlp-7-6-5-3", &mut rng)?,
        check_ste_identity(conv, &mut rng)?,
        check_commutation(&mut rng, 100)?,
    ])
}

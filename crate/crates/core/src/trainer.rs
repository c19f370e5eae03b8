//! Float pretraining and the alternating threshold/weight training loop.
//!
//! Every ternary step runs on one batch: refresh the quantizers, update every
//! `δ` by vanilla SGD with the codes frozen, refresh again so the codes and
//! scales match the new thresholds, then update weights and biases through
//! the straight-through estimator with `S` frozen.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{to_f32_precision, ForwardMode, Model};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;
use crate::ternarizer::{sparsity, QuantPhase, DEFAULT_INIT_FRACTION};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 1000;

/// Vanilla SGD on the thresholds. There is deliberately no weight-decay field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct ThresholdConfig {
    /// `None` follows the weight learning rate.
    pub lr: Option<f64>,
}

/// Piecewise-constant learning rate: from each `(epoch, lr)` breakpoint on,
/// `lr` applies until the next breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct LrSchedule {
    breakpoints: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(mut breakpoints: Vec<(usize, f64)>) -> Result<Self> {
        if let Some(&(_, lr)) = breakpoints.iter().find(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidParameter(format!("schedule learning rates must be > 0, got {lr}")));
        }
        breakpoints.sort_by_key(|&(e, _)| e);
        if breakpoints.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidParameter("duplicate schedule epoch".into()));
        }
        Ok(Self { breakpoints })
    }

    /// Parses `epoch:lr,epoch:lr,...`; an empty string is an empty schedule.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |item: &str| Error::InvalidParameter(format!("bad schedule entry `{item}`, expected epoch:lr"));
        let points = s
            .split(',')
            .map(str::trim)
            .filter(|item| !item.is_empty())
            .map(|item| {
                let (e, lr) = item.split_once(':').ok_or_else(|| bad(item))?;
                Ok((e.trim().parse().map_err(|_| bad(item))?, lr.trim().parse().map_err(|_| bad(item))?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points)
    }

    pub fn breakpoints(&self) -> &[(usize, f64)] {
        &self.breakpoints
    }

    /// Learning rate for `epoch` (0-based) given the configured base rate.
    pub fn lr_at(&self, epoch: usize, base: f64) -> f64 {
        self.breakpoints.iter().take_while(|(e, _)| *e <= epoch).last().map_or(base, |&(_, lr)| lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Optimizer for weights and biases.
    pub optimizer: OptimizerConfig,
    pub threshold: ThresholdConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Scale the straight-through gradient by `1/S` (off: unit gradient).
    pub grad_correctness: bool,
    pub init_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::sgd_momentum(0.1, 0.9),
            threshold: ThresholdConfig::default(),
            batch_size: 100,
            seed: 0,
            schedule: LrSchedule::default(),
            grad_correctness: true,
            init_fraction: DEFAULT_INIT_FRACTION,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if let Some(lr) = self.threshold.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidParameter(format!("threshold lr must be ≥ 0, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be > 0".into()));
        }
        if !(self.init_fraction >= 0.0 && self.init_fraction.is_finite()) {
            return Err(Error::InvalidParameter(format!("threshold init fraction must be ≥ 0, got {}", self.init_fraction)));
        }
        Ok(())
    }

    pub fn threshold_lr(&self) -> f64 {
        self.threshold.lr.unwrap_or(self.optimizer.lr)
    }

    /// Weight and threshold rates for `epoch`. A breakpoint rescales the
    /// threshold rate by the same factor as the weight rate.
    pub fn rates_at(&self, epoch: usize) -> (f64, f64) {
        let lr = self.schedule.lr_at(epoch, self.optimizer.lr);
        (lr, self.threshold_lr() * lr / self.optimizer.lr)
    }
}

/// Per-layer quantizer snapshot at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub name: String,
    pub delta: f64,
    pub delta_c: f64,
    pub scale: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub layers: Vec<LayerMetrics>,
}

/// Losses of the two halves of one ternary step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub threshold: f64,
    pub weight: f64,
}

fn check_loss(loss: f64, epoch: usize, batch: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Divergence { epoch, batch, loss })
    }
}

/// Applies one optimizer step to every weight and bias from a finished tape,
/// keeping values `f32`-representable.
fn update_params(model: &mut Model, opt: &mut Optimizer, tape: &Tape, vars: &[crate::network::ParamVars]) {
    for (i, (p, v)) in model.params_mut().iter_mut().zip(vars).enumerate() {
        for (slot, (t, var)) in [(2 * i, (&mut p.weight, v.weight)), (2 * i + 1, (&mut p.bias, v.bias))] {
            let g = tape.grad(var).expect("parameter leaf has a gradient").to_vec();
            opt.step(slot, t.data_mut(), &g);
            t.data_mut().iter_mut().for_each(|x| *x = to_f32_precision(*x));
        }
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn check_dataset(model: &Model, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if ds.num_classes() > model.arch().num_classes() {
        return Err(Error::Dataset(format!(
            "dataset has {} classes but the model outputs {}",
            ds.num_classes(),
            model.arch().num_classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy and top-1 accuracy. Ternary evaluation uses freshly
/// refreshed quantizer states; the passed model is not modified.
pub fn evaluate_full(model: &Model, ds: &Dataset, mode: ForwardMode) -> Result<(f64, f64)> {
    check_dataset(model, ds)?;
    let refreshed;
    let model = if matches!(mode, ForwardMode::Ternary(_)) && !model.quantizers_fresh() {
        let mut m = model.clone();
        m.refresh_quantizers()?;
        refreshed = m;
        &refreshed
    } else {
        model
    };
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, y) = ds.batch(chunk);
        let mut tape = Tape::new();
        let vx = tape.constant(x);
        let pass = model.forward(&mut tape, vx, mode)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
        loss_sum += tape.value(loss).item()? * chunk.len() as f64;
        let pred = tape.value(pass.logits).argmax_rows()?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok((loss_sum / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Top-1 accuracy in the requested mode.
pub fn evaluate(model: &Model, ds: &Dataset, mode: ForwardMode) -> Result<f64> {
    evaluate_full(model, ds, mode).map(|(_, acc)| acc)
}

fn epoch_metrics(model: &Model, ds: &Dataset, epoch: usize, split: &str, mode: ForwardMode) -> Result<EpochMetrics> {
    let (loss, accuracy) = evaluate_full(model, ds, mode)?;
    let layers = match mode {
        ForwardMode::Float => Vec::new(),
        ForwardMode::Ternary(_) => layer_metrics(model)?,
    };
    Ok(EpochMetrics { epoch, split: split.to_string(), loss, accuracy, layers })
}

/// Quantizer snapshot of every quantized layer.
pub fn layer_metrics(model: &Model) -> Result<Vec<LayerMetrics>> {
    model
        .params()
        .iter()
        .filter_map(|p| p.quant.map(|q| (p, q)))
        .map(|(p, q)| {
            let q = q.refresh(p.weight.data())?;
            Ok(LayerMetrics {
                name: p.name.clone(),
                delta: q.delta(),
                delta_c: q.delta_c(),
                scale: q.scale(),
                sparsity: sparsity(&q.codes(&p.weight))?,
            })
        })
        .collect()
}

/// Trains the full-precision model in place. On divergence the error is
/// returned and `model` holds the state reached before the failing update.
pub fn pretrain(
    model: &mut Model,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_dataset(model, train)?;
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    for epoch in 0..epochs {
        opt.set_lr(cfg.rates_at(epoch).0);
        for (b, chunk) in shuffled(train.len(), &mut rng).chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(chunk);
            let mut tape = Tape::new();
            let vx = tape.constant(x);
            let pass = model.forward(&mut tape, vx, ForwardMode::Float)?;
            let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
            check_loss(tape.value(loss).item()?, epoch, b)?;
            tape.backward(loss)?;
            update_params(model, &mut opt, &tape, &pass.params);
        }
        log.push(epoch_metrics(model, train, epoch + 1, "train", ForwardMode::Float)?);
        if let Some(test) = test {
            log.push(epoch_metrics(model, test, epoch + 1, "test", ForwardMode::Float)?);
        }
    }
    Ok(log)
}

/// Ternary training state: model, both optimizers, epoch counter and shuffle RNG.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    cfg: TrainConfig,
    weight_opt: Optimizer,
    threshold_lr: f64,
    epoch: usize,
    rng: ChaCha8Rng,
    metrics: Vec<EpochMetrics>,
}

impl TrainState {
    /// Starts ternary training from a warm-start model, initializing every
    /// threshold to `init_fraction·max|w|`.
    pub fn new(mut model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.init_thresholds(cfg.init_fraction)?;
        Self::resume(model, cfg)
    }

    /// Continues from a model whose thresholds are already set.
    pub fn resume(mut model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.refresh_quantizers()?;
        let weight_opt = Optimizer::new(cfg.optimizer)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let threshold_lr = cfg.threshold_lr();
        Ok(Self { model, cfg, weight_opt, threshold_lr, epoch: 0, rng, metrics: Vec::new() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Overrides both learning rates until the next epoch boundary.
    pub fn set_rates(&mut self, weight_lr: f64, threshold_lr: f64) {
        self.weight_opt.set_lr(weight_lr);
        self.threshold_lr = threshold_lr;
    }

    /// One alternating update on a single batch.
    pub fn tern_train_step(&mut self, x: &Tensor, y: &[usize], batch_index: usize) -> Result<StepLosses> {
        let threshold = self.threshold_step(x, y, batch_index)?;
        let weight = self.weight_step(x, y, batch_index)?;
        Ok(StepLosses { threshold, weight })
    }

    /// Refreshes, then moves every `δ` by vanilla SGD with codes, weights and
    /// biases held constant. Returns the batch loss.
    pub fn threshold_step(&mut self, x: &Tensor, y: &[usize], batch_index: usize) -> Result<f64> {
        self.model.refresh_quantizers()?;
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let pass = self.model.forward(&mut tape, vx, ForwardMode::Ternary(QuantPhase::Threshold))?;
        let loss = tape.softmax_cross_entropy(pass.logits, y)?;
        let value = check_loss(tape.value(loss).item()?, self.epoch, batch_index)?;
        tape.backward(loss)?;
        for (p, v) in self.model.params_mut().iter_mut().zip(&pass.params) {
            if let (Some(q), Some(dv)) = (p.quant.as_mut(), v.delta) {
                let g = tape.grad(dv).expect("threshold leaf has a gradient")[0];
                q.set_delta(q.delta() - self.threshold_lr * g);
            }
        }
        Ok(value)
    }

    /// Refreshes against the current thresholds, then updates weights and
    /// biases through the straight-through estimator. Returns the batch loss.
    pub fn weight_step(&mut self, x: &Tensor, y: &[usize], batch_index: usize) -> Result<f64> {
        self.model.refresh_quantizers()?;
        let phase = QuantPhase::Weight { grad_correctness: self.cfg.grad_correctness };
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let pass = self.model.forward(&mut tape, vx, ForwardMode::Ternary(phase))?;
        let loss = tape.softmax_cross_entropy(pass.logits, y)?;
        let value = check_loss(tape.value(loss).item()?, self.epoch, batch_index)?;
        tape.backward(loss)?;
        update_params(&mut self.model, &mut self.weight_opt, &tape, &pass.params);
        Ok(value)
    }

    /// Runs `epochs` epochs of shuffled ternary steps, logging train (and test)
    /// metrics after each. Quantizer states are left refreshed.
    pub fn train(&mut self, train: &Dataset, test: Option<&Dataset>, epochs: usize) -> Result<Vec<EpochMetrics>> {
        check_dataset(&self.model, train)?;
        let mut log = Vec::with_capacity(epochs * 2);
        for _ in 0..epochs {
            let (lr, thr_lr) = self.cfg.rates_at(self.epoch);
            self.set_rates(lr, thr_lr);
            let order = shuffled(train.len(), &mut self.rng);
            for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
                let (x, y) = train.batch(chunk);
                self.tern_train_step(&x, &y, b)?;
            }
            self.epoch += 1;
            self.model.refresh_quantizers()?;
            log.push(epoch_metrics(&self.model, train, self.epoch, "train", ForwardMode::TERNARY)?);
            if let Some(test) = test {
                log.push(epoch_metrics(&self.model, test, self.epoch, "test", ForwardMode::TERNARY)?);
            }
        }
        self.model.refresh_quantizers()?;
        self.metrics.extend(log.iter().cloned());
        Ok(log)
    }
}

/// CSV rendering of a metrics log. Quantized-layer columns follow the fixed
/// ones as `<layer>_delta,<layer>_delta_c,<layer>_scale,<layer>_sparsity`.
pub fn metrics_csv(log: &[EpochMetrics], header: bool) -> String {
    let mut out = String::new();
    if header {
        out.push_str("epoch,split,loss,accuracy");
        if let Some(first) = log.first() {
            for l in &first.layers {
                for col in ["delta", "delta_c", "scale", "sparsity"] {
                    let _ = write!(out, ",{}_{col}", l.name);
                }
            }
        }
        out.push('\n');
    }
    for m in log {
        let _ = write!(out, "{},{},{},{}", m.epoch, m.split, m.loss, m.accuracy);
        for l in &m.layers {
            let _ = write!(out, ",{},{},{},{}", l.delta, l.delta_c, l.scale, l.sparsity);
        }
        out.push('\n');
    }
    out
}

/// Appends to a CSV log, writing the header only when the file is new or empty.
pub fn append_metrics_csv(path: impl AsRef<Path>, log: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(metrics_csv(log, fresh).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{d_truncated_mean_d_delta, truncated_upper_mean, TruncGaussParams};
    use crate::network::{Architecture, LayerSpec, ParamLayer};
    use crate::ternarizer::QuantizerState;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let c = if label == 0 { -1.0 } else { 1.0 };
            x.push(c + rng.gen_range(-0.5..0.5));
            x.push(-c + rng.gen_range(-0.5..0.5));
            y.push(label);
        }
        Dataset::new(Tensor::new(vec![n, 2], x).unwrap(), y, 2).unwrap()
    }

    fn small_cfg(lr: f64) -> TrainConfig {
        TrainConfig { optimizer: OptimizerConfig::sgd(lr), batch_size: 8, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_lookup_and_parse() {
        let s = LrSchedule::parse("10:0.01, 5:0.05").unwrap();
        assert_eq!(s.breakpoints(), &[(5, 0.05), (10, 0.01)]);
        assert_eq!(s.lr_at(0, 0.1), 0.1);
        assert_eq!(s.lr_at(5, 0.1), 0.05);
        assert_eq!(s.lr_at(12, 0.1), 0.01);
        assert!(LrSchedule::parse("x").is_err());
        assert!(LrSchedule::parse("1:0").is_err());
        assert!(LrSchedule::parse("1:0.1,1:0.2").is_err());
        assert!(LrSchedule::parse("").unwrap().breakpoints().is_empty());
    }

    #[test]
    fn threshold_rate_follows_schedule() {
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::sgd(0.1),
            threshold: ThresholdConfig { lr: Some(0.02) },
            schedule: LrSchedule::parse("3:0.01").unwrap(),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.rates_at(0), (0.1, 0.02));
        let (lr, thr) = cfg.rates_at(3);
        assert_eq!(lr, 0.01);
        assert!((thr - 0.002).abs() < 1e-15);
    }

    #[test]
    fn constant_predictor_accuracy() {
        // Zero weights and a bias favouring class 3 predict 3 everywhere.
        let mut m = Model::build_from_config("mlp-4-10", 0).unwrap();
        m.params_mut()[0].weight.data_mut().fill(0.0);
        m.params_mut()[0].bias.data_mut()[3] = 1.0;
        let n = 100;
        let x = Tensor::ones(&[n, 4]);
        let ds = Dataset::new(x, (0..n).map(|i| i % 10).collect(), 10).unwrap();
        assert_eq!(evaluate(&m, &ds, ForwardMode::Float).unwrap(), 0.10);
    }

    #[test]
    fn zero_epoch_pretrain_is_identity() {
        let mut m = Model::build_from_config("mlp-2-4-2", 3).unwrap();
        let before = m.clone();
        let log = pretrain(&mut m, &toy_data(16, 0), None, &small_cfg(0.1), 0).unwrap();
        assert!(log.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn pretrain_is_deterministic_and_learns() {
        let ds = toy_data(64, 1);
        let run = || {
            let mut m = Model::build_from_config("mlp-2-8-2", 7).unwrap();
            let log = pretrain(&mut m, &ds, None, &small_cfg(0.1), 5).unwrap();
            (m, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.last().unwrap().accuracy > 0.95, "{la:?}");
        assert!(a.params().iter().all(|p| p.weight.data().iter().all(|&v| v == to_f32_precision(v))));
    }

    #[test]
    fn divergence_is_reported_with_model_kept() {
        let mut m = Model::build_from_config("mlp-2-4-2", 3).unwrap();
        m.params_mut()[1].bias.data_mut()[0] = f64::NAN;
        let err = pretrain(&mut m, &toy_data(16, 0), None, &small_cfg(0.1), 1).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0, batch: 0, .. }), "{err}");
        assert!(m.params()[1].bias.data()[0].is_nan());
    }

    #[test]
    fn evaluate_rejects_empty_and_foreign_class_counts() {
        let m = Model::build_from_config("mlp-2-2", 0).unwrap();
        let ds = Dataset::new(Tensor::ones(&[2, 2]), vec![0, 4], 5).unwrap();
        assert!(evaluate(&m, &ds, ForwardMode::Float).is_err());
    }

    fn warm_model() -> Model {
        let ds = toy_data(64, 1);
        let mut m = Model::build_from_config("mlp-2-16-2", 11).unwrap();
        pretrain(&mut m, &ds, None, &small_cfg(0.1), 2).unwrap();
        m
    }

    #[test]
    fn zero_threshold_lr_keeps_deltas() {
        let ds = toy_data(16, 2);
        let cfg = TrainConfig { threshold: ThresholdConfig { lr: Some(0.0) }, ..small_cfg(0.1) };
        let mut st = TrainState::new(warm_model(), cfg).unwrap();
        let deltas: Vec<f64> = st.model.params().iter().map(|p| p.quant.unwrap().delta()).collect();
        let weights: Vec<Tensor> = st.model.params().iter().map(|p| p.weight.clone()).collect();
        let (x, y) = ds.batch(&(0..16).collect::<Vec<_>>());
        st.tern_train_step(&x, &y, 0).unwrap();
        let after: Vec<f64> = st.model.params().iter().map(|p| p.quant.unwrap().delta()).collect();
        assert_eq!(deltas, after);
        assert!(st.model.params().iter().zip(&weights).any(|(p, w)| p.weight != *w));
    }

    #[test]
    fn zero_weight_lr_moves_deltas_downhill() {
        let ds = toy_data(16, 2);
        let mut st = TrainState::new(warm_model(), small_cfg(0.1)).unwrap();
        st.set_rates(0.0, 0.05);
        let (x, y) = ds.batch(&(0..16).collect::<Vec<_>>());

        // Expected direction from the threshold-phase gradient itself.
        st.model.refresh_quantizers().unwrap();
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let pass = st.model.forward(&mut tape, vx, ForwardMode::Ternary(QuantPhase::Threshold)).unwrap();
        let loss = tape.softmax_cross_entropy(pass.logits, &y).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<f64> = pass.params.iter().map(|v| tape.grad(v.delta.unwrap()).unwrap()[0]).collect();

        let weights: Vec<Tensor> = st.model.params().iter().map(|p| p.weight.clone()).collect();
        let before: Vec<f64> = st.model.params().iter().map(|p| p.quant.unwrap().delta()).collect();
        st.tern_train_step(&x, &y, 0).unwrap();
        for ((p, w), (d0, g)) in st.model.params().iter().zip(&weights).zip(before.iter().zip(&grads)) {
            assert_eq!(&p.weight, w);
            let moved = p.quant.unwrap().delta() - d0;
            assert!(g.abs() > 0.0, "layer {} has zero threshold gradient", p.name);
            assert!(moved * g < 0.0, "delta moved {moved} with gradient {g}");
        }
    }

    #[test]
    fn phase_isolation_and_resync() {
        let ds = toy_data(16, 5);
        let mut st = TrainState::new(warm_model(), small_cfg(0.05)).unwrap();
        let (x, y) = ds.batch(&(0..16).collect::<Vec<_>>());
        let deltas = |m: &Model| m.params().iter().map(|p| p.quant.unwrap().delta()).collect::<Vec<_>>();
        let tensors = |m: &Model| m.params().iter().map(|p| (p.weight.clone(), p.bias.clone())).collect::<Vec<_>>();
        for b in 0..3 {
            let (d0, t0) = (deltas(&st.model), tensors(&st.model));
            st.threshold_step(&x, &y, b).unwrap();
            assert_eq!(tensors(&st.model), t0);
            assert_ne!(deltas(&st.model), d0);
            assert!(!st.model.quantizers_fresh());

            let mut synced = st.model.clone();
            synced.refresh_quantizers().unwrap();
            let d1 = deltas(&st.model);
            st.weight_step(&x, &y, b).unwrap();
            assert_eq!(deltas(&st.model), d1);
            assert_ne!(tensors(&st.model), t0);
            for p in st.model.params() {
                assert!(p.weight.data().iter().chain(p.bias.data()).all(|&v| v == to_f32_precision(v)));
            }
            // Stale caches are rejected by the forward pass in debug builds, so
            // a successful weight step implies it ran on resynchronized states.
            for (s, p) in synced.params().iter().zip(st.model.params()) {
                assert_eq!(s.quant.unwrap().delta(), p.quant.unwrap().delta());
                assert!(s.quant.unwrap().is_fresh(s.weight.data()));
            }
        }
    }

    /// One step on a single dense layer `1 → 2` with weights `w = [a, b]` and
    /// zero bias, checked against updates computed by hand.
    #[test]
    fn hand_computed_toy_step() {
        let arch = Architecture::from_layers(
            "toy",
            vec![1],
            vec![LayerSpec::Dense { inputs: 1, outputs: 2, quantized: true }],
        )
        .unwrap();
        let (a, b) = (0.5f32 as f64, -0.25f32 as f64);
        let delta0 = 0.1;
        let layer = ParamLayer {
            name: "fc1".into(),
            weight: Tensor::new(vec![1, 2], vec![a, b]).unwrap(),
            bias: Tensor::zeros(&[2]),
            quant: Some(QuantizerState::new(delta0)),
        };
        let model = Model::from_parts(arch, vec![layer]).unwrap();
        let (lr_w, lr_t) = (0.1, 0.02);
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::sgd(lr_w),
            threshold: ThresholdConfig { lr: Some(lr_t) },
            batch_size: 1,
            ..TrainConfig::default()
        };
        let mut st = TrainState::resume(model, cfg).unwrap();
        let x = 2.0;
        let target = 1usize;
        st.tern_train_step(&Tensor::new(vec![1, 1], vec![x]).unwrap(), &[target], 0).unwrap();

        // Two weights: μ is their midpoint and σ half their distance, so both
        // are nonzero codes (+1, −1) while δ < σ.
        let mu = (a + b) / 2.0;
        let sigma = (a - b).abs() / 2.0;
        let codes = [1.0, -1.0];
        let softmax_grad = |z: [f64; 2]| {
            let m = z[0].max(z[1]);
            let e = [(z[0] - m).exp(), (z[1] - m).exp()];
            let s = e[0] + e[1];
            let mut g = [e[0] / s, e[1] / s];
            g[target] -= 1.0;
            g
        };
        let scale = |d: f64| truncated_upper_mean(&TruncGaussParams::new(mu, sigma, d).unwrap());

        // Threshold phase: dL/dδ = Σ_j dL/dz_j · x·c_j · dS/dδ.
        let s0 = scale(delta0);
        let gz = softmax_grad([s0 * x * codes[0], s0 * x * codes[1]]);
        let ds_dd = d_truncated_mean_d_delta(&TruncGaussParams::new(mu, sigma, delta0).unwrap());
        let g_delta = (gz[0] * x * codes[0] + gz[1] * x * codes[1]) * ds_dd;
        let delta1 = delta0 - lr_t * g_delta;
        assert!(delta1 > 0.0 && delta1 < sigma, "step leaves the two-code regime: {delta1}");

        // Weight phase after the refresh: dL/dw_j = dL/dz_j · x·S · (1/S).
        let s1 = scale(delta1);
        let gz = softmax_grad([s1 * x * codes[0], s1 * x * codes[1]]);
        let w1 = [to_f32_precision(a - lr_w * gz[0] * x), to_f32_precision(b - lr_w * gz[1] * x)];
        let b1 = [to_f32_precision(-lr_w * gz[0]), to_f32_precision(-lr_w * gz[1])];

        let p = &st.model.params()[0];
        assert!((p.quant.unwrap().delta() - delta1).abs() < 1e-14, "{} vs {delta1}", p.quant.unwrap().delta());
        assert!(p.weight.data().iter().zip(&w1).all(|(u, v)| (u - v).abs() < 1e-7), "{:?} vs {w1:?}", p.weight.data());
        assert!(p.bias.data().iter().zip(&b1).all(|(u, v)| (u - v).abs() < 1e-7));
    }

    #[test]
    fn zero_epoch_train_returns_refreshed_model() {
        let warm = warm_model();
        let mut st = TrainState::new(warm.clone(), small_cfg(0.1)).unwrap();
        assert!(st.train(&toy_data(16, 3), None, 0).unwrap().is_empty());
        for (p, w) in st.model.params().iter().zip(warm.params()) {
            assert_eq!(p.weight, w.weight);
        }
        assert!(st.model.quantizers_fresh());
    }

    #[test]
    fn init_fractions_accepted() {
        for frac in [0.05, 0.1, 0.15] {
            let cfg = TrainConfig { init_fraction: frac, ..small_cfg(0.1) };
            let st = TrainState::new(warm_model(), cfg).unwrap();
            let p = &st.model.params()[0];
            let max = p.weight.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((p.quant.unwrap().delta() - frac * max).abs() < 1e-15);
        }
        assert_eq!(TrainConfig::default().init_fraction, 0.1);
    }

    #[test]
    fn ternary_training_learns_and_logs() {
        let ds = toy_data(64, 1);
        let test = toy_data(32, 9);
        let mut st = TrainState::new(warm_model(), small_cfg(0.05)).unwrap();
        let log = st.train(&ds, Some(&test), 3).unwrap();
        assert_eq!(log.len(), 6);
        assert_eq!(log[1].split, "test");
        assert!(log.last().unwrap().accuracy > 0.9, "{log:?}");
        assert_eq!(log[0].layers.len(), 2);
        let csv = metrics_csv(&log, true);
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "epoch,split,loss,accuracy,fc1_delta,fc1_delta_c,fc1_scale,fc1_sparsity,fc2_delta,fc2_delta_c,fc2_scale,fc2_sparsity"
        );
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().all(|l| l.split(',').count() == 12));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        append_metrics_csv(&path, &log[..2]).unwrap();
        append_metrics_csv(&path, &log[2..]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), csv);
    }

    #[test]
    fn no_weight_decay_on_thresholds() {
        // With a huge weight decay a decayed δ would shrink by lr·wd·δ per step;
        // the threshold update must equal the plain gradient step.
        let ds = toy_data(8, 4);
        let base = TrainState::new(warm_model(), small_cfg(0.05)).unwrap();
        let mut decayed_cfg = small_cfg(0.05);
        decayed_cfg.optimizer = decayed_cfg.optimizer.with_weight_decay(5.0);
        let decayed = TrainState::new(warm_model(), decayed_cfg).unwrap();
        let (x, y) = ds.batch(&(0..8).collect::<Vec<_>>());
        let mut results = Vec::new();
        for mut st in [base, decayed] {
            st.tern_train_step(&x, &y, 0).unwrap();
            results.push(st.model.params().iter().map(|p| p.quant.unwrap().delta()).collect::<Vec<_>>());
        }
        assert_eq!(results[0], results[1]);
    }
}

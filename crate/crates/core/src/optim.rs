//! SGD (plain and momentum) and bias-corrected Adam over flat slices.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OptimizerKind {
    VanillaSgd,
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla-sgd" | "sgd" => Ok(Self::VanillaSgd),
            "sgd-momentum" => Ok(Self::SgdMomentum),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::InvalidParameter(format!("unknown optimizer `{s}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::VanillaSgd => "vanilla-sgd",
            Self::SgdMomentum => "sgd-momentum",
            Self::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::VanillaSgd, lr, momentum: 0.0, betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn sgd_momentum(lr: f64, momentum: f64) -> Self {
        Self { kind: OptimizerKind::SgdMomentum, momentum, ..Self::sgd(lr) }
    }

    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, ..Self::sgd(lr) }
    }

    pub fn with_weight_decay(self, weight_decay: f64) -> Self {
        Self { weight_decay, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be ≥ 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// `p ← p − lr·v` with `v ← momentum·v + (g + wd·p)`. With `momentum = 0`
/// this is `p ← p − lr·(g + wd·p)` and `velocity` is left untouched.
pub fn sgd_update(p: &mut [f64], g: &[f64], lr: f64, momentum: f64, weight_decay: f64, velocity: &mut [f64]) {
    assert_eq!(p.len(), g.len());
    if momentum == 0.0 {
        for (pi, gi) in p.iter_mut().zip(g) {
            *pi -= lr * (gi + weight_decay * *pi);
        }
        return;
    }
    assert_eq!(p.len(), velocity.len());
    for ((pi, gi), vi) in p.iter_mut().zip(g).zip(velocity.iter_mut()) {
        *vi = momentum * *vi + gi + weight_decay * *pi;
        *pi -= lr * *vi;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam step with L2 weight decay folded into the gradient.
pub fn adam_update(p: &mut [f64], g: &[f64], state: &mut AdamState, cfg: &OptimizerConfig) {
    assert_eq!(p.len(), g.len());
    assert_eq!(p.len(), state.m.len());
    let (b1, b2) = cfg.betas;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(&mut state.m).zip(&mut state.v) {
        let gi = gi + cfg.weight_decay * *pi;
        *mi = b1 * *mi + (1.0 - b1) * gi;
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Slot {
    Empty,
    Velocity(Vec<f64>),
    Adam(AdamState),
}

/// An optimizer over a fixed list of parameter tensors addressed by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, slots: Vec::new() })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Updates parameter `index` in place.
    pub fn step(&mut self, index: usize, p: &mut [f64], g: &[f64]) {
        if self.slots.len() <= index {
            self.slots.resize(index + 1, Slot::Empty);
        }
        let cfg = self.cfg;
        let slot = &mut self.slots[index];
        match cfg.kind {
            OptimizerKind::VanillaSgd => sgd_update(p, g, cfg.lr, 0.0, cfg.weight_decay, &mut []),
            OptimizerKind::SgdMomentum => {
                if !matches!(slot, Slot::Velocity(v) if v.len() == p.len()) {
                    *slot = Slot::Velocity(vec![0.0; p.len()]);
                }
                let Slot::Velocity(v) = slot else { unreachable!() };
                sgd_update(p, g, cfg.lr, cfg.momentum, cfg.weight_decay, v);
            }
            OptimizerKind::Adam => {
                if !matches!(slot, Slot::Adam(s) if s.m.len() == p.len()) {
                    *slot = Slot::Adam(AdamState::new(p.len()));
                }
                let Slot::Adam(s) = slot else { unreachable!() };
                adam_update(p, g, s, &cfg);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = [1.0];
        sgd_update(&mut p, &[0.5], 0.1, 0.0, 0.0, &mut []);
        assert!((p[0] - 0.95).abs() < 1e-15);
        let mut p = [1.0];
        sgd_update(&mut p, &[0.0], 0.1, 0.0, 0.01, &mut []);
        assert!((p[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd_momentum(0.1, 0.9)).unwrap();
        let mut p = [0.0];
        opt.step(0, &mut p, &[1.0]);
        assert!((p[0] + 0.1).abs() < 1e-15);
        opt.step(0, &mut p, &[1.0]);
        // v = 0.9·1 + 1 = 1.9
        assert!((p[0] + 0.1 + 0.19).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_regardless_of_scale() {
        for g in [1e-6, 1e-2, 3.0, 1e4] {
            let mut p = [0.5];
            let mut s = AdamState::new(1);
            let mut cfg = OptimizerConfig::adam(0.01);
            cfg.eps = 1e-12;
            adam_update(&mut p, &[g], &mut s, &cfg);
            assert!(((0.5 - p[0]) - 0.01).abs() < 1e-6, "g = {g}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::sgd(0.0).validate().is_err());
        assert!(OptimizerConfig::sgd_momentum(0.1, 1.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1).with_weight_decay(-1.0).validate().is_err());
        assert!(OptimizerConfig::adam(1e-3).validate().is_ok());
        assert_eq!(OptimizerKind::parse("adam").unwrap(), OptimizerKind::Adam);
        assert!(OptimizerKind::parse("rmsprop").is_err());
    }
}

//! SGD with heavy-ball momentum, base learning-rate schedules, and the
//! hidden-fraction learning-rate rescaling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Model;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("hiding fraction {0} must be below 1")]
    FractionTooLarge(f64),
    #[error("hiding fraction {0} must be non-negative")]
    NegativeFraction(f64),
    #[error("gradient contains a non-finite value at index {0}")]
    NonFiniteGradient(usize),
    #[error("gradient has {found} entries, model has {expected}")]
    GradientLength { expected: usize, found: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    Constant,
    /// Multiply by `gamma` at each milestone epoch.
    Step,
    /// Half-cosine from `base_lr` down to 0 at `total_epochs`.
    Cosine,
}

/// When the hidden-fraction rescaling is applied. Only per-epoch exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrAdjust {
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scheduler: SchedulerKind,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub lr_adjust: LrAdjust,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            scheduler: SchedulerKind::Constant,
            milestones: Vec::new(),
            gamma: 0.1,
            total_epochs: 100,
            warmup_epochs: 0,
            lr_adjust: LrAdjust::Epoch,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidConfig(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("optim.base-lr must be > 0 (got {})", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("optim.momentum must be in [0, 1) (got {})", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("optim.weight-decay must be >= 0 (got {})", self.weight_decay));
        }
        if self.scheduler == SchedulerKind::Step {
            if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
                return bad("optim.milestones must be strictly increasing".into());
            }
            if !(self.gamma > 0.0 && self.gamma <= 1.0) {
                return bad(format!("optim.gamma must be in (0, 1] (got {})", self.gamma));
            }
        }
        if self.scheduler == SchedulerKind::Cosine && self.total_epochs == 0 {
            return bad("optim.total-epochs must be >= 1 for the cosine scheduler".into());
        }
        Ok(())
    }
}

/// Learning rate of the non-hiding schedule at `epoch`: a linear ramp from 0
/// during warmup, then the configured scheduler.
pub fn base_lr_at(cfg: &OptimConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * epoch as f64 / cfg.warmup_epochs as f64;
    }
    match cfg.scheduler {
        SchedulerKind::Constant => cfg.base_lr,
        SchedulerKind::Step => {
            let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
            cfg.base_lr * cfg.gamma.powi(passed as i32)
        }
        SchedulerKind::Cosine => {
            let t = epoch.min(cfg.total_epochs) as f64 / cfg.total_epochs as f64;
            0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// `η_e = η_base,e / (1 − F_e)`.
pub fn adjusted_lr(base_lr: f64, fraction: f64) -> Result<f64, OptimError> {
    if fraction >= 1.0 || fraction.is_nan() {
        return Err(OptimError::FractionTooLarge(fraction));
    }
    if fraction < 0.0 {
        return Err(OptimError::NegativeFraction(fraction));
    }
    Ok(base_lr / (1.0 - fraction))
}

/// Number of representable doubles between two finite values of the same sign.
pub fn ulps_between(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    if a.is_sign_negative() != b.is_sign_negative() {
        return u64::MAX;
    }
    a.to_bits().abs_diff(b.to_bits())
}

/// Heavy-ball SGD: `v ← μ·v + g + λ·w`, `w ← w − η·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(cfg: &OptimConfig, num_params: usize) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// Applies one update. On a non-finite gradient nothing is modified.
    pub fn step(&mut self, model: &mut Model, grad: &[f64], lr: f64) -> Result<(), OptimError> {
        if grad.len() != model.params.len() || self.velocity.len() != grad.len() {
            return Err(OptimError::GradientLength {
                expected: model.params.len(),
                found: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient(i));
        }
        for ((w, v), &g) in model.params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *w;
            *w -= lr * *v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use proptest::prelude::*;

    fn cfg() -> OptimConfig {
        OptimConfig {
            base_lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn warmup_ramp() {
        let c = OptimConfig {
            warmup_epochs: 5,
            ..cfg()
        };
        assert!((base_lr_at(&c, 2) - 0.04).abs() < 1e-17);
        assert_eq!(base_lr_at(&c, 0), 0.0);
        assert_eq!(base_lr_at(&c, 5), 0.1);
    }

    #[test]
    fn step_and_cosine() {
        let c = OptimConfig {
            scheduler: SchedulerKind::Step,
            milestones: vec![30, 60],
            gamma: 0.1,
            ..cfg()
        };
        assert!((base_lr_at(&c, 45) - 0.01).abs() < 1e-17);
        assert_eq!(base_lr_at(&c, 29), 0.1);
        assert!((base_lr_at(&c, 60) - 0.001).abs() < 1e-17);
        let c = OptimConfig {
            scheduler: SchedulerKind::Cosine,
            total_epochs: 100,
            ..cfg()
        };
        assert_eq!(base_lr_at(&c, 100), 0.0);
        assert_eq!(base_lr_at(&c, 0), 0.1);
        assert!((base_lr_at(&c, 50) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn adjusted_lr_cases() {
        assert!((adjusted_lr(0.1, 0.3).unwrap() - 0.142_857_142_857_142_85).abs() < 1e-16);
        assert_eq!(adjusted_lr(0.025, 0.0).unwrap(), 0.025);
        assert_eq!(adjusted_lr(0.1, 1.0), Err(OptimError::FractionTooLarge(1.0)));
    }

    #[test]
    fn plain_sgd_step() {
        let mut m = Model::zeros(Arch::SoftmaxReg, 1, 0, 2).unwrap();
        m.params = vec![1.0, 0.0, 0.0, 0.0];
        let mut opt = Sgd::new(&cfg(), 4);
        opt.step(&mut m, &[2.0, 0.0, 0.0, 0.0], 0.1).unwrap();
        assert!((m.params[0] - 0.8).abs() < 1e-15);
        let before = m.params.clone();
        opt.step(&mut m, &[0.0; 4], 0.1).unwrap();
        assert_eq!(m.params, before);
        let err = opt.step(&mut m, &[0.0, f64::NAN, 0.0, 0.0], 0.1).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient(1));
        assert_eq!(m.params, before);
    }

    #[test]
    fn momentum_accumulates() {
        let c = OptimConfig {
            momentum: 0.5,
            ..cfg()
        };
        let mut m = Model::zeros(Arch::SoftmaxReg, 1, 0, 2).unwrap();
        let mut opt = Sgd::new(&c, 4);
        opt.step(&mut m, &[1.0, 0.0, 0.0, 0.0], 1.0).unwrap();
        opt.step(&mut m, &[1.0, 0.0, 0.0, 0.0], 1.0).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(m.params[0], -2.5);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let c = OptimConfig {
            scheduler: SchedulerKind::Step,
            milestones: vec![30, 30],
            ..cfg()
        };
        assert!(c.validate().is_err());
        let c = OptimConfig { momentum: 1.0, ..cfg() };
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn adjusted_lr_identity(base in 1e-6f64..10.0, f in 0.0f64..0.999) {
            let eta = adjusted_lr(base, f).unwrap();
            let back = eta * (1.0 - f);
            prop_assert!(ulps_between(back, base) <= 1, "{back} vs {base}");
        }

        #[test]
        fn adjusted_lr_monotone(base in 1e-6f64..10.0, a in 0.0f64..0.999, b in 0.0f64..0.999) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(adjusted_lr(base, lo).unwrap() <= adjusted_lr(base, hi).unwrap());
        }

        #[test]
        fn plain_step_is_textbook(w in prop::collection::vec(-5.0f64..5.0, 4), g in prop::collection::vec(-5.0f64..5.0, 4), lr in 1e-4f64..1.0) {
            let mut m = Model::zeros(Arch::SoftmaxReg, 1, 0, 2).unwrap();
            m.params = w.clone();
            Sgd::new(&cfg(), 4).step(&mut m, &g, lr).unwrap();
            for i in 0..4 {
                prop_assert!((m.params[i] - (w[i] - lr * g[i])).abs() <= 1e-15);
            }
        }
    }
}

use std::cell::RefCell;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{apgd_attack, eval_checked, pgd_attack, ApgdParams, AttackConfig, AttackTarget, LossKind};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nn::{train_with, BatchTransform, History, Model, TrainConfig};

/// Iteration counts observed across attack calls.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackTelemetry {
    pub calls: usize,
    pub min_iterations: Option<usize>,
    pub max_iterations: Option<usize>,
}

impl AttackTelemetry {
    fn record(&mut self, iterations: usize) {
        self.calls += 1;
        self.min_iterations = Some(self.min_iterations.map_or(iterations, |m| m.min(iterations)));
        self.max_iterations = Some(self.max_iterations.map_or(iterations, |m| m.max(iterations)));
    }
}

/// Replaces each batch by its PGD perturbation against the current model.
pub struct PgdTransform {
    pub config: AttackConfig,
    telemetry: RefCell<AttackTelemetry>,
}

impl PgdTransform {
    pub fn new(config: AttackConfig) -> Self {
        Self {
            config,
            telemetry: RefCell::new(AttackTelemetry::default()),
        }
    }

    pub fn telemetry(&self) -> AttackTelemetry {
        self.telemetry.borrow().clone()
    }
}

impl BatchTransform for PgdTransform {
    fn transform(&self, model: &Model, x: &Array2<f64>, y: &[usize], stream: u64) -> Result<Array2<f64>> {
        let cfg = AttackConfig {
            seed: self.config.seed ^ stream,
            ..self.config.clone()
        };
        let r = pgd_attack(model, x, y, &cfg)?;
        if cfg.epsilon > 0.0 {
            self.telemetry.borrow_mut().record(r.iterations);
        }
        Ok(r.adversarial)
    }

    fn iterations(&self) -> usize {
        self.config.steps
    }
}

#[derive(Clone, Debug)]
pub struct AdversarialOutcome {
    pub history: History,
    pub telemetry: AttackTelemetry,
}

/// Training on PGD-perturbed batches. The attack runs against the model in
/// evaluation mode and uses its own random stream, so `ε = 0` reproduces
/// clean training exactly.
pub fn adversarial_train(
    model: &mut Model,
    data: &Dataset,
    train_cfg: &TrainConfig,
    attack_cfg: &AttackConfig,
) -> Result<AdversarialOutcome> {
    attack_cfg.validate()?;
    let transform = PgdTransform::new(attack_cfg.clone());
    let history = train_with(model, data, train_cfg, Some(&transform))?;
    Ok(AdversarialOutcome {
        history,
        telemetry: transform.telemetry(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Fixed-step PGD with the configured loss.
    Pgd,
    /// Adaptive attack with the configured loss.
    Apgd,
    /// Adaptive attack with cross-entropy, then DLR on the survivors.
    ApgdCeDlr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustPoint {
    pub epsilon: f64,
    pub accuracy: f64,
}

/// Accuracy under attack at each budget. `template` supplies everything but ε;
/// its step size is rescaled in proportion to ε. The zero-budget row is the
/// clean accuracy.
pub fn robust_accuracy<T: AttackTarget + ?Sized>(
    target: &T,
    x: &Array2<f64>,
    y: &[usize],
    epsilons: &[f64],
    kind: AttackKind,
    template: &AttackConfig,
    apgd: &ApgdParams,
) -> Result<Vec<RobustPoint>> {
    if epsilons.first() != Some(&0.0) {
        return Err(Error::InvalidArgument("budget list must start at 0".into()));
    }
    if epsilons.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("budget list must be strictly increasing".into()));
    }
    let ratio = if template.epsilon > 0.0 {
        template.step_size / template.epsilon
    } else {
        match kind {
            AttackKind::Pgd => 0.25,
            _ => 2.0,
        }
    };
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg = template.with_epsilon(eps, ratio);
        let broken = if eps == 0.0 {
            let ev = eval_checked(target, x, y, cfg.loss, false)?;
            ev.correct.iter().map(|c| !c).collect()
        } else {
            match kind {
                AttackKind::Pgd => pgd_attack(target, x, y, &cfg)?.success,
                AttackKind::Apgd => apgd_attack(target, x, y, &cfg, apgd)?.success,
                AttackKind::ApgdCeDlr => worst_case(target, x, y, &cfg, apgd)?,
            }
        };
        let robust = broken.iter().filter(|&&b| !b).count();
        out.push(RobustPoint {
            epsilon: eps,
            accuracy: robust as f64 / y.len() as f64,
        });
    }
    Ok(out)
}

fn worst_case<T: AttackTarget + ?Sized>(
    target: &T,
    x: &Array2<f64>,
    y: &[usize],
    cfg: &AttackConfig,
    apgd: &ApgdParams,
) -> Result<Vec<bool>> {
    let ce = AttackConfig {
        loss: LossKind::CrossEntropy,
        ..cfg.clone()
    };
    let mut broken = apgd_attack(target, x, y, &ce, apgd)?.success;
    let survivors: Vec<usize> = (0..y.len()).filter(|&i| !broken[i]).collect();
    if survivors.is_empty() {
        return Ok(broken);
    }
    let xs = x.select(ndarray::Axis(0), &survivors);
    let ys: Vec<usize> = survivors.iter().map(|&i| y[i]).collect();
    let dlr = AttackConfig {
        loss: LossKind::Dlr,
        ..cfg.clone()
    };
    let second = apgd_attack(target, &xs, &ys, &dlr, apgd)?;
    for (k, &i) in survivors.iter().enumerate() {
        broken[i] |= second.success[k];
    }
    Ok(broken)
}

//! ℓ∞-bounded attacks, adversarial training and robust-accuracy sweeps.

mod apgd;
mod pgd;
mod training;

pub use apgd::{apgd_attack, checkpoint_schedule, ApgdParams};
pub use pgd::pgd_attack;
pub use training::{
    adversarial_train, robust_accuracy, AdversarialOutcome, AttackKind, AttackTelemetry, PgdTransform, RobustPoint,
};

use ndarray::{s, Array2, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Mode, Model, EVAL_BATCH};
use crate::tensor::{dlr_row, Graph, Tensor};

/// Slack allowed when checking the ball and range invariants.
pub const BALL_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Dlr,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Dlr => "dlr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// ℓ∞ budget in input units.
    pub epsilon: f64,
    pub steps: usize,
    /// Step size in input units (initial step when the attack adapts it).
    pub step_size: f64,
    pub loss: LossKind,
    /// Number of runs from a uniform random start in the ball. With 0 the
    /// attack makes a single run from the clean input.
    pub restarts: usize,
    pub range: (f64, f64),
    pub seed: u64,
}

impl AttackConfig {
    /// Seven sign steps of `ε/4` from the clean input.
    pub fn training(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 7,
            step_size: epsilon / 4.0,
            loss: LossKind::CrossEntropy,
            restarts: 0,
            range: (0.0, 1.0),
            seed: 0,
        }
    }

    /// 100 iterations, one random start, initial step `2ε`.
    pub fn evaluation(epsilon: f64, loss: LossKind) -> Self {
        Self {
            epsilon,
            steps: 100,
            step_size: 2.0 * epsilon,
            loss,
            restarts: 1,
            range: (0.0, 1.0),
            seed: 0,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64, step_ratio: f64) -> Self {
        Self {
            epsilon,
            step_size: step_ratio * epsilon,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be a non-negative number, got {}", self.epsilon));
        }
        if self.steps == 0 {
            return bad("attack needs at least one step".into());
        }
        // A zero budget never moves, so it may come with a zero step.
        if !(self.step_size > 0.0 || (self.epsilon == 0.0 && self.step_size == 0.0)) || !self.step_size.is_finite() {
            return bad(format!("step size must be positive, got {}", self.step_size));
        }
        let (lo, hi) = self.range;
        if !(lo < hi) {
            return bad(format!("empty input range [{lo}, {hi}]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    /// Highest-loss point visited per example.
    pub adversarial: Array2<f64>,
    /// Misclassified at some visited point.
    pub success: Vec<bool>,
    /// Largest loss over visited points.
    pub loss: Vec<f64>,
    /// Gradient steps per run.
    pub iterations: usize,
}

impl AttackResult {
    pub fn robust_accuracy(&self) -> f64 {
        self.success.iter().filter(|&&s| !s).count() as f64 / self.success.len() as f64
    }
}

/// Loss, input gradient and correctness of a batch.
#[derive(Clone, Debug)]
pub struct TargetEval {
    pub loss: Vec<f64>,
    pub grad: Option<Array2<f64>>,
    pub correct: Vec<bool>,
}

/// Anything an attack can query: per-example loss, its gradient with respect to
/// the input rows, and whether each row is classified correctly.
pub trait AttackTarget {
    fn evaluate(&self, x: &Array2<f64>, y: &[usize], loss: LossKind, with_grad: bool) -> Result<TargetEval>;
}

impl AttackTarget for Model {
    fn evaluate(&self, x: &Array2<f64>, y: &[usize], loss: LossKind, with_grad: bool) -> Result<TargetEval> {
        let n = x.nrows();
        let mut out = TargetEval {
            loss: Vec::with_capacity(n),
            grad: with_grad.then(|| Array2::zeros(x.dim())),
            correct: Vec::with_capacity(n),
        };
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_BATCH).min(n);
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let chunk = Tensor::from_matrix(x.slice(s![start..end, ..]).to_owned());
            let xv = if with_grad { g.leaf(chunk) } else { g.constant(chunk) };
            let fo = self.forward(&mut g, &bound, xv, &mut Mode::Eval)?;
            let labels = &y[start..end];
            let l = match loss {
                LossKind::CrossEntropy => g.cross_entropy(fo.logits, labels)?,
                LossKind::Dlr => g.dlr(fo.logits, labels)?,
            };
            out.loss.extend(g.value(l).iter().copied());
            let logits = g.tensor(fo.logits).into_matrix()?;
            out.correct
                .extend(argmax_rows(&logits).iter().zip(labels).map(|(p, t)| p == t));
            if let Some(grad) = out.grad.as_mut() {
                let total = g.sum(l)?;
                let mut grads = g.backward(total)?;
                let gx = grads
                    .take(xv)
                    .into_dimensionality::<ndarray::Ix2>()
                    .map_err(|_| Error::Graph("input gradient".into()))?;
                grad.slice_mut(s![start..end, ..]).assign(&gx);
            }
            start = end;
        }
        Ok(out)
    }
}

/// Difference-of-logits-ratio loss per row. Needs at least three classes.
pub fn dlr_loss(logits: &Array2<f64>, y: &[usize]) -> Result<Vec<f64>> {
    if logits.ncols() < 3 {
        return Err(Error::InvalidArgument(format!(
            "DLR loss needs at least 3 classes, got {}",
            logits.ncols()
        )));
    }
    if logits.nrows() != y.len() {
        return Err(Error::Shape {
            op: "dlr_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    logits
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, &label)| {
            if label >= row.len() {
                return Err(Error::InvalidArgument(format!("label {label} out of range")));
            }
            Ok(dlr_row(&row.to_vec(), label))
        })
        .collect()
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projection onto `B∞(x0, ε) ∩ [lo, hi]`, in place.
pub(crate) fn project(x: &mut Array2<f64>, x0: &Array2<f64>, eps: f64, range: (f64, f64)) {
    Zip::from(x).and(x0).for_each(|v, &c| {
        let lo = (c - eps).max(range.0);
        let hi = (c + eps).min(range.1);
        *v = v.max(lo).min(hi);
    });
}

/// Uniform start in the ball. Noise is drawn in `[-1, 1]` and scaled, so runs
/// with the same seed share a direction across budgets.
pub(crate) fn random_start(x0: &Array2<f64>, cfg: &AttackConfig, run: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(run as u64);
    let mut x = x0.mapv(|v| v + cfg.epsilon * rng.gen_range(-1.0..=1.0));
    project(&mut x, x0, cfg.epsilon, cfg.range);
    x
}

pub(crate) fn check_inputs(x: &Array2<f64>, y: &[usize], cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::Shape {
            op: "attack",
            lhs: x.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("attack on an empty batch".into()));
    }
    let (lo, hi) = cfg.range;
    if x.iter().any(|&v| !(v >= lo && v <= hi)) {
        return Err(Error::InvalidArgument(format!(
            "inputs outside the valid range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

pub(crate) fn eval_checked<T: AttackTarget + ?Sized>(
    target: &T,
    x: &Array2<f64>,
    y: &[usize],
    loss: LossKind,
    with_grad: bool,
) -> Result<TargetEval> {
    let ev = target.evaluate(x, y, loss, with_grad)?;
    if ev.loss.len() != y.len() || ev.correct.len() != y.len() {
        return Err(Error::Shape {
            op: "attack target",
            lhs: vec![ev.loss.len()],
            rhs: vec![y.len()],
        });
    }
    if let Some(g) = &ev.grad {
        if g.dim() != x.dim() {
            return Err(Error::Shape {
                op: "attack gradient",
                lhs: g.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input gradient".into()));
        }
    }
    if ev.loss.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("attack loss".into()));
    }
    Ok(ev)
}

/// Result for a zero budget: the clean inputs and their clean status.
pub(crate) fn zero_budget<T: AttackTarget + ?Sized>(
    target: &T,
    x: &Array2<f64>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let ev = eval_checked(target, x, y, cfg.loss, false)?;
    Ok(AttackResult {
        adversarial: x.clone(),
        success: ev.correct.iter().map(|c| !c).collect(),
        loss: ev.loss,
        iterations: 0,
    })
}

/// Keeps, per row, the candidate with the larger loss.
pub(crate) struct BestTracker {
    pub x: Array2<f64>,
    pub loss: Vec<f64>,
    pub success: Vec<bool>,
}

impl BestTracker {
    pub fn new(x0: &Array2<f64>) -> Self {
        Self {
            x: x0.clone(),
            loss: vec![f64::NEG_INFINITY; x0.nrows()],
            success: vec![false; x0.nrows()],
        }
    }

    pub fn update(&mut self, x: &Array2<f64>, ev: &TargetEval) {
        for i in 0..x.nrows() {
            if ev.loss[i] > self.loss[i] {
                self.loss[i] = ev.loss[i];
                self.x.row_mut(i).assign(&x.row(i));
            }
            self.success[i] |= !ev.correct[i];
        }
    }

    pub fn merge(&mut self, other: BestTracker) {
        for i in 0..self.x.nrows() {
            if other.loss[i] > self.loss[i] {
                self.loss[i] = other.loss[i];
                self.x.row_mut(i).assign(&other.x.row(i));
            }
            self.success[i] |= other.success[i];
        }
    }

    pub fn finish(self, x0: &Array2<f64>, cfg: &AttackConfig, iterations: usize) -> AttackResult {
        assert_ball(&self.x, x0, cfg);
        AttackResult {
            adversarial: self.x,
            success: self.success,
            loss: self.loss,
            iterations,
        }
    }
}

/// Panics when an emitted point leaves the ball or the valid range.
pub(crate) fn assert_ball(x: &Array2<f64>, x0: &Array2<f64>, cfg: &AttackConfig) {
    let (lo, hi) = cfg.range;
    Zip::from(x).and(x0).for_each(|&v, &c| {
        assert!(
            (v - c).abs() <= cfg.epsilon + BALL_TOLERANCE && v >= lo && v <= hi,
            "adversarial coordinate {v} escapes the ball around {c} (eps {}) or [{lo}, {hi}]",
            cfg.epsilon
        );
    });
}

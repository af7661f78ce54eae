use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{
    check_inputs, eval_checked, project, random_start, sign, zero_budget, AttackConfig, AttackResult, AttackTarget,
    BestTracker,
};
use crate::error::{Error, Result};

/// Step-size control of the adaptive attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApgdParams {
    /// Weight `α` of the fresh projected step; `1 − α` carries the previous displacement.
    pub step_weight: f64,
    /// Fraction of improving steps required between checkpoints to keep the step.
    pub rho: f64,
    /// Halve the step at checkpoints. Off gives a fixed-step attack.
    pub halving: bool,
}

impl Default for ApgdParams {
    fn default() -> Self {
        Self {
            step_weight: 0.75,
            rho: 0.75,
            halving: true,
        }
    }
}

impl ApgdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_weight > 0.0 && self.step_weight <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "step weight must be in (0, 1], got {}",
                self.step_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!(
                "rho must be in [0, 1], got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Checkpoint iterations `⌈p_j·steps⌉` for `p_0 = 0`, `p_1 = 0.22`,
/// `p_{j+1} = p_j + max(p_j − p_{j−1} − 0.03, 0.06)`.
pub fn checkpoint_schedule(steps: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let (mut prev, mut cur) = (0.0f64, 0.22f64);
    while cur <= 1.0 {
        let w = (cur * steps as f64 - 1e-9).ceil() as usize;
        if w > 0 && w <= steps && out.last() != Some(&w) {
            out.push(w);
        }
        let next = cur + (cur - prev - 0.03).max(0.06);
        prev = cur;
        cur = next;
    }
    out
}

/// Adaptive-step projected sign ascent with momentum. Each example keeps its
/// own step size, starting at `cfg.step_size`. At every checkpoint an
/// example whose best loss improved on fewer than `ρ·gap` steps of the past
/// interval, or whose step was kept last time while its best loss stalled, has
/// its step halved and resumes from its best point.
pub fn apgd_attack<T: AttackTarget + ?Sized>(
    target: &T,
    x: &Array2<f64>,
    y: &[usize],
    cfg: &AttackConfig,
    params: &ApgdParams,
) -> Result<AttackResult> {
    check_inputs(x, y, cfg)?;
    params.validate()?;
    if cfg.epsilon == 0.0 {
        return zero_budget(target, x, y, cfg);
    }
    let runs = cfg.restarts.max(1);
    let mut best = BestTracker::new(x);
    for run in 0..runs {
        let start = if cfg.restarts > 0 {
            random_start(x, cfg, run)
        } else {
            x.clone()
        };
        best.merge(single_run(target, x, y, cfg, params, start)?);
    }
    Ok(best.finish(x, cfg, cfg.steps))
}

fn single_run<T: AttackTarget + ?Sized>(
    target: &T,
    x0: &Array2<f64>,
    y: &[usize],
    cfg: &AttackConfig,
    params: &ApgdParams,
    start: Array2<f64>,
) -> Result<BestTracker> {
    let n = x0.nrows();
    let alpha = params.step_weight;
    let checkpoints = if params.halving {
        checkpoint_schedule(cfg.steps)
    } else {
        Vec::new()
    };

    let mut step = vec![cfg.step_size; n];
    let mut best = BestTracker::new(x0);
    let mut x_cur = start;
    let ev = eval_checked(target, &x_cur, y, cfg.loss, true)?;
    best.update(&x_cur, &ev);
    let mut grad = ev.grad.expect("gradient requested");
    let mut best_grad = grad.clone();
    let mut x_prev = x_cur.clone();

    let mut improved = vec![0usize; n];
    let mut best_at_checkpoint = best.loss.clone();
    let mut reduced_last = vec![false; n];
    let mut last_checkpoint = 0usize;
    let mut next_checkpoint = checkpoints.iter().copied();
    let mut pending = next_checkpoint.next();

    for k in 0..cfg.steps {
        let mut z = x_cur.clone();
        for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            let g = grad.row(i);
            for (v, &gj) in row.iter_mut().zip(g.iter()) {
                *v += step[i] * sign(gj);
            }
        }
        project(&mut z, x0, cfg.epsilon, cfg.range);
        let x_next = if k == 0 || alpha == 1.0 {
            z
        } else {
            let mut m = &x_cur + &((&z - &x_cur) * alpha) + &((&x_cur - &x_prev) * (1.0 - alpha));
            project(&mut m, x0, cfg.epsilon, cfg.range);
            m
        };

        let last = k + 1 == cfg.steps;
        let ev = eval_checked(target, &x_next, y, cfg.loss, !last)?;
        for i in 0..n {
            if ev.loss[i] > best.loss[i] {
                improved[i] += 1;
                if let Some(g) = &ev.grad {
                    best_grad.row_mut(i).assign(&g.row(i));
                }
            }
        }
        best.update(&x_next, &ev);
        x_prev = x_cur;
        x_cur = x_next;
        if let Some(g) = ev.grad {
            grad = g;
        }

        if pending == Some(k + 1) && !last {
            let gap = (k + 1 - last_checkpoint) as f64;
            for i in 0..n {
                let too_few = (improved[i] as f64) < params.rho * gap;
                let stalled = !reduced_last[i] && best.loss[i] == best_at_checkpoint[i];
                reduced_last[i] = too_few || stalled;
                if reduced_last[i] {
                    step[i] /= 2.0;
                    x_cur.row_mut(i).assign(&best.x.row(i));
                    x_prev.row_mut(i).assign(&best.x.row(i));
                    grad.row_mut(i).assign(&best_grad.row(i));
                }
                improved[i] = 0;
                best_at_checkpoint[i] = best.loss[i];
            }
            last_checkpoint = k + 1;
            pending = next_checkpoint.next();
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::super::pgd_attack;
    use super::super::toy::{Bowl, Linear};
    use super::super::LossKind;
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(eps: f64, steps: usize, step: f64, restarts: usize, seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            steps,
            step_size: step,
            loss: LossKind::CrossEntropy,
            restarts,
            range: (0.0, 1.0),
            seed,
        }
    }

    #[test]
    fn schedule_for_hundred_steps() {
        assert_eq!(checkpoint_schedule(100), vec![22, 41, 57, 70, 80, 87, 93, 99]);
        assert!(checkpoint_schedule(1).iter().all(|&w| w <= 1));
    }

    #[test]
    fn zero_budget_is_identity() {
        let t = Linear {
            w: vec![1.0, -1.0],
            threshold: 5.0,
        };
        let x0 = array![[0.1, 0.7]];
        let r = apgd_attack(&t, &x0, &[0], &cfg(0.0, 10, 0.0, 1, 0), &ApgdParams::default()).unwrap();
        assert_eq!(r.adversarial, x0);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn reduces_to_pgd_without_momentum_or_halving() {
        let t = Bowl {
            centre: vec![0.42, 0.58, 0.5],
        };
        let x0 = array![[0.3, 0.6, 0.5], [0.5, 0.5, 0.9]];
        for restarts in [0, 1, 2] {
            let c = cfg(0.2, 9, 0.03, restarts, 11);
            let params = ApgdParams {
                step_weight: 1.0,
                halving: false,
                ..ApgdParams::default()
            };
            let a = apgd_attack(&t, &x0, &[0, 0], &c, &params).unwrap();
            let p = pgd_attack(&t, &x0, &[0, 0], &c).unwrap();
            assert_eq!(a, p);
        }
    }

    #[test]
    fn beats_fixed_step_on_a_bowl() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let d = 6;
            let x0 = Array2::from_shape_fn((4, d), |_| rng.gen_range(0.3..0.7));
            let centre: Vec<f64> = (0..d).map(|j| x0[[0, j]] + rng.gen_range(-0.07..0.07)).collect();
            let t = Bowl { centre };
            let c = cfg(0.1, 40, 0.025, 1, seed);
            let a = apgd_attack(&t, &x0, &[0; 4], &c.with_epsilon(0.1, 2.0), &ApgdParams::default()).unwrap();
            let p = pgd_attack(&t, &x0, &[0; 4], &c).unwrap();
            for i in 0..4 {
                assert!(
                    a.loss[i] >= p.loss[i],
                    "seed {seed} row {i}: {} < {}",
                    a.loss[i],
                    p.loss[i]
                );
            }
        }
    }

    #[test]
    fn reported_loss_matches_returned_point() {
        let t = Bowl { centre: vec![0.9, 0.1] };
        let x0 = array![[0.5, 0.5]];
        let r = apgd_attack(&t, &x0, &[0], &cfg(0.3, 25, 0.6, 2, 4), &ApgdParams::default()).unwrap();
        let ev = t.evaluate(&r.adversarial, &[0], LossKind::CrossEntropy, false).unwrap();
        assert_eq!(ev.loss[0], r.loss[0]);
    }
}

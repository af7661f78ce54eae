use ndarray::{Array2, Zip};

use super::{
    check_inputs, eval_checked, project, random_start, sign, zero_budget, AttackConfig, AttackResult, AttackTarget,
    BestTracker,
};
use crate::error::Result;

/// Projected sign-gradient ascent. Each run takes `steps` steps of fixed size;
/// the returned point is the highest-loss iterate over all runs.
pub fn pgd_attack<T: AttackTarget + ?Sized>(
    target: &T,
    x: &Array2<f64>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    check_inputs(x, y, cfg)?;
    if cfg.epsilon == 0.0 {
        return zero_budget(target, x, y, cfg);
    }
    let runs = cfg.restarts.max(1);
    let mut best = BestTracker::new(x);
    for run in 0..runs {
        let mut run_best = BestTracker::new(x);
        let mut xk = if cfg.restarts > 0 {
            random_start(x, cfg, run)
        } else {
            x.clone()
        };
        for k in 0..=cfg.steps {
            let last = k == cfg.steps;
            let ev = eval_checked(target, &xk, y, cfg.loss, !last)?;
            run_best.update(&xk, &ev);
            if last {
                break;
            }
            let grad = ev.grad.expect("gradient requested");
            Zip::from(&mut xk)
                .and(&grad)
                .for_each(|v, &g| *v += cfg.step_size * sign(g));
            project(&mut xk, x, cfg.epsilon, cfg.range);
        }
        best.merge(run_best);
    }
    Ok(best.finish(x, cfg, cfg.steps))
}

#[cfg(test)]
mod tests {
    use super::super::toy::{Constant, Linear};
    use super::super::LossKind;
    use super::*;
    use ndarray::array;

    fn cfg(eps: f64, steps: usize, step: f64) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            steps,
            step_size: step,
            loss: LossKind::CrossEntropy,
            restarts: 0,
            range: (0.0, 1.0),
            seed: 3,
        }
    }

    #[test]
    fn one_step_saturates_the_ball() {
        let t = Linear {
            w: vec![2.0],
            threshold: 10.0,
        };
        let x0 = array![[0.5]];
        let r = pgd_attack(&t, &x0, &[0], &cfg(0.1, 1, 0.2)).unwrap();
        assert!((r.adversarial[[0, 0]] - 0.6).abs() < 1e-15);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn upper_range_bound_holds() {
        let t = Linear {
            w: vec![1.0, 1.0],
            threshold: 10.0,
        };
        let x0 = array![[1.0, 0.3]];
        let r = pgd_attack(&t, &x0, &[0], &cfg(0.2, 3, 0.1)).unwrap();
        assert_eq!(r.adversarial[[0, 0]], 1.0);
        assert!((r.adversarial[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_returns_input() {
        let t = Linear {
            w: vec![1.0],
            threshold: 0.4,
        };
        let x0 = array![[0.3], [0.6]];
        let mut c = cfg(0.0, 5, 0.0);
        c.restarts = 2;
        let r = pgd_attack(&t, &x0, &[0, 0], &c).unwrap();
        assert_eq!(r.adversarial, x0);
        assert_eq!(r.success, vec![false, true]);
    }

    #[test]
    fn success_when_crossing_threshold() {
        let t = Linear {
            w: vec![1.0],
            threshold: 0.55,
        };
        let r = pgd_attack(&t, &array![[0.5]], &[0], &cfg(0.1, 2, 0.05)).unwrap();
        assert!(r.success[0]);
        assert_eq!(r.robust_accuracy(), 0.0);
    }

    #[test]
    fn random_start_stays_in_ball_and_is_seeded() {
        let t = Constant {
            logits: vec![1.0, 0.0, -1.0],
        };
        let x0 = array![[0.2, 0.9, 0.5], [0.0, 1.0, 0.5]];
        let mut c = cfg(0.15, 2, 0.05);
        c.restarts = 1;
        let a = pgd_attack(&t, &x0, &[0, 1], &c).unwrap();
        let b = pgd_attack(&t, &x0, &[0, 1], &c).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.adversarial, x0);
        c.seed += 1;
        assert_ne!(pgd_attack(&t, &x0, &[0, 1], &c).unwrap().adversarial, a.adversarial);
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = Linear {
            w: vec![1.0],
            threshold: 0.0,
        };
        assert!(pgd_attack(&t, &array![[1.5]], &[0], &cfg(0.1, 1, 0.1)).is_err());
        assert!(pgd_attack(&t, &array![[0.5]], &[0, 1], &cfg(0.1, 1, 0.1)).is_err());
        assert!(pgd_attack(&t, &array![[0.5]], &[0], &cfg(-0.1, 1, 0.1)).is_err());
    }
}

//! Correlation structure of penultimate activations under perturbation.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::attacks::{apgd_attack, pgd_attack, ApgdParams, AttackConfig, AttackKind, LossKind};
use crate::error::{Error, Result};
use crate::nn::Model;

/// Penultimate activations in evaluation mode, one row per input.
pub fn capture_penultimate(model: &Model, inputs: &Array2<f64>) -> Result<Array2<f64>> {
    model.penultimate(inputs)
}

/// Pearson correlation between columns together with the number of
/// zero-variance columns. Entries involving such a column are 0 off the
/// diagonal and 1 on it.
pub fn correlation_with_dead(acts: &Array2<f64>) -> Result<(Array2<f64>, usize)> {
    let n = acts.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 2 samples, got {n}"
        )));
    }
    let mean = acts.mean_axis(Axis(0)).expect("non-empty");
    let centred = acts - &mean;
    let cov = centred.t().dot(&centred);
    let sd: Array1<f64> = cov.diag().mapv(f64::sqrt);
    let d = acts.ncols();
    let live: Vec<bool> = sd.iter().map(|&s| s > 0.0).collect();
    let mut r = Array2::zeros((d, d));
    for i in 0..d {
        r[[i, i]] = 1.0;
        if !live[i] {
            continue;
        }
        for j in (i + 1)..d {
            if live[j] {
                let v = (cov[[i, j]] / (sd[i] * sd[j])).clamp(-1.0, 1.0);
                r[[i, j]] = v;
                r[[j, i]] = v;
            }
        }
    }
    Ok((r, live.iter().filter(|&&l| !l).count()))
}

pub fn correlation_matrix(acts: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(correlation_with_dead(acts)?.0)
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, op: &'static str) -> Result<()> {
    if a.dim() != b.dim() || a.nrows() != a.ncols() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `‖a − b‖_F`.
pub fn corr_shift(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_shape(a, b, "corr_shift")?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Sorted `|a_ij − b_ij|` over `i < j`.
pub fn corr_change_cdf(a: &Array2<f64>, b: &Array2<f64>) -> Result<Vec<f64>> {
    same_shape(a, b, "corr_change_cdf")?;
    let d = a.nrows();
    let mut out = Vec::with_capacity(d * (d - 1) / 2);
    for i in 0..d {
        for j in (i + 1)..d {
            out.push((a[[i, j]] - b[[i, j]]).abs());
        }
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Empirical CDF coordinates `(value, k/n)` of sorted samples.
pub fn ecdf(sorted: &[f64]) -> Vec<(f64, f64)> {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(k, &v)| (v, (k + 1) as f64 / n))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided Welch t-test. When both samples have zero variance the p-value is
/// 1 for equal means and 0 otherwise.
pub fn welch_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "significance needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("significance sample".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = va / na;
    let sb = vb / nb;
    let se2 = sa + sb;
    if se2 == 0.0 {
        let p = if ma == mb { 1.0 } else { 0.0 };
        let t = if ma == mb { 0.0 } else { f64::INFINITY.copysign(ma - mb) };
        return Ok(WelchTest {
            t,
            df: na + nb - 2.0,
            p_value: p,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchTest { t, df, p_value: p })
}

pub fn significance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(welch_test(a, b)?.p_value)
}

/// Correlation matrices of penultimate activations at each budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub epsilons: Vec<f64>,
    pub shifts: Vec<f64>,
    /// Sorted per-pair absolute changes against the clean matrix, per budget.
    pub changes: Vec<Vec<f64>>,
    pub dead_units: Vec<usize>,
    pub samples: usize,
    pub width: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrices: Option<Vec<Array2<f64>>>,
}

/// Perturbs `x` at every budget with the given attack, captures the
/// penultimate activations and compares their correlation with the clean one.
#[allow(clippy::too_many_arguments)]
pub fn correlation_report(
    model: &Model,
    x: &Array2<f64>,
    y: &[usize],
    epsilons: &[f64],
    kind: AttackKind,
    template: &AttackConfig,
    apgd: &ApgdParams,
    keep_matrices: bool,
) -> Result<CorrelationReport> {
    if epsilons.first() != Some(&0.0) {
        return Err(Error::InvalidArgument("budget list must start at 0".into()));
    }
    let ratio = if template.epsilon > 0.0 {
        template.step_size / template.epsilon
    } else {
        2.0
    };
    let mut mats = Vec::with_capacity(epsilons.len());
    let mut dead_units = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let xe = if eps == 0.0 {
            x.clone()
        } else {
            let cfg = template.with_epsilon(eps, ratio);
            match kind {
                AttackKind::Pgd => pgd_attack(model, x, y, &cfg)?.adversarial,
                AttackKind::Apgd => apgd_attack(model, x, y, &cfg, apgd)?.adversarial,
                AttackKind::ApgdCeDlr => {
                    let cfg = AttackConfig {
                        loss: LossKind::CrossEntropy,
                        ..cfg
                    };
                    apgd_attack(model, x, y, &cfg, apgd)?.adversarial
                }
            }
        };
        let (r, dead) = correlation_with_dead(&capture_penultimate(model, &xe)?)?;
        mats.push(r);
        dead_units.push(dead);
    }
    let mut shifts = Vec::with_capacity(mats.len());
    let mut changes = Vec::with_capacity(mats.len());
    for m in &mats {
        shifts.push(corr_shift(&mats[0], m)?);
        changes.push(corr_change_cdf(&mats[0], m)?);
    }
    Ok(CorrelationReport {
        epsilons: epsilons.to_vec(),
        shifts,
        changes,
        dead_units,
        samples: x.nrows(),
        width: mats[0].nrows(),
        matrices: keep_matrices.then_some(mats),
    })
}

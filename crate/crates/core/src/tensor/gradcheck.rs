use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// One-sided difference disagreement (relative) above which a coordinate is
/// treated as sitting on a kink and excluded from the comparison.
const KINK_THRESHOLD: f64 = 1e-3;

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over the compared coordinates. The denominator
    /// is `max(|analytic|, |numeric|, 1e-3 · max_j |analytic_j|, 1e-10)`.
    pub max_rel_error: f64,
    pub passed: bool,
    pub compared: usize,
    /// Coordinates whose one-sided differences disagree (non-differentiable points).
    pub kinks: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    let value = Tensor::from_array(g.value(out).clone()).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(value)
}

/// Compares `backward()` of the scalar function `f` at `x` against
/// `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let root = f(&mut g, xv)?;
    let f0 = Tensor::from_array(g.value(root).clone()).item()?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let analytic = g.backward(root)?.get(xv).to_vec();
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grad_check gradient".into()));
    }

    let mut numeric = vec![0.0; analytic.len()];
    let mut kinks = Vec::new();
    let mut probe = x.clone();
    for i in 0..analytic.len() {
        let orig = probe.array().as_slice().expect("standard layout")[i];
        probe.array_mut().as_slice_mut().expect("standard layout")[i] = orig + step;
        let fp = evaluate(&f, &probe)?;
        probe.array_mut().as_slice_mut().expect("standard layout")[i] = orig - step;
        let fm = evaluate(&f, &probe)?;
        probe.array_mut().as_slice_mut().expect("standard layout")[i] = orig;

        numeric[i] = (fp - fm) / (2.0 * step);
        let forward = (fp - f0) / step;
        let backward = (f0 - fm) / step;
        let scale = forward.abs().max(backward.abs()).max(1.0);
        if (forward - backward).abs() > KINK_THRESHOLD * scale {
            kinks.push(i);
        }
    }

    let amax = analytic.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * amax).max(1e-10);
    let mut max_rel_error = 0.0_f64;
    let mut compared = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        if kinks.binary_search(&i).is_ok() {
            continue;
        }
        compared += 1;
        let denom = a.abs().max(n.abs()).max(floor);
        max_rel_error = max_rel_error.max((a - n).abs() / denom);
    }
    Ok(GradCheckReport {
        max_rel_error,
        passed: max_rel_error < tol,
        compared,
        kinks,
        analytic,
        numeric,
    })
}

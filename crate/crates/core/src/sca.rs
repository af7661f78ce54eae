//! Self-consistent activation layer.
//!
//! The layer computes a feed-forward pre-activation `u = W_f x + b_f` and then
//! runs `T` explicit gradient steps on the energy
//!
//! ```text
//! J(a) = ‖a − φ(W_g a + b_g)‖² + λ ‖x − W_h a − b_h‖²,   φ = ReLU
//! ```
//!
//! following `a ← φ(u); u ← a − η ∇ₐJ`, and finally returns `φ(u)`. The whole
//! unrolled loop is recorded on the differentiation tape, so training and
//! attacks differentiate through every step. Inside the loop `∇ₐJ` is built
//! from tape operations in closed form; [`sca_energy_grad`] obtains the same
//! quantity by running `backward()` on `J` and serves as its cross-check.
//!
//! `diag(W_g)` is held at exactly zero so the self-consistency term cannot be
//! satisfied trivially by the identity map.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::uniform_init;
use crate::tensor::{Graph, Tensor, Var};

/// Inner-loop hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaHyper {
    /// Weight of the reconstruction term.
    pub lambda: f64,
    /// Inner step size.
    pub eta: f64,
    /// Number of inner steps.
    pub steps: usize,
}

impl Default for ScaHyper {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            eta: 0.05,
            steps: 16,
        }
    }
}

impl ScaHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Learnable values of one layer. `w_f: d_a×d_x`, `w_g: d_a×d_a`, `w_h: d_x×d_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaParams {
    pub w_f: Array2<f64>,
    pub b_f: Array1<f64>,
    pub w_g: Array2<f64>,
    pub b_g: Array1<f64>,
    pub w_h: Array2<f64>,
    pub b_h: Array1<f64>,
    pub hyper: ScaHyper,
}

fn shape_err(what: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op: what,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl ScaParams {
    /// Validates shapes and zeroes the diagonal of `w_g`.
    pub fn new(
        w_f: Array2<f64>,
        b_f: Array1<f64>,
        mut w_g: Array2<f64>,
        b_g: Array1<f64>,
        w_h: Array2<f64>,
        b_h: Array1<f64>,
        hyper: ScaHyper,
    ) -> Result<Self> {
        hyper.validate()?;
        let (d_a, d_x) = w_f.dim();
        if b_f.len() != d_a {
            return Err(shape_err("sca b_f", w_f.shape(), b_f.shape()));
        }
        if w_g.dim() != (d_a, d_a) {
            return Err(shape_err("sca w_g", w_f.shape(), w_g.shape()));
        }
        if b_g.len() != d_a {
            return Err(shape_err("sca b_g", w_g.shape(), b_g.shape()));
        }
        if w_h.dim() != (d_x, d_a) {
            return Err(shape_err("sca w_h", w_f.shape(), w_h.shape()));
        }
        if b_h.len() != d_x {
            return Err(shape_err("sca b_h", w_h.shape(), b_h.shape()));
        }
        zero_diagonal(&mut w_g);
        Ok(Self {
            w_f,
            b_f,
            w_g,
            b_g,
            w_h,
            b_h,
            hyper,
        })
    }

    /// Uniform `±1/√fan_in` initialisation, diagonal of `w_g` zeroed.
    pub fn init<R: Rng>(input_dim: usize, act_dim: usize, hyper: ScaHyper, rng: &mut R) -> Result<Self> {
        let (w_f, b_f) = uniform_init(act_dim, input_dim, rng);
        let (w_g, b_g) = uniform_init(act_dim, act_dim, rng);
        let (w_h, b_h) = uniform_init(input_dim, act_dim, rng);
        Self::new(w_f, b_f, w_g, b_g, w_h, b_h, hyper)
    }

    pub fn input_dim(&self) -> usize {
        self.w_f.ncols()
    }

    pub fn act_dim(&self) -> usize {
        self.w_f.nrows()
    }

    /// Re-imposes the zero-diagonal constraint after an optimizer update.
    pub fn project(&mut self) {
        zero_diagonal(&mut self.w_g);
    }

    /// Records every parameter on `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ScaVars {
        let mut put = |a: ndarray::ArrayD<f64>| {
            if trainable {
                g.leaf(Tensor::from_array(a))
            } else {
                g.constant_array(a)
            }
        };
        ScaVars {
            w_f: put(self.w_f.clone().into_dyn()),
            b_f: put(self.b_f.clone().into_dyn()),
            w_g: put(self.w_g.clone().into_dyn()),
            b_g: put(self.b_g.clone().into_dyn()),
            w_h: put(self.w_h.clone().into_dyn()),
            b_h: put(self.b_h.clone().into_dyn()),
        }
    }

    fn check_batch(&self, a: &Array2<f64>, x: &Array2<f64>) -> Result<()> {
        if a.ncols() != self.act_dim() {
            return Err(shape_err("sca activations", a.shape(), self.w_g.shape()));
        }
        if x.ncols() != self.input_dim() || x.nrows() != a.nrows() {
            return Err(shape_err("sca input", x.shape(), a.shape()));
        }
        Ok(())
    }
}

/// Graph handles of one bound layer.
#[derive(Clone, Copy, Debug)]
pub struct ScaVars {
    pub w_f: Var,
    pub b_f: Var,
    pub w_g: Var,
    pub b_g: Var,
    pub w_h: Var,
    pub b_h: Var,
}

fn zero_diagonal(w: &mut Array2<f64>) {
    w.diag_mut().fill(0.0);
}

/// Copy of `w` with its diagonal set to zero.
pub fn project_diag_zero(w: &Array2<f64>) -> Result<Array2<f64>> {
    if w.nrows() != w.ncols() {
        return Err(Error::InvalidArgument(format!(
            "diagonal projection needs a square matrix, got {:?}",
            w.shape()
        )));
    }
    let mut out = w.clone();
    zero_diagonal(&mut out);
    Ok(out)
}

/// Records `J(a)` summed over the batch rows.
pub fn energy_traced(g: &mut Graph, a: Var, x: Var, vars: &ScaVars, lambda: f64) -> Result<Var> {
    let wa = g.matmul_nt(a, vars.w_g)?;
    let z = g.add_bias(wa, vars.b_g)?;
    let pz = g.relu(z)?;
    let r = g.sub(a, pz)?;
    let r2 = g.square(r)?;
    let consistency = g.sum(r2)?;
    if lambda == 0.0 {
        return Ok(consistency);
    }
    let ha = g.matmul_nt(a, vars.w_h)?;
    let xh = g.add_bias(ha, vars.b_h)?;
    let rec = g.sub(x, xh)?;
    let rec2 = g.square(rec)?;
    let reconstruction = g.sum(rec2)?;
    let weighted = g.scale(reconstruction, lambda)?;
    g.add(consistency, weighted)
}

/// Loop-invariant factors of the reconstruction gradient:
/// `(x − b_h) W_h` and `W_hᵀ W_h`.
struct Reconstruction {
    target: Var,
    gram: Var,
}

impl Reconstruction {
    fn record(g: &mut Graph, x: Var, vars: &ScaVars) -> Result<Self> {
        let neg_bias = g.scale(vars.b_h, -1.0)?;
        let centred = g.add_bias(x, neg_bias)?;
        let target = g.matmul(centred, vars.w_h)?;
        let gram = g.matmul_tn(vars.w_h, vars.w_h)?;
        Ok(Self { target, gram })
    }
}

/// One inner update `u ← a − η ∇ₐJ` built from tape operations, with
/// `∇ₐJ = 2(a − φ(z)) − 2[φ′(z) ⊙ (a − φ(z))] W_g − 2λ (x − a W_hᵀ − b_h) W_h`
/// in row-batch form, `z = a W_gᵀ + b_g`. The last term is expanded as
/// `(x − b_h) W_h − a W_hᵀ W_h` so each step needs one product for it.
fn inner_step(g: &mut Graph, a: Var, vars: &ScaVars, rec: Option<&Reconstruction>, hyper: &ScaHyper) -> Result<Var> {
    let wa = g.matmul_nt(a, vars.w_g)?;
    let z = g.add_bias(wa, vars.b_g)?;
    let pz = g.relu(z)?;
    let r = g.sub(a, pz)?;
    let mask = g.relu_mask(z);
    let masked = g.mul(mask, r)?;
    let back = g.matmul(masked, vars.w_g)?;
    let mut half_grad = g.sub(r, back)?;
    if let Some(rec) = rec {
        let ag = g.matmul(a, rec.gram)?;
        let rec_back = g.sub(rec.target, ag)?;
        let weighted = g.scale(rec_back, hyper.lambda)?;
        half_grad = g.sub(half_grad, weighted)?;
    }
    let delta = g.scale(half_grad, -2.0 * hyper.eta)?;
    g.add(a, delta)
}

fn forward_impl(
    g: &mut Graph,
    x: Var,
    vars: &ScaVars,
    hyper: &ScaHyper,
    mut iterates: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let pre = g.matmul_nt(x, vars.w_f)?;
    let mut u = g.add_bias(pre, vars.b_f)?;
    let rec = if hyper.lambda != 0.0 && hyper.steps > 0 {
        Some(Reconstruction::record(g, x, vars)?)
    } else {
        None
    };
    for _ in 0..hyper.steps {
        let a = g.relu(u)?;
        if let Some(it) = iterates.as_deref_mut() {
            it.push(a);
        }
        u = inner_step(g, a, vars, rec.as_ref(), hyper)?;
    }
    let out = g.relu(u)?;
    if let Some(it) = iterates {
        it.push(out);
    }
    Ok(out)
}

/// Records the full layer on `g`; `x` is `[batch, d_x]`, the result `[batch, d_a]`.
pub fn sca_forward_traced(g: &mut Graph, x: Var, vars: &ScaVars, hyper: &ScaHyper) -> Result<Var> {
    forward_impl(g, x, vars, hyper, None)
}

/// Runs the layer without keeping the graph.
pub fn sca_forward(x: &Array2<f64>, p: &ScaParams) -> Result<Array2<f64>> {
    Ok(sca_trajectory(x, p)?.pop().expect("at least the output"))
}

/// Activations `φ(u₀), …, φ(u_T)`; the last entry is the layer output.
pub fn sca_trajectory(x: &Array2<f64>, p: &ScaParams) -> Result<Vec<Array2<f64>>> {
    if x.ncols() != p.input_dim() {
        return Err(shape_err("sca_forward", x.shape(), p.w_f.shape()));
    }
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let xv = g.constant(Tensor::from_matrix(x.clone()));
    let mut iterates = Vec::with_capacity(p.hyper.steps + 1);
    forward_impl(&mut g, xv, &vars, &p.hyper, Some(&mut iterates))?;
    iterates.into_iter().map(|v| g.tensor(v).into_matrix()).collect()
}

/// `J(a)` summed over rows.
pub fn sca_energy(a: &Array2<f64>, x: &Array2<f64>, p: &ScaParams) -> Result<f64> {
    p.check_batch(a, x)?;
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let av = g.constant(Tensor::from_matrix(a.clone()));
    let xv = g.constant(Tensor::from_matrix(x.clone()));
    let j = energy_traced(&mut g, av, xv, &vars, p.hyper.lambda)?;
    g.tensor(j).item()
}

/// Per-row energies.
pub fn sca_energy_rows(a: &Array2<f64>, x: &Array2<f64>, p: &ScaParams) -> Result<Array1<f64>> {
    p.check_batch(a, x)?;
    let z = a.dot(&p.w_g.t()) + &p.b_g;
    let r = a - &z.mapv(|v| v.max(0.0));
    let mut out = r.mapv(|v| v * v).sum_axis(Axis(1));
    if p.hyper.lambda != 0.0 {
        let rec = x - &(a.dot(&p.w_h.t()) + &p.b_h);
        out = out + rec.mapv(|v| v * v).sum_axis(Axis(1)) * p.hyper.lambda;
    }
    Ok(out)
}

/// `∇ₐJ` obtained by running `backward()` on the recorded energy.
pub fn sca_energy_grad(a: &Array2<f64>, x: &Array2<f64>, p: &ScaParams) -> Result<Array2<f64>> {
    p.check_batch(a, x)?;
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let av = g.leaf(Tensor::from_matrix(a.clone()));
    let xv = g.constant(Tensor::from_matrix(x.clone()));
    let j = energy_traced(&mut g, av, xv, &vars, p.hyper.lambda)?;
    g.backward(j)?.get(av).into_matrix()
}

/// `∇ₐJ` from the closed-form expression, evaluated directly.
pub fn sca_energy_grad_closed_form(a: &Array2<f64>, x: &Array2<f64>, p: &ScaParams) -> Result<Array2<f64>> {
    p.check_batch(a, x)?;
    let z = a.dot(&p.w_g.t()) + &p.b_g;
    let r = a - &z.mapv(|v| v.max(0.0));
    let masked = &r * &z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let mut grad = (&r - &masked.dot(&p.w_g)) * 2.0;
    if p.hyper.lambda != 0.0 {
        let rec = x - &(a.dot(&p.w_h.t()) + &p.b_h);
        grad = grad - rec.dot(&p.w_h) * (2.0 * p.hyper.lambda);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d_x: usize, d_a: usize, hyper: ScaHyper) -> ScaParams {
        ScaParams::new(
            Array2::zeros((d_a, d_x)),
            Array1::zeros(d_a),
            Array2::zeros((d_a, d_a)),
            Array1::zeros(d_a),
            Array2::zeros((d_x, d_a)),
            Array1::zeros(d_x),
            hyper,
        )
        .unwrap()
    }

    fn hyper(lambda: f64, eta: f64, steps: usize) -> ScaHyper {
        ScaHyper { lambda, eta, steps }
    }

    #[test]
    fn energy_vanishes_at_zero() {
        let p = params(3, 2, hyper(0.0, 0.1, 1));
        let j = sca_energy(&Array2::zeros((1, 2)), &array![[1.0, 2.0, 3.0]], &p).unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn energy_hand_computation() {
        let mut p = params(1, 2, hyper(0.0, 0.1, 1));
        p.w_g = array![[0.0, 1.0], [1.0, 0.0]];
        let j = sca_energy(&array![[1.0, 2.0]], &array![[0.0]], &p).unwrap();
        assert_abs_diff_eq!(j, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn energy_reconstruction_term_only() {
        let p = params(1, 1, hyper(1.0, 0.1, 1));
        let j = sca_energy(&array![[0.0]], &array![[3.0]], &p).unwrap();
        assert_abs_diff_eq!(j, 9.0, epsilon = 1e-15);
    }

    #[test]
    fn grad_reduces_to_two_a_without_coupling() {
        let p = params(2, 3, hyper(0.0, 0.1, 1));
        let a = array![[0.5, -1.0, 2.0], [3.0, 0.0, 0.25]];
        let x = Array2::zeros((2, 2));
        let tape = sca_energy_grad(&a, &x, &p).unwrap();
        let closed = sca_energy_grad_closed_form(&a, &x, &p).unwrap();
        assert_eq!(tape, &a * 2.0);
        assert_eq!(closed, &a * 2.0);
    }

    #[test]
    fn grad_vanishes_at_fixed_point() {
        let mut p = params(1, 2, hyper(0.0, 0.1, 1));
        p.w_g = array![[0.0, 1.0], [1.0, 0.0]];
        let a = array![[2.0, 2.0]];
        let g = sca_energy_grad(&a, &array![[0.0]], &p).unwrap();
        assert_eq!(g, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn tape_and_closed_form_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ScaParams::init(5, 4, hyper(0.7, 0.1, 3), &mut rng).unwrap();
        let a = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let x = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let tape = sca_energy_grad(&a, &x, &p).unwrap();
        let closed = sca_energy_grad_closed_form(&a, &x, &p).unwrap();
        for (t, c) in tape.iter().zip(closed.iter()) {
            assert_abs_diff_eq!(t, c, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_steps_is_plain_affine_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ScaParams::init(6, 4, hyper(1.0, 0.1, 0), &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 6), |_| rng.gen_range(-1.0..1.0));
        let out = sca_forward(&x, &p).unwrap();
        let expected = (x.dot(&p.w_f.t()) + &p.b_f).mapv(|v| if v > 0.0 { v } else { 0.0 });
        assert_eq!(out, expected);
    }

    #[test]
    fn geometric_shrinkage_without_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let steps = 7;
        let eta = 0.15;
        let mut p = ScaParams::init(4, 3, hyper(0.0, eta, steps), &mut rng).unwrap();
        p.w_g.fill(0.0);
        p.b_g.fill(0.0);
        let x = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let a0 = (x.dot(&p.w_f.t()) + &p.b_f).mapv(|v| v.max(0.0));
        let out = sca_forward(&x, &p).unwrap();
        for (o, a) in out.iter().zip(a0.iter()) {
            let mut expected = *a;
            for _ in 0..steps {
                expected *= 1.0 - 2.0 * eta;
            }
            assert_abs_diff_eq!(*o, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn diagonal_projection() {
        assert_eq!(
            project_diag_zero(&Array2::eye(3)).unwrap(),
            Array2::<f64>::zeros((3, 3))
        );
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        let once = project_diag_zero(&m).unwrap();
        assert_eq!(once, array![[0.0, 2.0], [3.0, 0.0]]);
        assert_eq!(project_diag_zero(&once).unwrap(), once);
        assert!(project_diag_zero(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn constructor_zeroes_diagonal_and_checks_shapes() {
        let p = ScaParams::new(
            Array2::zeros((2, 3)),
            Array1::zeros(2),
            Array2::eye(2),
            Array1::zeros(2),
            Array2::zeros((3, 2)),
            Array1::zeros(3),
            ScaHyper::default(),
        )
        .unwrap();
        assert_eq!(p.w_g, Array2::<f64>::zeros((2, 2)));
        let bad = ScaParams::new(
            Array2::zeros((2, 3)),
            Array1::zeros(2),
            Array2::eye(2),
            Array1::zeros(2),
            Array2::zeros((2, 2)),
            Array1::zeros(3),
            ScaHyper::default(),
        );
        assert!(bad.is_err());
        assert!(hyper(-1.0, 0.1, 1).validate().is_err());
        assert!(hyper(1.0, 0.0, 1).validate().is_err());
    }

    #[test]
    fn energy_rows_sum_to_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ScaParams::init(5, 4, hyper(0.3, 0.1, 2), &mut rng).unwrap();
        let a = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.0..1.0));
        let x = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let rows = sca_energy_rows(&a, &x, &p).unwrap();
        assert_abs_diff_eq!(rows.sum(), sca_energy(&a, &x, &p).unwrap(), epsilon = 1e-12);
    }
}

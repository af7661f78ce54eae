use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Affine projection `x Wᵀ + b` with `W: out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineParams {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if bias.len() != weight.nrows() {
            return Err(Error::Shape {
                op: "affine params",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn init<R: Rng>(output: usize, input: usize, rng: &mut R) -> Self {
        let (weight, bias) = uniform_init(output, input, rng);
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> (Var, Var) {
        let w = self.weight.clone().into_dyn();
        let b = self.bias.clone().into_dyn();
        if trainable {
            (g.leaf(Tensor::from_array(w)), g.leaf(Tensor::from_array(b)))
        } else {
            (g.constant_array(w), g.constant_array(b))
        }
    }
}

/// Weights and bias drawn uniformly from `±1/√fan_in`.
pub fn uniform_init<R: Rng>(output: usize, input: usize, rng: &mut R) -> (Array2<f64>, Array1<f64>) {
    let bound = 1.0 / (input as f64).sqrt();
    let w = Array2::from_shape_fn((output, input), |_| rng.gen_range(-bound..bound));
    let b = Array1::from_shape_fn(output, |_| rng.gen_range(-bound..bound));
    (w, b)
}

/// Records `x Wᵀ + b` for a `[batch, in]` input.
pub fn affine_traced(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xw = g.matmul_nt(x, weight)?;
    g.add_bias(xw, bias)
}

/// Eager affine map over the rows of `x`.
pub fn affine_forward(x: &Array2<f64>, p: &AffineParams) -> Result<Array2<f64>> {
    if x.ncols() != p.input_dim() {
        return Err(Error::Shape {
            op: "affine_forward",
            lhs: x.shape().to_vec(),
            rhs: p.weight.shape().to_vec(),
        });
    }
    Ok(x.dot(&p.weight.t()) + &p.bias)
}

/// Nonlinearity following an affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// `dropout ∘ ReLU`.
    ReluDropout,
}

/// Whether stochastic layers are active.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Inverted dropout: in training each unit is zeroed with probability `p` and
/// survivors are scaled by `1/(1−p)`. Identity in evaluation or when `p = 0`.
pub fn dropout(g: &mut Graph, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train { dropout: p, rng } => {
            let p = *p;
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "dropout probability must be in [0, 1), got {p}"
                )));
            }
            if p == 0.0 {
                return Ok(x);
            }
            let keep = 1.0 / (1.0 - p);
            let shape = g.shape(x).to_vec();
            let mask = ArrayD::from_shape_fn(shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
            let m = g.constant_array(mask);
            g.mul(x, m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn identity_affine() {
        let p = AffineParams::new(Array2::eye(3), Array1::zeros(3)).unwrap();
        let x = array![[1.0, -2.0, 3.5]];
        assert_eq!(affine_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn affine_hand_value_and_batch_shape() {
        let p = AffineParams::new(array![[2.0, 3.0]], array![1.0]).unwrap();
        assert_eq!(affine_forward(&array![[1.0, 1.0]], &p).unwrap(), array![[6.0]]);
        let batch = Array2::ones((4, 2));
        assert_eq!(affine_forward(&batch, &p).unwrap().dim(), (4, 1));
        assert!(affine_forward(&Array2::ones((4, 3)), &p).is_err());
        assert!(AffineParams::new(Array2::eye(2), Array1::zeros(3)).is_err());
    }

    fn run_dropout(p: f64, train: bool, n: usize) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_array(ArrayD::ones(ndarray::IxDyn(&[n]))));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut mode = if train {
            Mode::Train {
                dropout: p,
                rng: &mut rng,
            }
        } else {
            Mode::Eval
        };
        let y = dropout(&mut g, x, &mut mode).unwrap();
        g.value(y).iter().copied().collect()
    }

    #[test]
    fn dropout_identity_cases() {
        assert!(run_dropout(0.0, true, 100).iter().all(|&v| v == 1.0));
        assert!(run_dropout(0.0, false, 100).iter().all(|&v| v == 1.0));
        assert!(run_dropout(0.2, false, 100).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_zero_fraction_concentrates() {
        let out = run_dropout(0.5, true, 100_000);
        let zeros = out.iter().filter(|&&v| v == 0.0).count() as f64 / out.len() as f64;
        assert!((zeros - 0.5).abs() < 0.01, "{zeros}");
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_rejects_p_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mode = Mode::Train {
            dropout: 1.0,
            rng: &mut rng,
        };
        assert!(dropout(&mut g, x, &mut mode).is_err());
    }
}

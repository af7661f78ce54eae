use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Splits};
use crate::error::{Error, Result};

/// Isotropic unit-variance Gaussian clusters whose centres are `margin` apart
/// pairwise. With two classes the centres sit at `±margin/2` on axis 0;
/// otherwise class `c` is centred at `(margin/√2)·e_c`, which needs `k ≤ d`.
///
/// Rows are shuffled and split 60/20/20 into train/val/test. The valid range
/// is the observed min/max.
pub fn synthetic_blobs(n: usize, d: usize, k: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {k}")));
    }
    if d == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "invalid blob counts n={n}, d={d}, k={k}"
        )));
    }
    if k > 2 && k > d {
        return Err(Error::InvalidArgument(format!(
            "{k} classes need at least {k} dimensions"
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be positive, got {margin}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = |c: usize, j: usize| -> f64 {
        if k == 2 {
            if j == 0 {
                if c == 0 {
                    -margin / 2.0
                } else {
                    margin / 2.0
                }
            } else {
                0.0
            }
        } else if j == c {
            margin / std::f64::consts::SQRT_2
        } else {
            0.0
        }
    };
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut inputs = Array2::zeros((n, d));
    for (i, mut row) in inputs.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = centre(labels[i], j) + noise;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 3 / 5;
    let n_val = n / 5;
    let splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    let lo = inputs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = inputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Dataset::new(
        inputs,
        labels,
        k,
        (lo, hi),
        splits,
        format!("synthetic_blobs(n={n}, d={d}, k={k}, margin={margin}, seed={seed})"),
    )
}

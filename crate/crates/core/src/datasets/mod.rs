//! Datasets: IDX ingestion, train/validation/test splits, input normalisation
//! and a synthetic Gaussian-blob generator.

mod fetch;
mod idx;
mod synthetic;

pub use fetch::{ensure_files, load_source, DatasetFiles, Source, DATA_DIR_ENV};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, read_maybe_gz};
pub use synthetic::synthetic_blobs;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Official source sizes for MNIST-style datasets.
pub const TRAIN_SOURCE_SIZE: usize = 60_000;
pub const TEST_SOURCE_SIZE: usize = 10_000;
/// Validation examples drawn from the training source.
pub const VALIDATION_SIZE: usize = 5_000;
pub const TRAIN_SIZE: usize = 45_000;

/// Row indices of each split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Inputs in original units plus integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Valid input range `[lo, hi]`.
    pub range: (f64, f64),
    pub splits: Splits,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        range: (f64, f64),
        splits: Splits,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let ds = Self {
            inputs,
            labels,
            num_classes,
            range,
            splits,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.nrows();
        if self.labels.len() != n {
            return Err(Error::Data(format!(
                "{} input rows but {} labels",
                n,
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {})", self.num_classes)));
        }
        let (lo, hi) = self.range;
        if !(lo < hi) {
            return Err(Error::Data(format!("invalid input range [{lo}, {hi}]")));
        }
        if self.inputs.iter().any(|&v| !(v >= lo && v <= hi)) {
            return Err(Error::Data(format!("inputs outside declared range [{lo}, {hi}]")));
        }
        let mut seen = vec![false; n];
        for &i in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if i >= n {
                return Err(Error::Data(format!("split index {i} out of bounds for {n} rows")));
            }
            if seen[i] {
                return Err(Error::Data(format!("split index {i} appears twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Copies the selected rows.
    pub fn select(&self, rows: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.inputs.select(Axis(0), rows);
        let y = rows.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn split(&self, split: Split) -> (Array2<f64>, Vec<usize>) {
        self.select(self.indices(split))
    }

    /// Keeps only the first `n` indices of a split.
    pub fn truncate_split(&mut self, split: Split, n: usize) {
        let v = match split {
            Split::Train => &mut self.splits.train,
            Split::Val => &mut self.splits.val,
            Split::Test => &mut self.splits.test,
        };
        v.truncate(n);
    }
}

/// Merges a training source and a test source. Validation rows are the first
/// `n_val` entries of a seeded shuffle of the training source; training rows
/// are the next `n_train`; the test split is the whole test source.
pub fn split_sized(
    train_src: &Dataset,
    test_src: &Dataset,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<Dataset> {
    if train_src.input_dim() != test_src.input_dim() || train_src.num_classes != test_src.num_classes {
        return Err(Error::Data("training and test sources have different layouts".into()));
    }
    let pool = train_src.len();
    if n_train + n_val > pool {
        return Err(Error::Data(format!(
            "requested {n_train} train + {n_val} validation rows from a pool of {pool}"
        )));
    }
    let mut perm: Vec<usize> = (0..pool).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let splits = Splits {
        val: perm[..n_val].to_vec(),
        train: perm[n_val..n_val + n_train].to_vec(),
        test: (pool..pool + test_src.len()).collect(),
    };
    let inputs = concatenate(Axis(0), &[train_src.inputs.view(), test_src.inputs.view()])
        .map_err(|e| Error::Data(e.to_string()))?;
    let mut labels = train_src.labels.clone();
    labels.extend_from_slice(&test_src.labels);
    let range = (
        train_src.range.0.min(test_src.range.0),
        train_src.range.1.max(test_src.range.1),
    );
    Dataset::new(
        inputs,
        labels,
        train_src.num_classes,
        range,
        splits,
        format!("{} + {} (split seed {seed})", train_src.provenance, test_src.provenance),
    )
}

/// The 45000 / 5000 / 10000 partition of a 60000 + 10000 source pair.
/// The remaining 10000 training-source rows are left unused.
pub fn split(train_src: &Dataset, test_src: &Dataset, seed: u64) -> Result<Dataset> {
    if train_src.len() != TRAIN_SOURCE_SIZE || test_src.len() != TEST_SOURCE_SIZE {
        return Err(Error::Data(format!(
            "expected {TRAIN_SOURCE_SIZE} training and {TEST_SOURCE_SIZE} test source rows, got {} and {}",
            train_src.len(),
            test_src.len()
        )));
    }
    split_sized(train_src, test_src, TRAIN_SIZE, VALIDATION_SIZE, seed)
}

/// Affine input preprocessing `(x − shift) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: f64,
    pub scale: f64,
}

impl Normalization {
    /// `(x − 0.5) / 0.5`, used for the image datasets.
    pub const IMAGE: Normalization = Normalization { shift: 0.5, scale: 0.5 };

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.scale + self.shift
    }
}

pub fn normalize(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| Normalization::IMAGE.apply(v))
}

pub fn denormalize(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| Normalization::IMAGE.invert(v))
}

use std::path::Path;

use ndarray::{s, Array2};

use sca_core::datasets::{load_source, split, split_sized, synthetic_blobs, Dataset, Source, Split};

use crate::config::{DatasetName, ExperimentConfig};
use crate::error::CliError;

pub fn dataset_label(cfg: &ExperimentConfig) -> &'static str {
    match cfg.dataset {
        DatasetName::Mnist => "mnist",
        DatasetName::Fmnist => "fmnist",
        DatasetName::Blobs => "blobs",
    }
}

pub fn load(cfg: &ExperimentConfig, root: &Path, offline: bool) -> Result<Dataset, CliError> {
    let source = match cfg.dataset {
        DatasetName::Blobs => {
            let b = &cfg.blobs;
            return Ok(synthetic_blobs(b.samples, b.dim, b.classes, b.margin, cfg.split_seed)?);
        }
        DatasetName::Mnist => Source::Mnist,
        DatasetName::Fmnist => Source::FashionMnist,
    };
    let (train, test) = load_source(source, root, offline)?;
    let ds = if cfg.desk_scale {
        split_sized(&train, &test, cfg.desk.train, cfg.desk.val, cfg.split_seed)?
    } else {
        split(&train, &test, cfg.split_seed)?
    };
    Ok(ds)
}

/// The first `n` test rows, or all of them.
pub fn test_subset(ds: &Dataset, n: Option<usize>) -> (Array2<f64>, Vec<usize>) {
    let (x, y) = ds.split(Split::Test);
    match n {
        Some(n) if n < y.len() => (x.slice(s![..n, ..]).to_owned(), y[..n].to_vec()),
        _ => (x, y),
    }
}

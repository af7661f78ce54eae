use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::idx::{load_idx, read_maybe_gz};
use super::Dataset;
use crate::error::{Error, Result};

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "SCA_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Mnist,
    FashionMnist,
}

struct RemoteFile {
    name: &'static str,
    /// SHA-256 of the decompressed payload, when known.
    sha256: Option<&'static str>,
}

const MNIST_FILES: [RemoteFile; 4] = [
    RemoteFile {
        name: "train-images-idx3-ubyte",
        sha256: Some("ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    },
    RemoteFile {
        name: "train-labels-idx1-ubyte",
        sha256: Some("65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    },
    RemoteFile {
        name: "t10k-images-idx3-ubyte",
        sha256: Some("0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    },
    RemoteFile {
        name: "t10k-labels-idx1-ubyte",
        sha256: Some("ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
    },
];

// FIXME: pin the Fashion-MNIST payload digests once verified against the upstream archive.
const FASHION_FILES: [RemoteFile; 4] = [
    RemoteFile {
        name: "train-images-idx3-ubyte",
        sha256: None,
    },
    RemoteFile {
        name: "train-labels-idx1-ubyte",
        sha256: None,
    },
    RemoteFile {
        name: "t10k-images-idx3-ubyte",
        sha256: None,
    },
    RemoteFile {
        name: "t10k-labels-idx1-ubyte",
        sha256: None,
    },
];

impl Source {
    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mnist" => Some(Self::Mnist),
            "fmnist" | "fashion-mnist" | "fashion_mnist" => Some(Self::FashionMnist),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::FashionMnist => "fmnist",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::FashionMnist => "fashion-mnist",
        }
    }

    fn mirrors(self) -> &'static [&'static str] {
        match self {
            Self::Mnist => &[
                "https://ossci-datasets.s3.amazonaws.com/mnist/",
                "https://storage.googleapis.com/cvdf-datasets/mnist/",
            ],
            Self::FashionMnist => &["http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"],
        }
    }

    fn files(self) -> &'static [RemoteFile; 4] {
        match self {
            Self::Mnist => &MNIST_FILES,
            Self::FashionMnist => &FASHION_FILES,
        }
    }

    /// `$SCA_DATA_DIR`, else `$HOME/.cache/sca-lab`.
    pub fn default_root() -> PathBuf {
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            return PathBuf::from(dir);
        }
        let home = std::env::var("HOME").unwrap_or_else(|_| ".".into());
        Path::new(&home).join(".cache").join("sca-lab")
    }
}

/// Resolved paths of the four IDX files.
#[derive(Clone, Debug)]
pub struct DatasetFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn verify(path: &Path, expected: Option<&str>) -> Result<String> {
    let payload = read_maybe_gz(path)?;
    let actual = sha256_hex(&payload);
    if let Some(want) = expected {
        if actual != want {
            return Err(Error::Data(format!(
                "digest mismatch for {}: expected {want}, found {actual}",
                path.display()
            )));
        }
    }
    Ok(actual)
}

fn locate(dir: &Path, name: &str) -> Option<PathBuf> {
    [dir.join(name), dir.join(format!("{name}.gz"))]
        .into_iter()
        .find(|p| p.is_file())
}

fn download(url: &str, dest: &Path) -> Result<()> {
    let resp = ureq::get(url)
        .call()
        .map_err(|e| Error::Data(format!("download of {url} failed: {e}")))?;
    let mut body = Vec::new();
    resp.into_reader()
        .read_to_end(&mut body)
        .map_err(|e| Error::Data(format!("download of {url} failed: {e}")))?;
    let tmp = dest.with_extension("part");
    fs::write(&tmp, &body)?;
    fs::rename(&tmp, dest)?;
    Ok(())
}

/// Makes sure all four files exist under `root/<dataset>` and match their
/// pinned digests, downloading missing ones unless `offline`.
pub fn ensure_files(source: Source, root: &Path, offline: bool) -> Result<DatasetFiles> {
    let dir = root.join(source.dir_name());
    let mut paths = Vec::with_capacity(4);
    for file in source.files() {
        let path = match locate(&dir, file.name) {
            Some(p) => p,
            None if offline => {
                return Err(Error::Data(format!(
                    "{} not found in {} (offline mode)",
                    file.name,
                    dir.display()
                )))
            }
            None => {
                fs::create_dir_all(&dir)?;
                let dest = dir.join(format!("{}.gz", file.name));
                let mut last_err = None;
                for mirror in source.mirrors() {
                    match download(&format!("{mirror}{}.gz", file.name), &dest) {
                        Ok(()) => {
                            last_err = None;
                            break;
                        }
                        Err(e) => last_err = Some(e),
                    }
                }
                if let Some(e) = last_err {
                    return Err(e);
                }
                dest
            }
        };
        verify(&path, file.sha256)?;
        paths.push(path);
    }
    let mut it = paths.into_iter();
    Ok(DatasetFiles {
        train_images: it.next().expect("four files"),
        train_labels: it.next().expect("four files"),
        test_images: it.next().expect("four files"),
        test_labels: it.next().expect("four files"),
    })
}

/// Loads the training and test sources of `source` from `root`.
pub fn load_source(source: Source, root: &Path, offline: bool) -> Result<(Dataset, Dataset)> {
    let files = ensure_files(source, root, offline)?;
    let mut train = load_idx(&files.train_images, &files.train_labels)?;
    let mut test = load_idx(&files.test_images, &files.test_labels)?;
    train.provenance = format!("{}:train", source.name());
    test.provenance = format!("{}:test", source.name());
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offline_missing_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = ensure_files(Source::Mnist, dir.path(), true).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn digest_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("mnist");
        fs::create_dir_all(&sub).unwrap();
        for f in &MNIST_FILES {
            fs::write(sub.join(f.name), b"not the real file").unwrap();
        }
        let err = ensure_files(Source::Mnist, dir.path(), true).unwrap_err();
        assert!(err.to_string().contains("digest mismatch"), "{err}");
    }

    #[test]
    fn source_names() {
        assert_eq!(Source::parse("FMNIST"), Some(Source::FashionMnist));
        assert_eq!(Source::parse("mnist"), Some(Source::Mnist));
        assert_eq!(Source::parse("cifar"), None);
    }
}

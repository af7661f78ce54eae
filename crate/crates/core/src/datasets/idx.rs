use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array2;

use super::{Dataset, Splits};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const NUM_CLASSES: usize = 10;

/// Reads a file, inflating it when it starts with the gzip magic bytes.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated {what} header")))
}

/// Parses an IDX image file into `(n, rows·cols)` values scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic number {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let dim = rows * cols;
    let payload = &bytes[16..];
    if payload.len() != n * dim {
        return Err(Error::Format(format!(
            "truncated image file: header declares {n}×{rows}×{cols} bytes, found {}",
            payload.len()
        )));
    }
    Ok(Array2::from_shape_fn((n, dim), |(i, j)| {
        payload[i * dim + j] as f64 / 255.0
    }))
}

/// Parses an IDX label file; labels must lie in `[0, 10)`.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic number {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "label")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "truncated label file: header declares {n} labels, found {}",
            payload.len()
        )));
    }
    if let Some(&bad) = payload.iter().find(|&&b| b as usize >= NUM_CLASSES) {
        return Err(Error::Format(format!("label {bad} outside [0, {NUM_CLASSES})")));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair (plain or gzip). Every row lands in the
/// training split; see [`super::split`] for the official partition.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read_maybe_gz(images)?)?;
    let y = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if x.nrows() != y.len() {
        return Err(Error::Format(format!("{} images but {} labels", x.nrows(), y.len())));
    }
    let splits = Splits {
        train: (0..y.len()).collect(),
        ..Splits::default()
    };
    Dataset::new(x, y, NUM_CLASSES, (0.0, 1.0), splits, images.display().to_string())
}

/// Serialises `n` images of `rows×cols` bytes in IDX layout.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len() * rows * cols);
    for v in [IMAGES_MAGIC, pixels.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for p in pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let img0: Vec<u8> = vec![0, 255, 51, 102];
        let img1: Vec<u8> = vec![255, 0, 204, 1];
        (encode_idx_images(2, 2, &[img0, img1]), encode_idx_labels(&[3, 9]))
    }

    #[test]
    fn two_image_fixture_round_trips() {
        let (imgs, labs) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labs.gz");
        fs::write(&ip, &imgs).unwrap();
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&labs).unwrap();
        fs::write(&lp, enc.finish().unwrap()).unwrap();

        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.inputs.dim(), (2, 4));
        assert_eq!(ds.labels, vec![3, 9]);
        let expected = [0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.8, 1.0 / 255.0];
        for (got, want) in ds.inputs.iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn corrupted_magic_is_named() {
        let (mut imgs, _) = fixture();
        imgs[3] = 0x04;
        let err = parse_idx_images(&imgs).unwrap_err().to_string();
        assert!(err.contains("0x00000804"), "{err}");
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let (imgs, labs) = fixture();
        assert!(parse_idx_images(&imgs[..imgs.len() - 1]).is_err());
        assert!(parse_idx_labels(&labs[..6]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labs");
        fs::write(&ip, &imgs).unwrap();
        fs::write(&lp, encode_idx_labels(&[1, 2, 3])).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(parse_idx_labels(&encode_idx_labels(&[1, 10])).is_err());
    }
}

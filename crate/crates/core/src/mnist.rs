//! Labelled datasets and the MNIST IDX reader.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Debug, PartialEq)]
enum Features {
    /// 8-bit pixels, scaled by 1/255 on access.
    Pixels(Vec<u8>),
    Real(Vec<f64>),
}

/// Fixed-width feature vectors with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Features,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn from_pixels(dim: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 || pixels.len() != dim * labels.len() {
            return Err(Error::domain(format!(
                "{} pixels do not form {} samples of width {dim}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dim,
            features: Features::Pixels(pixels),
            labels,
        })
    }

    pub fn from_real(dim: usize, features: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::domain(format!(
                "{} values do not form {} samples of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dim,
            features: Features::Real(features),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    /// Write sample `i` into `out` (resized to `dim`).
    pub fn input_into(&self, i: usize, out: &mut Vec<f64>) {
        out.clear();
        let range = i * self.dim..(i + 1) * self.dim;
        match &self.features {
            Features::Pixels(p) => out.extend(p[range].iter().map(|&b| f64::from(b) / 255.0)),
            Features::Real(v) => out.extend_from_slice(&v[range]),
        }
    }

    pub fn input(&self, i: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim);
        self.input_into(i, &mut v);
        v
    }

    /// The first `n` samples (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let features = match &self.features {
            Features::Pixels(p) => Features::Pixels(p[..n * self.dim].to_vec()),
            Features::Real(v) => Features::Real(v[..n * self.dim].to_vec()),
        };
        Self {
            dim: self.dim,
            features,
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parse an IDX3 image file body into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::format("image file shorter than its header"))?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(format!(
            "image file magic: expected 0x{IMAGES_MAGIC:08x}, got 0x{magic:08x}"
        )));
    }
    let (count, rows, cols) = match (be_u32(bytes, 4), be_u32(bytes, 8), be_u32(bytes, 12)) {
        (Some(n), Some(r), Some(c)) => (n as usize, r as usize, c as usize),
        _ => return Err(Error::format("image file shorter than its header")),
    };
    let expected = count * rows * cols;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(Error::format(format!(
            "image file holds {} pixel bytes, header promises {count}x{rows}x{cols} = {expected}",
            body.len()
        )));
    }
    Ok((count, rows, cols, body.to_vec()))
}

/// Parse an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::format("label file shorter than its header"))?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(format!(
            "label file magic: expected 0x{LABELS_MAGIC:08x}, got 0x{magic:08x}"
        )));
    }
    let count = be_u32(bytes, 4).ok_or_else(|| Error::format("label file shorter than its header"))? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::format(format!(
            "label file holds {} labels, header promises {count}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Load an MNIST image/label pair, flattening each image row-major and
/// scaling pixels to `[0, 1]`.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (count, rows, cols, pixels) = parse_idx_images(&images)?;
    let labels = parse_idx_labels(&labels)?;
    if labels.len() != count {
        return Err(Error::format(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    Dataset::from_pixels(rows * cols, pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn pixel_scaling_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_images(2, 1, 2, &[0, 255, 51, 0])).unwrap();
        fs::write(&lbl, idx_labels(&[3, 7])).unwrap();
        let ds = load_mnist(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.input(0), vec![0.0, 1.0]);
        assert_eq!(ds.input(1), vec![0.2, 0.0]);
        assert_eq!(ds.labels(), &[3, 7]);
    }

    #[test]
    fn wrong_magic_reports_both_values() {
        let mut bytes = idx_images(1, 1, 1, &[0]);
        bytes[3] = 0x01;
        let err = parse_idx_images(&bytes).unwrap_err().to_string();
        assert!(err.contains("0x00000803") && err.contains("0x00000801"), "{err}");
        let err = parse_idx_labels(&idx_images(1, 1, 1, &[0])).unwrap_err().to_string();
        assert!(err.contains("expected 0x00000801"), "{err}");
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let bytes = idx_images(3, 2, 2, &[1; 11]);
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&bytes[..10]), Err(Error::Format(_))));
        let mut labels = idx_labels(&[1, 2, 3]);
        labels.pop();
        assert!(matches!(parse_idx_labels(&labels), Err(Error::Format(_))));

        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_images(2, 1, 1, &[0, 0])).unwrap();
        fs::write(&lbl, idx_labels(&[1, 2, 3])).unwrap();
        assert!(matches!(load_mnist(&img, &lbl), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_dataset() {
        let ds = Dataset::from_real(2, vec![1.0, 2.0, 3.0, 4.0], vec![0, 1]).unwrap();
        let t = ds.truncated(1);
        assert_eq!(t.len(), 1);
        assert_eq!(t.input(0), vec![1.0, 2.0]);
        assert_eq!(ds.truncated(10), ds);
        assert!(Dataset::from_real(2, vec![1.0], vec![0]).is_err());
    }
}

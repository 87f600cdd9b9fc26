//! IDX parsing, splits, and a synthetic Gaussian-blob generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Full,
}

/// Images of shape [n, c, h, w] and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 || images.batch() != labels.len() {
            return Err(contract(format!("images {:?} do not match {} labels", images.shape(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(contract(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Self { images, labels, n_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape, e.g. [1, 28, 28].
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers `indices` into a batch tensor and label vector.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        (Tensor::new(shape, data).expect("batch shape"), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset { images, labels, n_classes: self.n_classes, split }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Per-pixel mean and standard deviation over the whole set.
    pub fn pixel_stats(&self) -> (f64, f64) {
        let d = self.images.data();
        let n = d.len().max(1) as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// x ← (x − mean)/std.
    pub fn standardize(&mut self, mean: f64, std: f64) {
        let s = if std > 0.0 { std } else { 1.0 };
        self.images.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / s);
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

fn read_u32(buf: &[u8], offset: usize, what: &str) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(offset, format!("truncated {what}")))
}

/// Parses an IDX image file into raw bytes and its (n, rows, cols) header.
pub fn parse_idx_images(buf: &[u8]) -> Result<(Vec<u8>, [usize; 3])> {
    let magic = read_u32(buf, 0, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(parse_err(0, format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        *d = read_u32(buf, 4 + 4 * k, "dimension")? as usize;
    }
    let size = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&s| s <= isize::MAX as usize)
        .ok_or_else(|| parse_err(4, "declared dimensions overflow"))?;
    let body = &buf[16.min(buf.len())..];
    if body.len() < size {
        return Err(parse_err(16 + body.len(), format!("truncated pixel data: {} of {size} bytes", body.len())));
    }
    if body.len() > size {
        return Err(parse_err(16 + size, "trailing bytes after pixel data"));
    }
    Ok((body.to_vec(), dims))
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(buf, 0, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(parse_err(0, format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = read_u32(buf, 4, "label count")? as usize;
    let body = &buf[8.min(buf.len())..];
    if body.len() < n {
        return Err(parse_err(8 + body.len(), format!("truncated labels: {} of {n} bytes", body.len())));
    }
    if body.len() > n {
        return Err(parse_err(8 + n, "trailing bytes after labels"));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(pixels: &[u8], dims: [usize; 3]) -> Vec<u8> {
    let mut out = IMAGE_MAGIC.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABEL_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a [0,1]-scaled dataset from IDX bytes (10 classes).
pub fn dataset_from_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let (pixels, [n, h, w]) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(contract(format!("{n} images but {} labels", labels.len())));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let n_classes = 10.max(labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, n_classes, split)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))));
    dataset_from_idx(&read(images_path)?, &read(labels_path)?, Split::Full)
}

/// Re-encodes a [0,1]-scaled dataset as IDX image and label bytes.
pub fn dataset_to_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = ds.images.shape();
    if s[1] != 1 {
        return Err(contract("IDX images are single-channel"));
    }
    let pixels = ds.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect::<Vec<_>>();
    let labels = ds.labels.iter().map(|&l| l as u8).collect::<Vec<_>>();
    Ok((encode_idx_images(&pixels, [s[0], s[2], s[3]]), encode_idx_labels(&labels)))
}

/// Loads `{dir}/train-*` and `{dir}/t10k-*` as (train, test).
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let mut test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    train.split = Split::Train;
    test.split = Split::Test;
    Ok((train, test))
}

/// Seeded disjoint split; the first round(train_fraction·n) shuffled indices
/// go to the training part.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(contract(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_fraction * ds.len() as f64).round() as usize;
    let (a, b) = idx.split_at(cut);
    Ok((ds.subset(a, Split::Train), ds.subset(b, Split::Validation)))
}

/// Gaussian class clusters with unit per-coordinate noise; class k is
/// centred at (separation/√2)·e_k so every pair of centres is `separation`
/// apart. Labels cycle through the classes. Shape [n, 1, 1, dim].
pub fn synth_blobs(n: usize, n_classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_classes < 2 || dim < n_classes || !(separation >= 0.0) {
        return Err(contract(format!("synth_blobs needs n_classes >= 2, dim >= n_classes, separation >= 0 (got {n_classes}, {dim}, {separation})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = separation / std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % n_classes;
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(noise + if j == k { r } else { 0.0 });
        }
        labels.push(k);
    }
    Dataset::new(Tensor::new(vec![n, 1, 1, dim], data)?, labels, n_classes, Split::Full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_file() {
        let mut px = vec![0u8; 4];
        px[0] = 255;
        let ds = dataset_from_idx(&encode_idx_images(&px, [1, 2, 2]), &encode_idx_labels(&[3]), Split::Full).unwrap();
        assert_eq!(ds.images.shape(), &[1, 1, 2, 2]);
        assert_eq!(ds.images.data()[0], 1.0);
        assert_eq!(ds.labels, vec![3]);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let good = encode_idx_images(&[1, 2, 3, 4], [1, 2, 2]);
        let mut bad = good.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx_images(&good[..18]), Err(Error::Parse { offset: 18, .. })));
        assert!(matches!(parse_idx_images(&good[..6]), Err(Error::Parse { offset: 4, .. })));
        let mut huge = good.clone();
        huge[4..16].copy_from_slice(&[0xff; 12]);
        assert!(matches!(parse_idx_images(&huge), Err(Error::Parse { .. })));
        assert!(matches!(parse_idx_labels(&good), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx_labels(&encode_idx_labels(&[1, 2])[..9]), Err(Error::Parse { offset: 9, .. })));
        assert!(dataset_from_idx(&good, &encode_idx_labels(&[1, 2]), Split::Full).is_err());
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let ds = synth_blobs(101, 3, 4, 1.0, 0).unwrap();
        let (a, b) = split(&ds, 0.8, 9).unwrap();
        assert_eq!(a.len() + b.len(), 101);
        assert_eq!(a.len(), 81);
        let (a2, _) = split(&ds, 0.8, 9).unwrap();
        assert_eq!(a, a2);
        let (a3, _) = split(&ds, 0.8, 10).unwrap();
        assert_ne!(a.labels.iter().zip(&a3.labels).filter(|(x, y)| x != y).count(), 0);
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synth_blobs(300, 3, 5, 4.0, 1).unwrap();
        assert_eq!(a, synth_blobs(300, 3, 5, 4.0, 1).unwrap());
        assert_eq!(a.class_counts(), vec![100, 100, 100]);
        assert!(synth_blobs(10, 4, 3, 1.0, 0).is_err());
    }
}

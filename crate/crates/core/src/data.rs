//! Datasets: MNIST IDX parsing, seeded synthetic blobs, normalization, and
//! victim sampling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Environment variable naming the directory that holds the MNIST IDX files.
pub const DATA_ENV: &str = "GRADLEAK_DATA";

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `(N, C, H, W)` with pixels in [0, 1], and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    shape: [usize; 3],
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if images.len() != labels.len() * numel {
            return Err(Error::shape(
                "dataset",
                format!("{} pixels for {} images of {:?}", images.len(), labels.len(), shape),
            ));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {y} >= {num_classes} classes")));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            shape,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_numel();
        &self.images[i * n..(i + 1) * n]
    }

    /// Images at `indices`, concatenated, with their labels.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.image_numel());
        for &i in indices {
            x.extend_from_slice(self.image(i));
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// A new dataset holding the images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.gather(indices);
        Self {
            images,
            labels,
            shape: self.shape,
            num_classes: self.num_classes,
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Idx {
            path: path.to_path_buf(),
            reason: "truncated header".into(),
        })
}

fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let idx_err = |reason: String| Error::Idx {
        path: path.to_path_buf(),
        reason,
    };
    let found = read_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(idx_err(format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let mut shape = Vec::with_capacity(dims);
    for d in 0..dims {
        shape.push(read_u32(&bytes, 4 + 4 * d, path)? as usize);
    }
    let start = 4 + 4 * dims;
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| idx_err("dimensions overflow".into()))?;
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(idx_err(format!("payload has {} bytes, header promises {expected}", payload.len())));
    }
    Ok((shape, payload.to_vec()))
}

/// Parses an IDX image file (`0x00000803`, N x rows x cols) and its label file
/// (`0x00000801`). Pixels are scaled by 1/255; the class count is the largest
/// label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (ishape, pixels) = read_idx(images_path, IMAGES_MAGIC, 3)?;
    let (lshape, labels) = read_idx(labels_path, LABELS_MAGIC, 1)?;
    if ishape[0] != lshape[0] {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            reason: format!("{} labels for {} images", lshape[0], ishape[0]),
        });
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let images = pixels.into_iter().map(|b| f64::from(b) / 255.0).collect();
    Dataset::new(images, labels, [1, ishape[1], ishape[2]], num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Directory from `GRADLEAK_DATA`, falling back to `data/mnist`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data/mnist"), PathBuf::from)
}

/// MNIST split with the canonical file names from `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Class-conditioned single-channel images: a Gaussian blob at a per-class
/// position plus pixel noise, clipped to [0, 1]. Deterministic in `seed`.
pub fn synthetic(num_classes: usize, n: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidArgument("synthetic data needs classes and a nonempty image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let sigma = (height.min(width) as f64 / 6.0).max(0.5);
    let centers: Vec<(f64, f64)> = (0..num_classes)
        .map(|k| {
            let angle = std::f64::consts::TAU * k as f64 / num_classes as f64;
            let r = 0.3 * height.min(width) as f64;
            (
                (height as f64 - 1.0) / 2.0 + r * angle.sin(),
                (width as f64 - 1.0) / 2.0 + r * angle.cos(),
            )
        })
        .collect();
    let mut images = Vec::with_capacity(n * height * width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % num_classes;
        let (cy, cx) = centers[y];
        let (jy, jx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        for r in 0..height {
            for c in 0..width {
                let d2 = (r as f64 - cy - jy).powi(2) + (c as f64 - cx - jx).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                images.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(y);
    }
    Dataset::new(images, labels, [1, height, width], num_classes)
}

/// Per-channel affine normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    mean: Vec<f64>,
    std: Vec<f64>,
    channel_size: usize,
}

impl Normalization {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, channel_size: usize) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() || channel_size == 0 {
            return Err(Error::InvalidArgument("one mean and std per channel required".into()));
        }
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("normalization std must be positive".into()));
        }
        Ok(Self { mean, std, channel_size })
    }

    /// Mean and (population) standard deviation of every channel over `ds`.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let [c, h, w] = ds.shape();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in ds.images().chunks(c * plane) {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (ds.len() * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt()
            })
            .collect();
        Self::new(mean, std, plane)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    fn channel(&self, i: usize) -> usize {
        (i / self.channel_size) % self.mean.len()
    }

    /// `(x - mean) / std` per channel of a `(B, C, H, W)` batch.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let c = self.channel(i);
                (v - self.mean[c]) / self.std[c]
            })
            .collect()
    }

    /// Inverse of [`normalize`](Self::normalize), clamped to [0, 1].
    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let c = self.channel(i);
                (v * self.std[c] + self.mean[c]).clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// Indices of one victim batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VictimBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// `count` disjoint batches of size `batch`, seeded. With `distinct_labels` no
/// batch repeats a class.
pub fn sample_victims(
    ds: &Dataset,
    count: usize,
    batch: usize,
    distinct_labels: bool,
    seed: u64,
) -> Result<Vec<VictimBatch>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if distinct_labels && batch > ds.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "{batch} distinct labels requested from {} classes",
            ds.num_classes()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut used = vec![false; ds.len()];
    let mut out = Vec::with_capacity(count);
    let mut cursor = 0;
    for _ in 0..count {
        let mut indices = Vec::with_capacity(batch);
        let mut labels = Vec::with_capacity(batch);
        for &i in &order[cursor..] {
            if indices.len() == batch {
                break;
            }
            let y = ds.labels()[i];
            if used[i] || (distinct_labels && labels.contains(&y)) {
                continue;
            }
            used[i] = true;
            indices.push(i);
            labels.push(y);
        }
        if indices.len() < batch {
            return Err(Error::InvalidArgument(format!(
                "dataset of {} images cannot supply {count} batches of {batch}",
                ds.len()
            )));
        }
        while cursor < order.len() && used[order[cursor]] {
            cursor += 1;
        }
        out.push(VictimBatch { indices, labels });
    }
    Ok(out)
}

/// `index,label` per victim image, batches in order.
pub fn write_victim_manifest(path: &Path, batches: &[VictimBatch]) -> Result<()> {
    let mut out = String::from("index,label\n");
    for b in batches {
        for (i, y) in b.indices.iter().zip(&b.labels) {
            let _ = writeln!(out, "{i},{y}");
        }
    }
    crate::experiment::write_atomic(path, out.as_bytes())
}

//! MNIST-style IDX ingestion and input scaling.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Conventional file stem: `train` or `t10k`.
    pub fn stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Flattened images with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pixels: Vec<T>,
    dim: usize,
    labels: Vec<u8>,
    pub split: Split,
}

impl<T: Real> Dataset<T> {
    pub fn new(pixels: Vec<T>, dim: usize, labels: Vec<u8>, split: Split) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("sample dimension must be >= 1".into()));
        }
        crate::error::ensure_len("dataset pixels", labels.len() * dim, pixels.len())?;
        if let Some(i) = pixels.iter().position(|x| !x.is_finite() || *x < T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "pixel {i} is negative or non-finite"
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: NUM_CLASSES,
            });
        }
        Ok(Self {
            pixels,
            dim,
            labels,
            split,
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

    pub fn image(&self, i: usize) -> &[T] {
        &self.pixels[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn mean(&self) -> T {
        let n = T::from_usize(self.pixels.len().max(1)).unwrap();
        self.pixels.iter().copied().sum::<T>() / n
    }

    pub fn second_moment(&self) -> T {
        let n = T::from_usize(self.pixels.len().max(1)).unwrap();
        self.pixels.iter().map(|&x| x * x).sum::<T>() / n
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * self.dim].to_vec(),
            dim: self.dim,
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    pub fn scaled_by(&self, factor: T) -> Self {
        Self {
            pixels: self.pixels.iter().map(|&x| x * factor).collect(),
            ..self.clone()
        }
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Idx {
            path: self.path.to_path_buf(),
            message: message.into(),
            offset: self.pos as u64,
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.err("truncated header"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn payload(&mut self, expected: usize) -> Result<&[u8]> {
        let actual = self.bytes.len() - self.pos;
        if actual != expected {
            let what = if actual < expected { "truncated" } else { "oversized" };
            return Err(self.err(format!(
                "{what} payload: expected {expected} bytes, found {actual}"
            )));
        }
        Ok(&self.bytes[self.pos..])
    }
}

/// Parses an IDX image file, returning `(count, rows·cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut c = Cursor { path, bytes, pos: 0 };
    let magic = c.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        c.pos = 0;
        return Err(c.err(format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = c.u32_be()? as usize;
    let rows = c.u32_be()? as usize;
    let cols = c.u32_be()? as usize;
    let payload = c.payload(count * rows * cols)?;
    Ok((count, rows * cols, payload.to_vec()))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor { path, bytes, pos: 0 };
    let magic = c.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        c.pos = 0;
        return Err(c.err(format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = c.u32_be()? as usize;
    let payload = c.payload(count)?.to_vec();
    if let Some(i) = payload.iter().position(|&l| l as usize >= NUM_CLASSES) {
        c.pos += i;
        return Err(c.err(format!("label {} out of range", payload[i])));
    }
    Ok(payload)
}

/// Loads an image/label file pair. Pixels stay in `[0, 255]`.
pub fn load_idx<T: Real>(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset<T>> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let (count, dim, pixels) = parse_idx_images(images_path, &image_bytes)?;
    let labels = parse_idx_labels(labels_path, &label_bytes)?;
    if labels.len() != count {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            message: format!("{} labels for {count} images", labels.len()),
            offset: 4,
        });
    }
    Dataset::new(
        pixels.into_iter().map(|p| T::lit(p as f64)).collect(),
        dim,
        labels,
        split,
    )
}

/// Paths of the conventional `{train,t10k}-{images-idx3,labels-idx1}-ubyte` files.
pub fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let stem = split.stem();
    (
        dir.join(format!("{stem}-images-idx3-ubyte")),
        dir.join(format!("{stem}-labels-idx1-ubyte")),
    )
}

pub fn load_split<T: Real>(dir: &Path, split: Split) -> Result<Dataset<T>> {
    let (images, labels) = split_paths(dir, split);
    load_idx(&images, &labels, split)
}

/// Global multiplicative scaling fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct InputScaling<T> {
    pub factor: T,
    pub raw_mean: T,
    pub scaled_mean: T,
    /// Reported for comparison with the target second moment; not enforced.
    pub scaled_second_moment: T,
}

impl<T: Real> InputScaling<T> {
    pub fn fit(train: &Dataset<T>, target_mean: T) -> Result<Self> {
        if !(target_mean > T::zero()) {
            return Err(Error::InvalidParameter("target mean must be > 0".into()));
        }
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let raw_mean = train.mean();
        if !(raw_mean > T::zero()) {
            return Err(Error::InvalidParameter("dataset mean is zero; cannot scale".into()));
        }
        let factor = target_mean / raw_mean;
        Ok(Self {
            factor,
            raw_mean,
            scaled_mean: raw_mean * factor,
            scaled_second_moment: train.second_moment() * factor * factor,
        })
    }

    pub fn apply(&self, ds: &Dataset<T>) -> Dataset<T> {
        ds.scaled_by(self.factor)
    }
}

/// Scales `ds` so its mean equals `target_mean`.
pub fn scale_inputs<T: Real>(ds: &Dataset<T>, target_mean: T) -> Result<Dataset<T>> {
    Ok(InputScaling::fit(ds, target_mean)?.apply(ds))
}

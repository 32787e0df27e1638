//! Dataset ingestion: IDX image/label files and synthetic 2-D generators.

use std::path::Path;

use serde::{Deserialize, Serialize};

use kronflow::snn::Dataset;
use kronflow::{RandomStream, Tensor};

use crate::error::{io_err, Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Idx,
    Blobs,
    Moons,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    /// `(n, features)`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Vec<Split>,
    pub source: DataSource,
}

impl DatasetHandle {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, source: DataSource) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::Invalid(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!("label {bad} outside [0, {classes})")));
        }
        let splits = vec![Split::Train; labels.len()];
        Ok(Self {
            features,
            labels,
            classes,
            splits,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Marks the last `test` examples as held out.
    pub fn with_test_tail(mut self, test: usize) -> Result<Self> {
        let n = self.len();
        if test >= n {
            return Err(Error::Invalid(format!("cannot hold out {test} of {n} examples")));
        }
        for (i, s) in self.splits.iter_mut().enumerate() {
            *s = if i >= n - test { Split::Test } else { Split::Train };
        }
        Ok(self)
    }

    pub fn split(&self, which: Split) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == which).collect();
        let f = self.features.shape()[1];
        let mut x = Vec::with_capacity(idx.len() * f);
        for &i in &idx {
            x.extend_from_slice(&self.features.data()[i * f..(i + 1) * f]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset::classification(
            Tensor::new(vec![idx.len(), f], x)?,
            labels,
            self.classes,
        )?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self.take(4)?;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Idx {
                offset: self.bytes.len(),
                message: format!("truncated: needed {n} bytes at offset {}", self.at),
            })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let m = self.u32()?;
        if m != expected {
            return Err(Error::Idx {
                offset: 0,
                message: format!("bad magic {m:#010x}, expected {expected:#010x}"),
            });
        }
        Ok(())
    }
}

/// Parses an IDX image file into `(rows, cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8], limit: Option<usize>) -> Result<(usize, usize, Tensor)> {
    let mut c = Cursor { bytes, at: 0 };
    c.magic(IDX_IMAGES_MAGIC)?;
    let count = c.u32()? as usize;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let n = limit.map_or(count, |l| l.min(count));
    let pix = c.take(n * rows * cols)?;
    let data = pix.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((rows, cols, Tensor::new(vec![n, rows * cols], data)?))
}

pub fn parse_idx_labels(bytes: &[u8], limit: Option<usize>) -> Result<Vec<usize>> {
    let mut c = Cursor { bytes, at: 0 };
    c.magic(IDX_LABELS_MAGIC)?;
    let count = c.u32()? as usize;
    let n = limit.map_or(count, |l| l.min(count));
    Ok(c.take(n)?.iter().map(|&b| b as usize).collect())
}

/// Loads paired IDX image and label files, keeping at most `subset`
/// examples.
pub fn load_idx(images: &Path, labels: &Path, subset: Option<usize>) -> Result<DatasetHandle> {
    let img = std::fs::read(images).map_err(io_err(images))?;
    let lab = std::fs::read(labels).map_err(io_err(labels))?;
    let header_count = |b: &[u8]| b.get(4..8).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]));
    if let (Some(a), Some(b)) = (header_count(&img), header_count(&lab)) {
        if a != b {
            return Err(Error::Idx {
                offset: 4,
                message: format!("{} images but {} labels", a, b),
            });
        }
    }
    let (_, _, features) = parse_idx_images(&img, subset)?;
    let labels = parse_idx_labels(&lab, subset)?;
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    DatasetHandle::new(features, labels, classes, DataSource::Idx)
}

/// Isotropic Gaussian blobs centred on a radius-3 circle, labels cycling
/// through the classes.
pub fn blobs(n: usize, classes: usize, std: f64, stream: &mut RandomStream) -> Result<DatasetHandle> {
    if classes < 2 {
        return Err(Error::Invalid("need at least two classes".into()));
    }
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let angle = std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * c as f64 / classes as f64;
        x.push(3.0 * angle.cos() + std * stream.standard_normal());
        x.push(3.0 * angle.sin() + std * stream.standard_normal());
        y.push(c);
    }
    DatasetHandle::new(Tensor::new(vec![n, 2], x)?, y, classes, DataSource::Blobs)
}

/// Two interleaved half circles with Gaussian jitter.
pub fn moons(n: usize, noise: f64, stream: &mut RandomStream) -> Result<DatasetHandle> {
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let t = std::f64::consts::PI * stream.uniform();
        let (px, py) = if c == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x.push(px + noise * stream.standard_normal());
        x.push(py + noise * stream.standard_normal());
        y.push(c);
    }
    DatasetHandle::new(Tensor::new(vec![n, 2], x)?, y, 2, DataSource::Moons)
}

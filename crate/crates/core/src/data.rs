//! IDX (MNIST / Fashion-MNIST) loading, subsets and seeded batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

const BATCH_TAG: u64 = 0xBA7C;
const SUBSET_TAG: u64 = 0x5B5E;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Fashion,
}

impl DatasetName {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Fashion => "fashion",
        }
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion" | "fashion-mnist" => Ok(DatasetName::Fashion),
            other => Err(Error::Argument(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Images `[N,1,H,W]` with pixels in `[0,1]` and labels in `0..10`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: DatasetName,
    images: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(name: DatasetName, images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[1] != 1 {
            return Err(Error::shape("dataset images", images.shape(), &[labels.len(), 1]));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::format(
                "count",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::format("pixel", format!("value {bad} outside [0,1]")));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= NUM_CLASSES) {
            return Err(Error::format(
                format!("label[{i}]"),
                format!("class {l} outside 0..{NUM_CLASSES}"),
            ));
        }
        Ok(Dataset { name, images, labels })
    }

    /// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `dir`.
    pub fn load_split(dir: &Path, name: DatasetName, split: Split) -> Result<Self> {
        let p = split.prefix();
        load_idx(
            &dir.join(format!("{p}-images-idx3-ubyte")),
            &dir.join(format!("{p}-labels-idx1-ubyte")),
            name,
        )
    }

    pub fn name(&self) -> DatasetName {
        self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_outer(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// `n` samples chosen by a seeded permutation (the whole set if `n >= len`).
    /// The chosen samples keep their original relative order.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream(seed, &[SUBSET_TAG]));
        idx.truncate(n);
        idx.sort_unstable();
        let (images, labels) = self.batch(&idx)?;
        Ok(Dataset {
            name: self.name,
            images,
            labels,
        })
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Ok(Dataset {
            name: self.name,
            images: self.images.slice_outer(0, n)?,
            labels: self.labels[..n].to_vec(),
        })
    }
}

/// Index batches covering `0..len` in a seeded order. The permutation is a
/// pure function of `(seed, epoch)`; the last batch may be short.
///
/// # Panics
/// If `batch_size == 0`.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, &[BATCH_TAG, epoch]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn read_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, "file truncated inside header"))
}

/// Parses an IDX3 image file into `[N,1,rows,cols]` with pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            "image magic",
            format!("expected {IMAGE_MAGIC}, found {magic}"),
        ));
    }
    let n = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "image rows")? as usize;
    let cols = read_u32(bytes, 12, "image cols")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::format(
            "image payload",
            format!(
                "expected {need} pixel bytes for {n}x{rows}x{cols}, found {}",
                payload.len()
            ),
        ));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            "label magic",
            format!("expected {LABEL_MAGIC}, found {magic}"),
        ));
    }
    let n = read_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            "label payload",
            format!("expected {n} label bytes, found {}", payload.len()),
        ));
    }
    payload
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < NUM_CLASSES {
                Ok(b as usize)
            } else {
                Err(Error::format(
                    format!("label[{i}]"),
                    format!("class {b} outside 0..{NUM_CLASSES}"),
                ))
            }
        })
        .collect()
}

pub fn load_idx(images_path: &Path, labels_path: &Path, name: DatasetName) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    Dataset::new(name, images, labels)
}

/// Serializes raw pixel bytes as an IDX3 image file.
pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

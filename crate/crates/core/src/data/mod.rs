//! CIFAR-10 binary ingestion, normalization and batching.
//!
//! Each batch file holds 10,000 records of 3073 bytes: one label byte
//! followed by 1024 red, 1024 green and 1024 blue pixels, each plane in
//! row-major order. Pixels are scaled to `[0, 1]` and normalized per channel
//! once at load time. No augmentation of any kind is applied.

mod batches;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use batches::{epoch_batches, epoch_order, sequential_batches};

pub const RECORD_BYTES: usize = 3073;
pub const PIXELS: usize = 3072;
pub const PLANE: usize = 1024;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const NUM_CLASSES: usize = 10;

pub const CHANNEL_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CHANNEL_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

pub const TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

/// One raw record exactly as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != RECORD_BYTES {
            return Err(Error::Input(format!("a record is {RECORD_BYTES} bytes, got {}", bytes.len())));
        }
        if bytes[0] as usize >= NUM_CLASSES {
            return Err(Error::Input(format!("label byte {} outside [0, {NUM_CLASSES})", bytes[0])));
        }
        Ok(CifarRecord { label: bytes[0], pixels: bytes[1..].to_vec() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_BYTES);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Normalized CHW image; a pure function of the record bytes.
    pub fn normalized<T: Scalar>(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(PIXELS);
        for (c, plane) in self.pixels.chunks_exact(PLANE).enumerate() {
            out.extend(plane.iter().map(|&p| T::of(normalize_pixel(p, c))));
        }
        out
    }
}

pub fn normalize_pixel(raw: u8, channel: usize) -> f64 {
    (raw as f64 / 255.0 - CHANNEL_MEAN[channel]) / CHANNEL_STD[channel]
}

/// Reads one batch file, requiring exactly `expected_records` records.
pub fn read_batch_file(path: &Path, expected_records: usize) -> Result<Vec<CifarRecord>> {
    let expected = expected_records * RECORD_BYTES;
    let bytes = fs::read(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        detail: format!("{e} (expected a file of {expected} bytes)"),
    })?;
    if bytes.len() != expected {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            detail: format!("found {} bytes, expected {expected} ({expected_records} records × {RECORD_BYTES})", bytes.len()),
        });
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .map(|r| CifarRecord::parse(r).map_err(|e| Error::Ingestion { path: path.to_path_buf(), detail: e.to_string() }))
        .collect()
}

pub fn write_batch_file(path: &Path, records: &[CifarRecord]) -> Result<()> {
    let mut bytes = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        bytes.extend_from_slice(&r.to_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Normalized images and labels of one split.
#[derive(Debug, Clone)]
pub struct Cifar10Set<T> {
    pub split: Split,
    images: Vec<T>,
    labels: Vec<u8>,
}

impl<T: Scalar> Cifar10Set<T> {
    pub fn from_records(split: Split, records: &[CifarRecord]) -> Self {
        let mut images = Vec::with_capacity(records.len() * PIXELS);
        for r in records {
            images.extend(r.normalized::<T>());
        }
        Cifar10Set { split, images, labels: records.iter().map(|r| r.label).collect() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[T] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    /// First `n` items (all of them if `n` exceeds the size).
    pub fn subset(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.images.truncate(n * PIXELS);
        self.labels.truncate(n);
        self
    }

    /// Stacks the given items into an `[N, 3, 32, 32]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (Tensor::new(&[indices.len(), 3, 32, 32], data).expect("sized batch"), labels)
    }

    /// Per-channel mean and standard deviation over the whole split.
    pub fn channel_stats(&self) -> [(f64, f64); 3] {
        let mut out = [(0.0, 0.0); 3];
        for (c, slot) in out.iter_mut().enumerate() {
            let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
            for img in self.images.chunks_exact(PIXELS) {
                for &v in &img[c * PLANE..(c + 1) * PLANE] {
                    let v = v.as_f64();
                    sum += v;
                    sq += v * v;
                    n += 1;
                }
            }
            let mean = sum / n.max(1) as f64;
            *slot = (mean, (sq / n.max(1) as f64 - mean * mean).max(0.0).sqrt());
        }
        out
    }
}

/// Paths of the six standard batch files under `dir`.
pub fn cifar_files(dir: &Path) -> Vec<PathBuf> {
    TRAIN_FILES.iter().chain(std::iter::once(&TEST_FILE)).map(|f| dir.join(f)).collect()
}

/// Loads the official train (50,000) and test (10,000) splits.
pub fn load_cifar10<T: Scalar>(dir: &Path) -> Result<(Cifar10Set<T>, Cifar10Set<T>)> {
    let mut train = Vec::with_capacity(5 * RECORDS_PER_FILE);
    for f in TRAIN_FILES {
        train.extend(read_batch_file(&dir.join(f), RECORDS_PER_FILE)?);
    }
    let test = read_batch_file(&dir.join(TEST_FILE), RECORDS_PER_FILE)?;
    Ok((Cifar10Set::from_records(Split::Train, &train), Cifar10Set::from_records(Split::Test, &test)))
}

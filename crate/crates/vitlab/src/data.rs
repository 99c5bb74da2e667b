//! Dataset readers (IDX, CIFAR-10 binary), a synthetic blob generator for
//! fast end-to-end tests, and the deterministic batching pipeline.

use std::path::Path;

use crate::rng::SplitMix64;
use crate::tensor::{DType, Tensor};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated, need {needed} more bytes")]
    Truncated { path: String, needed: usize },
    #[error("{path}: dimensions overflow")]
    Overflow { path: String },
    #[error("{path}: {len} bytes is not a whole number of 3073-byte records")]
    BadRecordSize { path: String, len: usize },
    #[error("label {label} outside [0, {class_count})")]
    BadLabel { label: usize, class_count: usize },
    #[error("image and label counts differ: {images} vs {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("pixel value {value} outside [0, 1]; value_range applied twice?")]
    OutOfRange { value: f64 },
    #[error("batch size must be at least 1")]
    EmptyBatch,
}

/// Images in `[n, H, W, C]` with values in [0,1] (or [-1,1] after
/// [`value_range`]) plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (H, W, C) of a single example.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }
}

/// Read an IDX image file and its companion label file (the MNIST
/// on-disk format): big-endian magic, big-endian dimension sizes, then
/// raw bytes. Pixels map to [0,1] by /255.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let (dims, pixels) = read_idx_file(images_path, IDX_IMAGES_MAGIC, 3)?;
    let (label_dims, label_bytes) = read_idx_file(labels_path, IDX_LABELS_MAGIC, 1)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if label_dims[0] != n {
        return Err(DataError::CountMismatch { images: n, labels: label_dims[0] });
    }
    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = 10;
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(DataError::BadLabel { label: bad, class_count });
    }
    Ok(Dataset {
        images: Tensor::from_vec(vec![n, h, w, 1], data, DType::F64),
        labels,
        class_count,
    })
}

fn read_idx_file(path: &Path, magic: u32, ndims: usize) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path)?;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(DataError::Truncated { path: name, needed: header - bytes.len() });
    }
    let found = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if found != magic {
        return Err(DataError::BadMagic { path: name, found, expected: magic });
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let off = 4 + 4 * i;
        dims.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(DataError::Overflow { path: name.clone() })?;
    let payload = &bytes[header..];
    if payload.len() < numel {
        return Err(DataError::Truncated { path: name, needed: numel - payload.len() });
    }
    Ok((dims, payload[..numel].to_vec()))
}

/// Read CIFAR-10 binary batch files: 3073-byte records, one label byte
/// then 3072 channel-planar pixels (1024 R, 1024 G, 1024 B), converted
/// here to interleaved H,W,C.
pub fn read_cifar10_bin(paths: &[impl AsRef<Path>]) -> Result<Dataset, DataError> {
    const REC: usize = 3073;
    const SIDE: usize = 32;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let name = path.as_ref().display().to_string();
        let bytes = std::fs::read(path.as_ref())?;
        if bytes.is_empty() || bytes.len() % REC != 0 {
            return Err(DataError::BadRecordSize { path: name, len: bytes.len() });
        }
        for record in bytes.chunks(REC) {
            let label = record[0] as usize;
            if label >= 10 {
                return Err(DataError::BadLabel { label, class_count: 10 });
            }
            labels.push(label);
            let planes = &record[1..];
            for row in 0..SIDE {
                for col in 0..SIDE {
                    for ch in 0..3 {
                        let v = planes[ch * SIDE * SIDE + row * SIDE + col];
                        data.push(v as f64 / 255.0);
                    }
                }
            }
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(vec![n, SIDE, SIDE, 3], data, DType::F64),
        labels,
        class_count: 10,
    })
}

/// Map pixel values from [0,1] to [-1,1] via x -> 2x - 1. Rejects inputs
/// outside [0,1] so a double application cannot slip through.
pub fn value_range(d: Dataset) -> Result<Dataset, DataError> {
    if let Some(&bad) = d.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DataError::OutOfRange { value: bad });
    }
    let mapped: Vec<f64> = d.images.data().iter().map(|&v| 2.0 * v - 1.0).collect();
    Ok(Dataset {
        images: Tensor::from_vec(d.images.shape().to_vec(), mapped, d.images.dtype()),
        ..d
    })
}

/// Class-conditional Gaussian blobs: class c has mean pixel
/// 0.2 + 0.6*c/(K-1) plus a class-specific cosine ripple across the
/// image, with noise sigma 0.05, clamped to [0,1]. Labels run
/// round-robin so classes stay balanced. Linearly separable in the mean
/// pixel; the ripple carries the label through stems that standardize
/// each patch (which would otherwise erase a pure mean shift).
pub fn synthetic_dataset(
    class_count: usize,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
) -> Dataset {
    assert!(class_count >= 2 && n >= 1);
    let mut rng = SplitMix64::new_stream(seed, 0x5b0b5);
    let px = h * w * c;
    let mut data = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % class_count;
        labels.push(label);
        let mean = 0.2 + 0.6 * label as f64 / (class_count - 1) as f64;
        let freq = (label + 1) as f64;
        for p in 0..px {
            let t = p as f64 / px as f64;
            let ripple = 0.1 * (2.0 * std::f64::consts::PI * freq * t).cos();
            let v = mean + ripple + 0.05 * rng.next_normal();
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset {
        images: Tensor::from_vec(vec![n, h, w, c], data, DType::F64),
        labels,
        class_count,
    }
}

/// Seeded shuffling schedule: each epoch's permutation comes from its own
/// SplitMix64 stream keyed by (seed, epoch), so any epoch is reproducible
/// without replaying earlier ones.
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn new(seed: u64, batch_size: usize) -> Result<BatchPlan, DataError> {
        if batch_size == 0 {
            return Err(DataError::EmptyBatch);
        }
        Ok(BatchPlan { seed, batch_size })
    }

    pub fn permutation(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut rng = SplitMix64::new_stream(self.seed, epoch.wrapping_add(0xe90c4));
        rng.permutation(n)
    }
}

/// One minibatch: images `[b, H, W, C]` and one-hot targets
/// `[b, class_count]`.
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
    pub labels: Vec<usize>,
}

/// All batches of one epoch in delivery order; the final short batch is
/// retained.
pub fn batches(d: &Dataset, plan: &BatchPlan, epoch: u64, dtype: DType) -> Vec<Batch> {
    let perm = plan.permutation(epoch, d.len());
    let (h, w, c) = d.image_dims();
    let px = h * w * c;
    perm.chunks(plan.batch_size)
        .map(|idx| {
            let mut images = Vec::with_capacity(idx.len() * px);
            let mut targets = vec![0.0; idx.len() * d.class_count];
            let mut labels = Vec::with_capacity(idx.len());
            for (row, &i) in idx.iter().enumerate() {
                images.extend_from_slice(&d.images.data()[i * px..(i + 1) * px]);
                targets[row * d.class_count + d.labels[i]] = 1.0;
                labels.push(d.labels[i]);
            }
            Batch {
                images: Tensor::from_vec(vec![idx.len(), h, w, c], images, dtype),
                targets: Tensor::from_vec(vec![idx.len(), d.class_count], targets, dtype),
                labels,
            }
        })
        .collect()
}

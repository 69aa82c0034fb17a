//! Dataset loading: IDX-format MNIST (primary), CIFAR10 binary batches
//! (loader-only), and deterministic stratified subsetting. Loading is pure:
//! the same bytes always produce the same tensors. No network access; paths
//! come from the caller.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::train::LabeledDataset;
use crate::{Error, Result, Tensor};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD_LEN: usize = 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct RawDataset {
    /// [count, channels, height, width], pixels in [0,1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    /// SHA-256 over the source file bytes, hex-encoded.
    pub checksum: String,
    pub class_count: usize,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.images.len() / self.len().max(1)
    }

    /// Per-sample tensors reshaped to `input_shape`.
    pub fn samples(&self, input_shape: &[usize]) -> Result<Vec<Tensor>> {
        let m = self.sample_len();
        let want: usize = input_shape.iter().product();
        if want != m {
            return Err(Error::shape(
                "samples",
                format!("{m} features"),
                format!("{input_shape:?} ({want})"),
            ));
        }
        (0..self.len())
            .map(|i| {
                Tensor::new(
                    input_shape.to_vec(),
                    self.images.data()[i * m..(i + 1) * m].to_vec(),
                )
            })
            .collect()
    }

    /// Hard-labeled dataset with samples reshaped to `input_shape`.
    pub fn labeled(&self, input_shape: &[usize]) -> Result<LabeledDataset> {
        LabeledDataset::from_hard_labels(
            self.samples(input_shape)?,
            &self.labels,
            self.class_count,
        )
    }
}

fn read_u32_at(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed: offset + 4,
            available: bytes.len(),
        });
    }
    Ok(BigEndian::read_u32(&bytes[offset..offset + 4]))
}

fn checksum(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses the IDX image/label pair: big-endian magic, big-endian dimension
/// counts, then raw bytes. Pixels are divided by 255.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let magic = read_u32_at(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let count = read_u32_at(&img_bytes, 4, images_path)? as usize;
    let rows = read_u32_at(&img_bytes, 8, images_path)? as usize;
    let cols = read_u32_at(&img_bytes, 12, images_path)? as usize;
    let pixel_bytes = count * rows * cols;
    if img_bytes.len() < 16 + pixel_bytes {
        return Err(Error::Truncated {
            path: images_path.display().to_string(),
            needed: 16 + pixel_bytes,
            available: img_bytes.len(),
        });
    }

    let magic = read_u32_at(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let label_count = read_u32_at(&lbl_bytes, 4, labels_path)? as usize;
    if lbl_bytes.len() < 8 + label_count {
        return Err(Error::Truncated {
            path: labels_path.display().to_string(),
            needed: 8 + label_count,
            available: lbl_bytes.len(),
        });
    }
    if count != label_count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let pixels: Vec<f32> = img_bytes[16..16 + pixel_bytes]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + label_count]
        .iter()
        .map(|&b| b as usize)
        .collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for 10 classes"
        )));
    }
    let split = if images_path
        .file_name()
        .map(|n| n.to_string_lossy().starts_with("train"))
        .unwrap_or(false)
    {
        Split::Train
    } else {
        Split::Test
    };
    Ok(RawDataset {
        images: Tensor::new(vec![count, 1, rows, cols], pixels)?,
        labels,
        split,
        checksum: checksum(&[&img_bytes, &lbl_bytes]),
        class_count: 10,
    })
}

/// Parses a CIFAR10 binary batch: per record one label byte followed by 3072
/// pixel bytes in R,G,B plane order. Pixels scaled to [0,1].
pub fn load_cifar10_binary(path: &Path) -> Result<RawDataset> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed: (bytes.len() / CIFAR_RECORD_LEN + 1) * CIFAR_RECORD_LEN,
            available: bytes.len(),
        });
    }
    let count = bytes.len() / CIFAR_RECORD_LEN;
    let mut pixels = Vec::with_capacity(count * 3072);
    let mut labels = Vec::with_capacity(count);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for 10 classes"
            )));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(RawDataset {
        images: Tensor::new(vec![count, 3, 32, 32], pixels)?,
        labels,
        split: Split::Test,
        checksum: checksum(&[&bytes]),
        class_count: 10,
    })
}

/// Deterministic stratified sample: per-class quotas as equal as possible,
/// filled round-robin from seeded per-class shuffles. Same seed, same subset.
pub fn subset(dataset: &RawDataset, count: usize, seed: u64) -> Result<RawDataset> {
    if count > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "subset of {count} requested from {} samples",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, &l) in dataset.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut chosen = Vec::with_capacity(count);
    let mut cursor = vec![0usize; pools.len()];
    while chosen.len() < count {
        let mut advanced = false;
        for (c, pool) in pools.iter().enumerate() {
            if chosen.len() == count {
                break;
            }
            if cursor[c] < pool.len() {
                chosen.push(pool[cursor[c]]);
                cursor[c] += 1;
                advanced = true;
            }
        }
        debug_assert!(advanced, "count <= len guarantees progress");
        if !advanced {
            break;
        }
    }

    let m = dataset.sample_len();
    let mut pixels = Vec::with_capacity(count * m);
    let mut labels = Vec::with_capacity(count);
    for &i in &chosen {
        pixels.extend_from_slice(&dataset.images.data()[i * m..(i + 1) * m]);
        labels.push(dataset.labels[i]);
    }
    let mut shape = dataset.images.shape().to_vec();
    shape[0] = count;
    Ok(RawDataset {
        images: Tensor::new(shape, pixels)?,
        labels,
        split: dataset.split,
        checksum: dataset.checksum.clone(),
        class_count: dataset.class_count,
    })
}

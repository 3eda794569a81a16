//! Dataset ingestion (MNIST IDX, CIFAR-10 binary, synthetic blobs),
//! light augmentation and batch assembly.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use trilevel_tensor::{Float, Tensor};

use crate::config::DatasetKind;
use crate::error::{CoreError, Result};

/// Seed of the synthetic generator; independent of the run seed so every
/// run sees the same data.
pub const SYNTHETIC_SEED: u64 = 7;
pub const SYNTHETIC_CLASSES: usize = 10;

/// Labeled `u8` images stored channel-major (`[C, S, S]` per example).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    None,
    /// Random crop from a zero-padded image.
    Crop { pad: usize },
    /// Random crop plus horizontal flip with probability 1/2.
    CropFlip { pad: usize },
}

impl Dataset {
    pub fn new(channels: usize, size: usize, classes: usize, pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let per = channels * size * size;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(CoreError::Config(format!(
                "{} pixel bytes do not hold {} images of {channels}x{size}x{size}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(CoreError::Config(format!("label {l} outside {classes} classes")));
        }
        Ok(Self {
            channels,
            size,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.channels * self.size * self.size;
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// First `n` examples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let per = self.channels * self.size * self.size;
        Self {
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// `[B, C, S, S]` normalized to `[-1, 1]`, plus labels. `rng` drives
    /// augmentation and is consumed in `ids` order.
    pub fn batch<F: Float>(
        &self,
        ids: &[usize],
        augment: Augment,
        rng: &mut ChaCha8Rng,
    ) -> (Tensor<F>, Vec<usize>) {
        let (c, s) = (self.channels, self.size);
        let mut out = Vec::with_capacity(ids.len() * c * s * s);
        let norm = |v: u8| F::from_f64((f64::from(v) / 255.0 - 0.5) / 0.5);
        for &id in ids {
            let img = self.image(id);
            let (pad, flip_ok) = match augment {
                Augment::None => (0, false),
                Augment::Crop { pad } => (pad, false),
                Augment::CropFlip { pad } => (pad, true),
            };
            let (dy, dx, flip) = if matches!(augment, Augment::None) {
                (0, 0, false)
            } else {
                let dy = rng.random_range(0..=2 * pad);
                let dx = rng.random_range(0..=2 * pad);
                (dy, dx, flip_ok && rng.random_bool(0.5))
            };
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let sx = if flip { s - 1 - x } else { x };
                        let (yy, xx) = ((y + dy) as isize - pad as isize, (sx + dx) as isize - pad as isize);
                        let v = if yy < 0 || xx < 0 || yy >= s as isize || xx >= s as isize {
                            0
                        } else {
                            img[ch * s * s + yy as usize * s + xx as usize]
                        };
                        out.push(norm(v));
                    }
                }
            }
        }
        let t = Tensor::new(vec![ids.len(), c, s, s], out).expect("batch shape");
        (t, ids.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Default augmentation per dataset kind.
pub fn default_augment(kind: &DatasetKind) -> Augment {
    match kind {
        DatasetKind::Cifar10 => Augment::CropFlip { pad: 4 },
        DatasetKind::Mnist => Augment::Crop { pad: 2 },
        DatasetKind::Synthetic { .. } => Augment::None,
    }
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> CoreError {
    CoreError::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => format_err(path, 0, "file not found"),
        _ => CoreError::Io(e),
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX file: returns the dimensions and the payload.
pub fn parse_idx(path: &Path, bytes: &[u8], expect_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(format_err(path, bytes.len() as u64, "file shorter than the magic number"));
    }
    let magic = be_u32(bytes, 0);
    if magic != expect_magic {
        return Err(format_err(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(path, bytes.len() as u64, "truncated dimension header"));
    }
    let dims: Vec<usize> = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let need = dims.iter().product::<usize>();
    let have = bytes.len() - header;
    if have < need {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("payload has {have} bytes, dimensions {dims:?} need {need}"),
        ));
    }
    if have > need {
        return Err(format_err(path, (header + need) as u64, "trailing bytes after payload"));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Loads one MNIST split from an images/labels IDX pair.
pub fn load_mnist_split(images: &Path, labels: &Path) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(images, &read_file(images)?, 0x0000_0803)?;
    let (ldims, lab) = parse_idx(labels, &read_file(labels)?, 0x0000_0801)?;
    if idims[1] != idims[2] {
        return Err(format_err(images, 8, "images are not square"));
    }
    if idims[0] != ldims[0] {
        return Err(format_err(
            labels,
            4,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    if let Some(p) = lab.iter().position(|&l| l > 9) {
        return Err(format_err(labels, 8 + p as u64, format!("label {} out of range", lab[p])));
    }
    Dataset::new(1, idims[1], 10, pixels, lab.into_iter().map(usize::from).collect())
}

pub const CIFAR_RECORD: usize = 3073;

/// Parses CIFAR-10 binary batches (1 label byte + 3072 pixel bytes each).
pub fn load_cifar_batches(paths: &[PathBuf]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
            return Err(format_err(
                path,
                whole as u64,
                format!("truncated record: {} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(format_err(
                    path,
                    (r * CIFAR_RECORD) as u64,
                    format!("label {} out of range", rec[0]),
                ));
            }
            labels.push(usize::from(rec[0]));
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Dataset::new(3, 32, 10, pixels, labels)
}

fn cifar_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Gaussian-blob images: each class has three blobs at fixed random
/// positions and colors; examples jitter the blob centers and add noise.
pub fn synthetic(
    train: usize,
    test: usize,
    classes: usize,
    channels: usize,
    size: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    struct Blob {
        cy: f64,
        cx: f64,
        sigma: f64,
        color: Vec<f64>,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let protos: Vec<Vec<Blob>> = (0..classes)
        .map(|_| {
            (0..3)
                .map(|_| Blob {
                    cy: rng.random_range(0.15 * s..0.85 * s),
                    cx: rng.random_range(0.15 * s..0.85 * s),
                    sigma: rng.random_range(0.08 * s..0.2 * s),
                    color: (0..channels).map(|_| rng.random_range(0.3..1.0)).collect(),
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 0.12).expect("valid std");
    let make = |n: usize, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut pixels = Vec::with_capacity(n * channels * size * size);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            let shifts: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.random_range(-0.1 * s..0.1 * s), rng.random_range(-0.1 * s..0.1 * s)))
                .collect();
            for ch in 0..channels {
                for y in 0..size {
                    for x in 0..size {
                        let mut v = 0.0;
                        for (b, (sy, sx)) in protos[class].iter().zip(&shifts) {
                            let dy = y as f64 - b.cy - sy;
                            let dx = x as f64 - b.cx - sx;
                            v += b.color[ch] * (-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)).exp();
                        }
                        v += noise.sample(&mut rng);
                        pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
            labels.push(class);
        }
        Dataset::new(channels, size, classes, pixels, labels)
    };
    Ok((make(train, 1)?, make(test, 2)?))
}

/// Loads the train and test splits. Synthetic data takes its geometry from
/// `channels` and `size`.
pub fn load_dataset(
    kind: &DatasetKind,
    data_dir: &Path,
    channels: usize,
    size: usize,
) -> Result<(Dataset, Dataset)> {
    match kind {
        DatasetKind::Mnist => Ok((
            load_mnist_split(
                &data_dir.join("train-images-idx3-ubyte"),
                &data_dir.join("train-labels-idx1-ubyte"),
            )?,
            load_mnist_split(
                &data_dir.join("t10k-images-idx3-ubyte"),
                &data_dir.join("t10k-labels-idx1-ubyte"),
            )?,
        )),
        DatasetKind::Cifar10 => {
            let dir = cifar_dir(data_dir);
            let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            Ok((
                load_cifar_batches(&train)?,
                load_cifar_batches(&[dir.join("test_batch.bin")])?,
            ))
        }
        DatasetKind::Synthetic { train, test } => {
            synthetic(*train, *test, SYNTHETIC_CLASSES, channels, size, SYNTHETIC_SEED)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic(100, 20, 4, 1, 8, 7).unwrap();
        let b = synthetic(100, 20, 4, 1, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 100);
        assert_ne!(a.0.pixels(), synthetic(100, 20, 4, 1, 8, 8).unwrap().0.pixels());
    }

    #[test]
    fn batch_normalization_and_flip() {
        let d = Dataset::new(1, 2, 2, vec![0, 255, 51, 102], vec![1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, y) = d.batch::<f64>(&[0], Augment::None, &mut rng);
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        assert_eq!(t.data()[..2], [-1.0, 1.0]);
        assert_eq!(y, vec![1]);
        for _ in 0..20 {
            let (t, _) = d.batch::<f64>(&[0], Augment::CropFlip { pad: 1 }, &mut rng);
            assert_eq!(t.len(), 4);
            assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(Dataset::new(1, 1, 2, vec![0], vec![2]).is_err());
        assert!(Dataset::new(1, 2, 2, vec![0], vec![0]).is_err());
    }
}

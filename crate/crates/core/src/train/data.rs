//! MNIST (IDX) and CIFAR-10 (binary records) loaders.
//!
//! Images stay as raw bytes; batches are normalized per channel with the
//! constants below when they are assembled.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MNIST_MEAN: [f32; 1] = [0.1307];
pub const MNIST_STD: [f32; 1] = [0.3081];
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mnist" => Some(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Some(DatasetKind::Cifar10),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            DatasetKind::Mnist => 1,
            DatasetKind::Cifar10 => 3,
        }
    }

    pub fn image_size(self) -> usize {
        match self {
            DatasetKind::Mnist => 28,
            DatasetKind::Cifar10 => 32,
        }
    }

    fn normalization(self) -> (&'static [f32], &'static [f32]) {
        match self {
            DatasetKind::Mnist => (&MNIST_MEAN, &MNIST_STD),
            DatasetKind::Cifar10 => (&CIFAR_MEAN, &CIFAR_STD),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    /// `N×C×H×W` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::data(path, e.to_string()))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 || be_u32(bytes, 0) != IDX_IMAGES_MAGIC {
        return Err(Error::data(path, "bad IDX image magic"));
    }
    let (n, r, c) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    if bytes.len() != 16 + n * r * c {
        return Err(Error::data(
            path,
            format!("expected {} pixel bytes, found {}", n * r * c, bytes.len() - 16),
        ));
    }
    Ok((n, r, c, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8], classes: u8) -> Result<Vec<u8>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != IDX_LABELS_MAGIC {
        return Err(Error::data(path, "bad IDX label magic"));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::data(
            path,
            format!("expected {n} labels, found {}", bytes.len() - 8),
        ));
    }
    let labels = bytes[8..].to_vec();
    if let Some(i) = labels.iter().position(|&l| l >= classes) {
        return Err(Error::data(
            path,
            format!("label {} out of range at record {i}", labels[i]),
        ));
    }
    Ok(labels)
}

/// Splits CIFAR-10 binary records into `(pixels, labels)`.
pub fn parse_cifar_records(path: &Path, bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::data(
            path,
            format!(
                "length {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        ));
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::data(
                path,
                format!("label {} out of range at record {i}", rec[0]),
            ));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

fn first_existing(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::data(dir.join(names[0]), "file not found"))
}

impl Dataset {
    pub fn load(kind: DatasetKind, dir: &Path, split: Split) -> Result<Self> {
        match kind {
            DatasetKind::Mnist => {
                let prefix = if split == Split::Train { "train" } else { "t10k" };
                let ip = first_existing(
                    dir,
                    &[
                        &format!("{prefix}-images-idx3-ubyte"),
                        &format!("{prefix}-images.idx3-ubyte"),
                    ],
                )?;
                let lp = first_existing(
                    dir,
                    &[
                        &format!("{prefix}-labels-idx1-ubyte"),
                        &format!("{prefix}-labels.idx1-ubyte"),
                    ],
                )?;
                let (n, r, c, pixels) = parse_idx_images(&ip, &read(&ip)?)?;
                if (r, c) != (28, 28) {
                    return Err(Error::data(&ip, format!("expected 28x28 images, got {r}x{c}")));
                }
                let labels = parse_idx_labels(&lp, &read(&lp)?, 10)?;
                if labels.len() != n {
                    return Err(Error::data(&lp, format!("{} labels for {n} images", labels.len())));
                }
                Ok(Dataset { kind, pixels, labels })
            }
            DatasetKind::Cifar10 => {
                let base = if dir.join("cifar-10-batches-bin").is_dir() {
                    dir.join("cifar-10-batches-bin")
                } else {
                    dir.to_path_buf()
                };
                let files: Vec<String> = match split {
                    Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                    Split::Test => vec!["test_batch.bin".to_string()],
                };
                let mut pixels = Vec::new();
                let mut labels = Vec::new();
                for f in files {
                    let p = base.join(f);
                    let (px, lb) = parse_cifar_records(&p, &read(&p)?)?;
                    pixels.extend(px);
                    labels.extend(lb);
                }
                Ok(Dataset { kind, pixels, labels })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        let s = self.kind.image_size();
        self.kind.channels() * s * s
    }

    /// Keeps the first `n` samples (no-op when `n` is 0 or exceeds the size).
    pub fn truncate(&mut self, n: usize) {
        if n > 0 && n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * self.sample_len());
        }
    }

    /// Normalized `B×C×H×W` batch. With `augment`, each sample gets a random
    /// crop from the 4-pixel zero-padded image and a random horizontal flip.
    pub fn batch(&self, indices: &[usize], augment: Option<&mut dyn rand::RngCore>) -> (Tensor<f32>, Vec<usize>) {
        let (c, s) = (self.kind.channels(), self.kind.image_size());
        let (mean, std) = self.kind.normalization();
        let plane = s * s;
        let mut out = Vec::with_capacity(indices.len() * c * plane);
        let mut labels = Vec::with_capacity(indices.len());
        let mut rng = augment;
        for &i in indices {
            let img = &self.pixels[i * c * plane..(i + 1) * c * plane];
            let (dy, dx, flip) = match rng.as_deref_mut() {
                Some(r) => (r.gen_range(0..9isize) - 4, r.gen_range(0..9isize) - 4, r.gen_bool(0.5)),
                None => (0, 0, false),
            };
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let sx = if flip { s - 1 - x } else { x } as isize + dx;
                        let sy = y as isize + dy;
                        let raw = if sy < 0 || sx < 0 || sy >= s as isize || sx >= s as isize {
                            0.0
                        } else {
                            img[ch * plane + sy as usize * s + sx as usize] as f32 / 255.0
                        };
                        out.push((raw - mean[ch]) / std[ch]);
                    }
                }
            }
            labels.push(self.labels[i] as usize);
        }
        (
            Tensor::new(vec![indices.len(), c, s, s], out).expect("finite normalized pixels"),
            labels,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, 28, 28] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n as usize * 784).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn idx_parsing_and_validation() {
        let p = Path::new("x");
        let (n, r, c, px) = parse_idx_images(p, &idx_images(2)).unwrap();
        assert_eq!((n, r, c, px.len()), (2, 28, 28, 1568));
        let mut bad = idx_images(2);
        bad[3] = 0x01;
        assert!(parse_idx_images(p, &bad).is_err());
        assert!(parse_idx_images(p, &idx_images(2)[..100]).is_err());

        let mut lb = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        lb.extend_from_slice(&3u32.to_be_bytes());
        lb.extend_from_slice(&[1, 9, 0]);
        assert_eq!(parse_idx_labels(p, &lb, 10).unwrap(), vec![1, 9, 0]);
        lb[9] = 10;
        assert!(parse_idx_labels(p, &lb, 10).is_err());
    }

    #[test]
    fn cifar_records() {
        let p = Path::new("x");
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 7;
        let (px, lb) = parse_cifar_records(p, &bytes).unwrap();
        assert_eq!((px.len(), lb), (2 * 3072, vec![0, 7]));
        assert!(parse_cifar_records(p, &bytes[1..]).is_err());
        bytes[0] = 10;
        assert!(parse_cifar_records(p, &bytes).is_err());
    }

    #[test]
    fn unaugmented_batches_are_normalized_and_repeatable() {
        let ds = Dataset {
            kind: DatasetKind::Mnist,
            pixels: vec![255; 2 * 784],
            labels: vec![3, 4],
        };
        let (x, y) = ds.batch(&[1, 0], None);
        assert_eq!(x.shape(), &[2, 1, 28, 28]);
        assert_eq!(y, vec![4, 3]);
        assert!((x.data()[0] - (1.0 - 0.1307) / 0.3081).abs() < 1e-6);
        assert_eq!(ds.batch(&[1, 0], None).0, x);
    }

    #[test]
    fn missing_directory_is_a_data_error() {
        let err = Dataset::load(DatasetKind::Mnist, Path::new("/nonexistent"), Split::Test).unwrap_err();
        assert!(matches!(err, Error::Data { .. }));
    }
}

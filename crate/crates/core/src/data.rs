//! Image data: a bundled synthetic task plus the standard CIFAR-10 binary
//! reader. Everything downstream consumes the same [`Dataset`] shape, so
//! experiments run offline on the synthetic task and switch to CIFAR-10 when
//! a local copy exists.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Images are CHW with this many channels and this side length.
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
/// Flat element count of one image.
pub const IMAGE_NUMEL: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;

/// Side of the random low-frequency class prototypes before upsampling.
const PROTO_SIDE: usize = 4;

/// One labeled image collection, images stacked into `[n, 3, 32, 32]`.
#[derive(Debug, Clone)]
pub struct ImageSet<T: Real> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> ImageSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy the given rows into a batch, preserving index order.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::data(format!("sample index {bad} out of range for {n} images")));
        }
        let mut images = Tensor::zeros(&[idx.len(), IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE]);
        for (row, &i) in idx.iter().enumerate() {
            images.data_mut()[row * IMAGE_NUMEL..(row + 1) * IMAGE_NUMEL]
                .copy_from_slice(&self.images.data()[i * IMAGE_NUMEL..(i + 1) * IMAGE_NUMEL]);
        }
        Ok((images, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// A train/test image task.
#[derive(Debug, Clone)]
pub struct Dataset<T: Real> {
    pub name: String,
    pub num_classes: usize,
    pub train: ImageSet<T>,
    pub test: ImageSet<T>,
}

/// Synthetic task parameters. Each class is a smooth random prototype;
/// samples add white noise on top, so `noise` controls separability (higher
/// is harder).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { classes: 3, train_per_class: 512, test_per_class: 128, noise: 0.5, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic task needs at least 2 classes"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("per-class sample counts must be positive"));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::config(format!("noise {} must be finite and non-negative", self.noise)));
        }
        Ok(())
    }
}

/// Bilinear upsampling of one `side x side` plane to `IMAGE_SIDE`, sampling
/// pixel centers and clamping at the border.
fn upsample_plane(src: &[f64], side: usize) -> Vec<f64> {
    let scale = side as f64 / IMAGE_SIDE as f64;
    let mut out = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE);
    for y in 0..IMAGE_SIDE {
        let fy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let wy = fy - y0 as f64;
        for x in 0..IMAGE_SIDE {
            let fx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * side + x0] * (1.0 - wx) + src[y0 * side + x1] * wx;
            let bot = src[y1 * side + x0] * (1.0 - wx) + src[y1 * side + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// Generate the synthetic task. Deterministic in the spec.
pub fn synthetic<T: Real>(spec: &SyntheticSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = StandardNormal;

    // One smooth prototype per class: a low-resolution standard normal
    // field, bilinearly upsampled per channel.
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let mut image = Vec::with_capacity(IMAGE_NUMEL);
            for _ in 0..IMAGE_CHANNELS {
                let coarse: Vec<f64> = (0..PROTO_SIDE * PROTO_SIDE).map(|_| normal.sample(&mut rng)).collect();
                image.extend(upsample_plane(&coarse, PROTO_SIDE));
            }
            image
        })
        .collect();

    let mut fill = |per_class: usize| -> Result<ImageSet<T>> {
        let n = per_class * spec.classes;
        let mut images = Tensor::zeros(&[n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE]);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.classes;
            labels.push(class);
            let dst = &mut images.data_mut()[i * IMAGE_NUMEL..(i + 1) * IMAGE_NUMEL];
            for (d, &p) in dst.iter_mut().zip(&prototypes[class]) {
                let eps: f64 = normal.sample(&mut rng);
                *d = T::from_f64(p + spec.noise * eps);
            }
        }
        Ok(ImageSet { images, labels })
    };

    let train = fill(spec.train_per_class)?;
    let test = fill(spec.test_per_class)?;
    Ok(Dataset { name: format!("synthetic-{}c", spec.classes), num_classes: spec.classes, train, test })
}

const CIFAR_RECORD: usize = 1 + IMAGE_NUMEL;
const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Read one CIFAR-10 binary batch file: records of 1 label byte plus 3072
/// channel-planar pixel bytes. Pixels map linearly onto [-1, 1].
fn read_cifar_file<T: Real>(path: &Path, images: &mut Vec<T>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::data(format!(
            "{} has {} bytes, not a multiple of the {CIFAR_RECORD}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::data(format!("label {label} in {} outside 0..=9", path.display())));
        }
        labels.push(label);
        images.extend(record[1..].iter().map(|&b| T::from_f64(b as f64 / 255.0 * 2.0 - 1.0)));
    }
    Ok(())
}

/// Load CIFAR-10 from a directory holding the standard binary batches.
pub fn load_cifar10<T: Real>(dir: &Path) -> Result<Dataset<T>> {
    let mut train_pixels = Vec::new();
    let mut train_labels = Vec::new();
    for file in CIFAR_TRAIN_FILES {
        read_cifar_file(&dir.join(file), &mut train_pixels, &mut train_labels)?;
    }
    let mut test_pixels = Vec::new();
    let mut test_labels = Vec::new();
    read_cifar_file(&dir.join(CIFAR_TEST_FILE), &mut test_pixels, &mut test_labels)?;

    let pack = |pixels: Vec<T>, labels: Vec<usize>| -> Result<ImageSet<T>> {
        let n = labels.len();
        Ok(ImageSet { images: Tensor::new(&[n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], pixels)?, labels })
    };
    Ok(Dataset {
        name: "cifar10".to_string(),
        num_classes: 10,
        train: pack(train_pixels, train_labels)?,
        test: pack(test_pixels, test_labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_shaped_and_deterministic() {
        let spec = SyntheticSpec { train_per_class: 20, test_per_class: 10, ..SyntheticSpec::default() };
        let a = synthetic::<f32>(&spec).unwrap();
        assert_eq!(a.num_classes, 3);
        assert_eq!(a.train.len(), 60);
        assert_eq!(a.test.len(), 30);
        assert_eq!(a.train.images.shape(), [60, 3, 32, 32]);
        assert!(a.train.images.data().iter().all(|v| v.is_finite()));
        for class in 0..3 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == class).count(), 20);
        }
        let b = synthetic::<f32>(&spec).unwrap();
        assert_eq!(a.train.images.data(), b.train.images.data());
        assert_eq!(a.test.labels, b.test.labels);
    }

    #[test]
    fn upsample_preserves_constant_and_linear_fields() {
        let flat = upsample_plane(&[2.5; 16], 4);
        assert!(flat.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        // A horizontal ramp stays a ramp: rows identical, columns monotone.
        let ramp: Vec<f64> = (0..16).map(|i| (i % 4) as f64).collect();
        let up = upsample_plane(&ramp, 4);
        for y in 1..IMAGE_SIDE {
            assert_eq!(up[y * IMAGE_SIDE..(y + 1) * IMAGE_SIDE], up[..IMAGE_SIDE]);
        }
        for x in 1..IMAGE_SIDE {
            assert!(up[x] >= up[x - 1]);
        }
        assert_eq!(up[0], 0.0);
        assert_eq!(up[IMAGE_SIDE - 1], 3.0);
    }

    #[test]
    fn noise_controls_separability() {
        // Nearest-class-mean accuracy on the test half: high with little
        // noise, near chance when noise swamps the prototypes.
        let accuracy = |noise: f64| -> f64 {
            let spec = SyntheticSpec { classes: 3, train_per_class: 30, test_per_class: 30, noise, seed: 9 };
            let ds = synthetic::<f64>(&spec).unwrap();
            let mut means = vec![vec![0.0f64; IMAGE_NUMEL]; ds.num_classes];
            let mut counts = vec![0usize; ds.num_classes];
            for (i, &label) in ds.train.labels.iter().enumerate() {
                counts[label] += 1;
                for (m, &v) in means[label].iter_mut().zip(&ds.train.images.data()[i * IMAGE_NUMEL..(i + 1) * IMAGE_NUMEL]) {
                    *m += v;
                }
            }
            for (m, &c) in means.iter_mut().zip(&counts) {
                m.iter_mut().for_each(|v| *v /= c as f64);
            }
            let mut hits = 0usize;
            for (i, &label) in ds.test.labels.iter().enumerate() {
                let img = &ds.test.images.data()[i * IMAGE_NUMEL..(i + 1) * IMAGE_NUMEL];
                let best = (0..ds.num_classes)
                    .min_by(|&a, &b| {
                        let da: f64 = means[a].iter().zip(img).map(|(m, v)| (m - v) * (m - v)).sum();
                        let db: f64 = means[b].iter().zip(img).map(|(m, v)| (m - v) * (m - v)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                if best == label {
                    hits += 1;
                }
            }
            hits as f64 / ds.test.len() as f64
        };
        assert!(accuracy(0.1) >= 0.95);
        assert!(accuracy(10.0) <= 0.7);
    }

    #[test]
    fn batches_preserve_order_and_reject_bad_indices() {
        let spec = SyntheticSpec { train_per_class: 4, test_per_class: 2, ..SyntheticSpec::default() };
        let ds = synthetic::<f32>(&spec).unwrap();
        let (images, labels) = ds.train.batch(&[5, 0, 5]).unwrap();
        assert_eq!(images.shape(), [3, 3, 32, 32]);
        assert_eq!(labels, vec![ds.train.labels[5], ds.train.labels[0], ds.train.labels[5]]);
        assert_eq!(images.data()[..IMAGE_NUMEL], images.data()[2 * IMAGE_NUMEL..]);
        assert!(ds.train.batch(&[12]).is_err());
    }

    #[test]
    fn cifar_reader_parses_the_binary_layout() {
        let dir = tempfile::tempdir().unwrap();
        // One record per training file, two in the test file. Channel planes
        // hold distinct constants to pin the CHW mapping and the [-1, 1]
        // pixel scaling.
        let mut record = vec![7u8];
        record.extend(std::iter::repeat(255).take(1024));
        record.extend(std::iter::repeat(0).take(1024));
        record.extend(std::iter::repeat(51).take(1024));
        for file in CIFAR_TRAIN_FILES {
            std::fs::write(dir.path().join(file), &record).unwrap();
        }
        let mut test_bytes = record.clone();
        test_bytes[0] = 3;
        test_bytes.extend(record.iter().copied());
        std::fs::write(dir.path().join(CIFAR_TEST_FILE), &test_bytes).unwrap();

        let ds = load_cifar10::<f64>(dir.path()).unwrap();
        assert_eq!(ds.num_classes, 10);
        assert_eq!(ds.train.len(), 5);
        assert_eq!(ds.test.len(), 2);
        assert_eq!(ds.train.labels, vec![7; 5]);
        assert_eq!(ds.test.labels, vec![3, 7]);
        let img = ds.train.images.data();
        assert_eq!(img[0], 1.0);
        assert_eq!(img[1024], -1.0);
        assert!((img[2048] - (51.0 / 255.0 * 2.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cifar_reader_rejects_missing_or_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_cifar10::<f32>(dir.path()).is_err());
        for file in CIFAR_TRAIN_FILES {
            std::fs::write(dir.path().join(file), vec![0u8; CIFAR_RECORD]).unwrap();
        }
        // Truncated test batch.
        std::fs::write(dir.path().join(CIFAR_TEST_FILE), vec![0u8; CIFAR_RECORD - 1]).unwrap();
        assert!(load_cifar10::<f32>(dir.path()).is_err());
        // Out-of-range label.
        let mut bad = vec![0u8; CIFAR_RECORD];
        bad[0] = 10;
        std::fs::write(dir.path().join(CIFAR_TEST_FILE), &bad).unwrap();
        assert!(load_cifar10::<f32>(dir.path()).is_err());
    }
}

//! CIFAR binary ingestion, train-time augmentation, and synthetic data
//! for fast tests.
//!
//! CIFAR-10 records are 3073 bytes (label + 3072 pixels), CIFAR-100
//! records 3074 (coarse label, fine label, pixels); pixels are stored as
//! full R, G, B planes in row-major order. Decoding keeps every byte so
//! re-encoding reproduces the file exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpemError};

pub const IMAGE_PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub label: u8,
    /// Coarse label byte, present only in CIFAR-100 records; retained so
    /// decode/encode round-trips byte-for-byte.
    pub coarse_label: Option<u8>,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub num_classes: usize,
}

impl Dataset {
    /// Split off the first `n` records as one dataset, rest as another.
    pub fn split(self, n: usize) -> (Dataset, Dataset) {
        let mut records = self.records;
        let tail = records.split_off(n.min(records.len()));
        (
            Dataset {
                records,
                num_classes: self.num_classes,
            },
            Dataset {
                records: tail,
                num_classes: self.num_classes,
            },
        )
    }

    /// Keep only the first `n` records.
    pub fn truncate(mut self, n: usize) -> Dataset {
        self.records.truncate(n);
        self
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for r in &self.records {
            hist[r.label as usize] += 1;
        }
        hist
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + IMAGE_PIXELS,
            CifarVariant::Cifar100 => 2 + IMAGE_PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Decode a buffer of fixed-length records, byte-for-byte.
pub fn decode_records(bytes: &[u8], variant: CifarVariant) -> Result<Vec<ImageRecord>> {
    let rec_len = variant.record_len();
    if bytes.len() % rec_len != 0 {
        let offset = bytes.len() - bytes.len() % rec_len;
        return Err(SpemError::Format(format!(
            "file size {} is not a multiple of the {rec_len}-byte record length; \
             partial record begins at byte {offset}",
            bytes.len()
        )));
    }
    let classes = variant.num_classes() as u8;
    let mut records = Vec::with_capacity(bytes.len() / rec_len);
    for (i, chunk) in bytes.chunks_exact(rec_len).enumerate() {
        let (coarse_label, label, pixels) = match variant {
            CifarVariant::Cifar10 => (None, chunk[0], &chunk[1..]),
            CifarVariant::Cifar100 => (Some(chunk[0]), chunk[1], &chunk[2..]),
        };
        if label >= classes {
            return Err(SpemError::Format(format!(
                "record {i}: label {label} out of range for {classes} classes"
            )));
        }
        records.push(ImageRecord {
            label,
            coarse_label,
            pixels: pixels.to_vec(),
        });
    }
    Ok(records)
}

/// Exact inverse of [`decode_records`].
pub fn encode_records(records: &[ImageRecord], variant: CifarVariant) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * variant.record_len());
    for r in records {
        if let CifarVariant::Cifar100 = variant {
            out.push(r.coarse_label.unwrap_or(0));
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

fn resolve_dir(dir: &Path, variant: CifarVariant) -> PathBuf {
    let sub = match variant {
        CifarVariant::Cifar10 => "cifar-10-batches-bin",
        CifarVariant::Cifar100 => "cifar-100-binary",
    };
    let nested = dir.join(sub);
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Load the standard binary files from `dir` (or the conventional
/// subdirectory inside it). Returns (train, test).
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir, variant);
    let (train_files, test_files): (Vec<&str>, Vec<&str>) = match variant {
        CifarVariant::Cifar10 => (
            vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            vec!["test_batch.bin"],
        ),
        CifarVariant::Cifar100 => (vec!["train.bin"], vec!["test.bin"]),
    };
    let read_all = |files: &[&str]| -> Result<Vec<ImageRecord>> {
        let mut records = Vec::new();
        for name in files {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| {
                SpemError::Format(format!("cannot read {}: {e}", path.display()))
            })?;
            records.extend(decode_records(&bytes, variant)?);
        }
        Ok(records)
    };
    let train = Dataset {
        records: read_all(&train_files)?,
        num_classes: variant.num_classes(),
    };
    let test = Dataset {
        records: read_all(&test_files)?,
        num_classes: variant.num_classes(),
    };
    Ok((train, test))
}

/// Train-time augmentation and normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad: usize,
    pub crop: usize,
    pub horizontal_flip_prob: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentConfig {
    /// Pad-4 crop-32 flip-0.5 with the widely published CIFAR-10 moments.
    fn default() -> Self {
        AugmentConfig {
            pad: 4,
            crop: 32,
            horizontal_flip_prob: 0.5,
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

impl AugmentConfig {
    /// Standard recipe with normalization constants measured on `dataset`.
    pub fn for_dataset(dataset: &Dataset) -> Self {
        let (mean, std) = channel_stats(dataset);
        AugmentConfig {
            mean,
            std,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop > 32 + 2 * self.pad {
            return Err(SpemError::Config(format!(
                "crop {} exceeds padded extent {}",
                self.crop,
                32 + 2 * self.pad
            )));
        }
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(SpemError::Config("flip probability must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Per-channel mean and population std of `x/255` over a dataset.
pub fn channel_stats(dataset: &Dataset) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let plane = 32 * 32;
    let n = (dataset.records.len() * plane) as f64;
    for r in &dataset.records {
        for c in 0..3 {
            for &b in &r.pixels[c * plane..(c + 1) * plane] {
                let v = b as f64 / 255.0;
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n;
        std[c] = (sumsq[c] / n - mean[c] * mean[c]).max(1e-12).sqrt();
    }
    (mean, std)
}

fn normalize_into(pixels: &[u8], cfg: &AugmentConfig, out: &mut [f64]) {
    let plane = 32 * 32;
    for c in 0..3 {
        let m = cfg.mean[c];
        let s = cfg.std[c];
        for j in 0..plane {
            out[c * plane + j] = (pixels[c * plane + j] as f64 / 255.0 - m) / s;
        }
    }
}

/// Normalization only; the evaluation path.
pub fn eval_pixels(record: &ImageRecord, cfg: &AugmentConfig) -> Vec<f64> {
    let mut out = vec![0.0; IMAGE_PIXELS];
    normalize_into(&record.pixels, cfg, &mut out);
    out
}

/// Zero-pad, random-crop, maybe flip, then normalize. Draw order is
/// crop-y, crop-x, flip, so a fixed RNG fixes the transform.
pub fn augment<R: Rng>(record: &ImageRecord, cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let max_off = 32 + 2 * cfg.pad - cfg.crop;
    let dy = rng.gen_range(0..=max_off);
    let dx = rng.gen_range(0..=max_off);
    let flip = rng.gen_bool(cfg.horizontal_flip_prob);
    let cropped = crop_window(&record.pixels, cfg.pad, cfg.crop, dy, dx, flip);
    let mut out = vec![0.0; IMAGE_PIXELS];
    normalize_into(&cropped, cfg, &mut out);
    out
}

/// Extract a crop x crop window at offset (dy, dx) from the zero-padded
/// image, optionally mirrored left-right. Exposed for tests.
pub fn crop_window(pixels: &[u8], pad: usize, crop: usize, dy: usize, dx: usize, flip: bool) -> Vec<u8> {
    let mut out = vec![0u8; 3 * crop * crop];
    for c in 0..3 {
        for y in 0..crop {
            let src_y = (y + dy) as isize - pad as isize;
            if src_y < 0 || src_y >= 32 {
                continue;
            }
            for x in 0..crop {
                let sample_x = if flip { crop - 1 - x } else { x };
                let src_x = (sample_x + dx) as isize - pad as isize;
                if src_x < 0 || src_x >= 32 {
                    continue;
                }
                out[(c * crop + y) * crop + x] = pixels[(c * 32 + src_y as usize) * 32 + src_x as usize];
            }
        }
    }
    out
}

/// Class-conditional byte-pattern blobs rendered as 32x32 RGB images.
/// Each class owns a random two-level template; samples add small pixel
/// noise, so classes stay linearly separable. Labels round-robin, keeping
/// class counts within one of each other.
pub fn synthetic(num_samples: usize, num_classes: usize, seed: u64) -> Dataset {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xDA7A_5E7);
    let templates: Vec<Vec<u8>> = (0..num_classes)
        .map(|_| {
            (0..IMAGE_PIXELS)
                .map(|_| if rng.gen_bool(0.5) { 64u8 } else { 192u8 })
                .collect()
        })
        .collect();
    let noise = 12.0;
    let records = (0..num_samples)
        .map(|i| {
            let label = i % num_classes;
            let pixels = templates[label]
                .iter()
                .map(|&t| {
                    let jitter: f64 = rng.gen_range(-noise..=noise);
                    (t as f64 + jitter).clamp(0.0, 255.0).round() as u8
                })
                .collect();
            ImageRecord {
                label: label as u8,
                coarse_label: None,
                pixels,
            }
        })
        .collect();
    Dataset {
        records,
        num_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture_bytes(labels: &[u8], variant: CifarVariant) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        let records: Vec<ImageRecord> = labels
            .iter()
            .map(|&l| ImageRecord {
                label: l,
                coarse_label: match variant {
                    CifarVariant::Cifar100 => Some(l / 5),
                    CifarVariant::Cifar10 => None,
                },
                pixels: (0..IMAGE_PIXELS).map(|_| rng.gen()).collect(),
            })
            .collect();
        encode_records(&records, variant)
    }

    #[test]
    fn two_record_fixture_roundtrips() {
        for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
            let bytes = fixture_bytes(&[3, 7], variant);
            let records = decode_records(&bytes, variant).unwrap();
            assert_eq!(records.len(), 2);
            assert_eq!(records[0].label, 3);
            assert_eq!(records[1].label, 7);
            assert_eq!(encode_records(&records, variant), bytes);
        }
    }

    #[test]
    fn truncated_file_is_format_error_with_offset() {
        let mut bytes = fixture_bytes(&[1, 2], CifarVariant::Cifar10);
        bytes.pop();
        let err = decode_records(&bytes, CifarVariant::Cifar10).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3073"), "{msg}");
        assert!(msg.contains("byte 3073"), "{msg}");
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut bytes = fixture_bytes(&[1], CifarVariant::Cifar10);
        bytes[0] = 10;
        assert!(decode_records(&bytes, CifarVariant::Cifar10).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pixels: Vec<u8> = (0..IMAGE_PIXELS).map(|_| rng.gen()).collect();
        let once = crop_window(&pixels, 0, 32, 0, 0, true);
        let twice = crop_window(&once, 0, 32, 0, 0, true);
        assert_eq!(twice, pixels);
    }

    #[test]
    fn crop_at_pad_offset_is_identity_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels: Vec<u8> = (0..IMAGE_PIXELS).map(|_| rng.gen()).collect();
        let window = crop_window(&pixels, 4, 32, 4, 4, false);
        assert_eq!(window, pixels);
    }

    #[test]
    fn augmentation_is_deterministic_for_a_seed() {
        let dataset = synthetic(4, 2, 9);
        let cfg = AugmentConfig::for_dataset(&dataset);
        let a = augment(&dataset.records[0], &cfg, &mut ChaCha8Rng::seed_from_u64(77));
        let b = augment(&dataset.records[0], &cfg, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn augmentation_never_touches_labels() {
        let dataset = synthetic(6, 3, 1);
        let cfg = AugmentConfig::for_dataset(&dataset);
        for (i, r) in dataset.records.iter().enumerate() {
            let _ = augment(r, &cfg, &mut ChaCha8Rng::seed_from_u64(i as u64));
            assert_eq!(r.label as usize, i % 3);
        }
    }

    #[test]
    fn dataset_derived_constants_standardize_the_eval_path() {
        let dataset = synthetic(64, 4, 5);
        let cfg = AugmentConfig::for_dataset(&dataset);
        let mut sum = [0.0f64; 3];
        let mut sumsq = [0.0f64; 3];
        let plane = 32 * 32;
        let n = (dataset.records.len() * plane) as f64;
        for r in &dataset.records {
            let v = eval_pixels(r, &cfg);
            for c in 0..3 {
                for j in 0..plane {
                    sum[c] += v[c * plane + j];
                    sumsq[c] += v[c * plane + j] * v[c * plane + j];
                }
            }
        }
        for c in 0..3 {
            let mean = sum[c] / n;
            let std = (sumsq[c] / n - mean * mean).sqrt();
            assert!(mean.abs() < 0.02, "channel {c} mean {mean}");
            assert!((std - 1.0).abs() < 0.02, "channel {c} std {std}");
        }
    }

    #[test]
    fn synthetic_is_balanced_and_reproducible() {
        let a = synthetic(10, 3, 42);
        let b = synthetic(10, 3, 42);
        assert_eq!(a.records, b.records);
        let hist = a.class_histogram();
        assert_eq!(hist.iter().sum::<usize>(), 10);
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
    }

    #[test]
    fn synthetic_classes_separate_by_nearest_template_mean() {
        let dataset = synthetic(40, 2, 8);
        // Recover class means from the labeled data, then 1-NN on means
        // must classify everything: the blobs are that far apart.
        let mut means = vec![vec![0.0f64; IMAGE_PIXELS]; 2];
        let mut counts = [0usize; 2];
        for r in &dataset.records {
            counts[r.label as usize] += 1;
            for (m, &p) in means[r.label as usize].iter_mut().zip(&r.pixels) {
                *m += p as f64;
            }
        }
        for (m, &c) in means.iter_mut().zip(counts.iter()) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        for r in &dataset.records {
            let d = |m: &[f64]| -> f64 {
                r.pixels
                    .iter()
                    .zip(m)
                    .map(|(&p, &mv)| (p as f64 - mv) * (p as f64 - mv))
                    .sum()
            };
            let pred = if d(&means[0]) <= d(&means[1]) { 0 } else { 1 };
            assert_eq!(pred, r.label as usize);
        }
    }
}

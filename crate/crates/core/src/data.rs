//! Image datasets: the CIFAR-10 binary batches, a headered raw format for
//! externally converted test sets, augmentation and a procedural toy set.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
pub const RAW_MAGIC: &[u8; 4] = b"RIMG";
pub const RAW_HEADER_BYTES: usize = 16;
/// Zero padding applied before random cropping.
pub const AUGMENT_PAD: usize = 4;

/// Planar RGB pixels in `[0, 1]`, `[3, 32, 32]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for img in &self.images {
            h[img.label as usize] += 1;
        }
        h
    }

    /// The first `per_class` images of every class, in original order.
    pub fn balanced_subset(&self, per_class: usize) -> Dataset {
        let mut taken = vec![0; self.classes];
        let images = self
            .images
            .iter()
            .filter(|img| {
                let t = &mut taken[img.label as usize];
                *t += 1;
                *t <= per_class
            })
            .cloned()
            .collect();
        Dataset {
            images,
            classes: self.classes,
        }
    }

    /// Splits off the last `n` images.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let at = self.images.len().saturating_sub(n);
        let tail = self.images.split_off(at);
        let classes = self.classes;
        (
            self,
            Dataset {
                images: tail,
                classes,
            },
        )
    }
}

fn byte_to_pixel(b: u8) -> f32 {
    b as f32 / 255.0
}

fn pixel_to_byte(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses consecutive 3073-byte records; `base` is the file offset of `bytes[0]`.
pub fn parse_records(bytes: &[u8], base: u64, classes: usize) -> Result<Vec<LabeledImage>> {
    if bytes.len() % RECORD_BYTES != 0 {
        let whole = bytes.len() / RECORD_BYTES * RECORD_BYTES;
        return Err(Error::format(
            base + whole as u64,
            format!("trailing {} bytes do not form a {RECORD_BYTES}-byte record", bytes.len() - whole),
        ));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0];
            if label as usize >= classes {
                return Err(Error::format(
                    base + (i * RECORD_BYTES) as u64,
                    format!("label {label} out of range for {classes} classes"),
                ));
            }
            Ok(LabeledImage {
                pixels: rec[1..].iter().map(|&b| byte_to_pixel(b)).collect(),
                label,
            })
        })
        .collect()
}

fn read_checked(path: &Path, expected: u64) -> Result<Vec<u8>> {
    let len = fs::metadata(path)?.len();
    if len != expected {
        return Err(Error::format(
            len.min(expected),
            format!("{}: length {len}, expected {expected}", path.display()),
        ));
    }
    Ok(fs::read(path)?)
}

/// One CIFAR-10 batch file of exactly 10000 records.
pub fn load_cifar10_file(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = read_checked(path, (CIFAR_RECORDS_PER_FILE * RECORD_BYTES) as u64)?;
    parse_records(&bytes, 0, CIFAR_CLASSES)
}

/// `(train, test)` from the six standard binary batch files in `dir`.
pub fn load_cifar10_binary(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = Vec::with_capacity(CIFAR_TRAIN_FILES.len() * CIFAR_RECORDS_PER_FILE);
    for f in CIFAR_TRAIN_FILES {
        train.extend(load_cifar10_file(&dir.join(f))?);
    }
    let test = load_cifar10_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok((
        Dataset {
            images: train,
            classes: CIFAR_CLASSES,
        },
        Dataset {
            images: test,
            classes: CIFAR_CLASSES,
        },
    ))
}

pub fn encode_raw_labeled(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_BYTES + data.len() * RECORD_BYTES);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(&(data.classes as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    for img in &data.images {
        out.push(img.label);
        out.extend(img.pixels.iter().map(|&p| pixel_to_byte(p)));
    }
    out
}

pub fn decode_raw_labeled(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < RAW_HEADER_BYTES {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(Error::format(0, "bad magic, expected RIMG"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let count = u32_at(4);
    let classes = u32_at(8);
    if classes == 0 || classes > 256 {
        return Err(Error::format(8, format!("class count {classes} outside 1..=256")));
    }
    let payload = &bytes[RAW_HEADER_BYTES..];
    let expected = count as u64 * RECORD_BYTES as u64;
    if payload.len() as u64 != expected {
        return Err(Error::format(
            RAW_HEADER_BYTES as u64 + (payload.len() as u64).min(expected),
            format!("header declares {count} records, payload holds {} bytes", payload.len()),
        ));
    }
    Ok(Dataset {
        images: parse_records(payload, RAW_HEADER_BYTES as u64, classes)?,
        classes,
    })
}

pub fn write_raw_labeled(path: &Path, data: &Dataset) -> Result<()> {
    Ok(fs::write(path, encode_raw_labeled(data))?)
}

pub fn load_raw_labeled(path: &Path) -> Result<Dataset> {
    let len = fs::metadata(path)?.len();
    if len < RAW_HEADER_BYTES as u64 {
        return Err(Error::format(len, "truncated header"));
    }
    decode_raw_labeled(&fs::read(path)?)
}

/// Zero-pads by [`AUGMENT_PAD`], crops 32x32 at `(dy, dx)` of the padded
/// image and optionally mirrors horizontally.
pub fn pad_crop_flip(img: &LabeledImage, dy: usize, dx: usize, flip: bool) -> LabeledImage {
    let mut out = vec![0.0; IMAGE_BYTES];
    for c in 0..CHANNELS {
        for y in 0..SIDE {
            let sy = (y + dy) as isize - AUGMENT_PAD as isize;
            if !(0..SIDE as isize).contains(&sy) {
                continue;
            }
            for x in 0..SIDE {
                let ox = if flip { SIDE - 1 - x } else { x };
                let sx = (ox + dx) as isize - AUGMENT_PAD as isize;
                if (0..SIDE as isize).contains(&sx) {
                    out[(c * SIDE + y) * SIDE + x] = img.pixels[(c * SIDE + sy as usize) * SIDE + sx as usize];
                }
            }
        }
    }
    LabeledImage {
        pixels: out,
        label: img.label,
    }
}

/// Random crop offset in `[0, 2 * pad]` per axis and a fair-coin flip.
pub fn augment(img: &LabeledImage, rng: &mut impl Rng) -> LabeledImage {
    let dy = rng.gen_range(0..=2 * AUGMENT_PAD);
    let dx = rng.gen_range(0..=2 * AUGMENT_PAD);
    let flip = rng.gen_bool(0.5);
    pad_crop_flip(img, dy, dx, flip)
}

/// Oriented sinusoidal gratings: class `c` of `k` fixes the orientation
/// `pi * c / k` and alternates between two spatial frequencies; phase,
/// contrast and pixel noise are random.
pub fn make_toy_dataset(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || classes > 256 {
        return Err(Error::config(format!("toy dataset needs 2..=256 classes, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for c in 0..classes {
            let theta = std::f64::consts::PI * c as f64 / classes as f64;
            let freq = if c % 2 == 0 { 0.12 } else { 0.2 };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let contrast = rng.gen_range(0.25..0.45);
            let tint: [f64; CHANNELS] = [rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2)];
            let (s, co) = theta.sin_cos();
            let mut pixels = vec![0.0f32; IMAGE_BYTES];
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let u = x as f64 * co + y as f64 * s;
                    let wave = (std::f64::consts::TAU * freq * u + phase).sin();
                    for (ch, t) in tint.iter().enumerate() {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        let v = 0.5 + contrast * t * wave + 0.08 * noise;
                        // Stored at byte precision so raw files reproduce it exactly.
                        pixels[(ch * SIDE + y) * SIDE + x] = byte_to_pixel(pixel_to_byte(v as f32));
                    }
                }
            }
            images.push(LabeledImage {
                pixels,
                label: c as u8,
            });
        }
    }
    Ok(Dataset { images, classes })
}

/// Per-channel statistics, computed from a training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }
}

impl Normalization {
    pub fn compute(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::config("cannot compute normalization of an empty dataset"));
        }
        let plane = SIDE * SIDE;
        let n = (data.len() * plane) as f64;
        let mut mean = [0.0; CHANNELS];
        for img in &data.images {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += img.pixels[c * plane..(c + 1) * plane].iter().map(|&p| p as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; CHANNELS];
        for img in &data.images {
            for (c, v) in var.iter_mut().enumerate() {
                *v += img.pixels[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&p| (p as f64 - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = var.map(|v| (v / n).sqrt().max(1e-6));
        Ok(Normalization { mean, std })
    }
}

/// Normalized `[N, 3, 32, 32]` batch and its labels.
pub fn batch_tensor<T: Scalar>(images: &[&LabeledImage], norm: &Normalization) -> (Tensor<T>, Vec<usize>) {
    let plane = SIDE * SIDE;
    let mut data = Vec::with_capacity(images.len() * IMAGE_BYTES);
    for img in images {
        for (i, &p) in img.pixels.iter().enumerate() {
            let c = i / plane;
            data.push(T::of((p as f64 - norm.mean[c]) / norm.std[c]));
        }
    }
    let labels = images.iter().map(|i| i.label as usize).collect();
    let t = Tensor::new(vec![images.len(), CHANNELS, SIDE, SIDE], data).expect("batch dimensions");
    (t, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; RECORD_BYTES];
        r[0] = label;
        r
    }

    #[test]
    fn parses_synthetic_records() {
        let mut bytes = record(3, 255);
        bytes.extend(record(7, 0));
        let imgs = parse_records(&bytes, 0, 10).unwrap();
        assert_eq!(imgs.iter().map(|i| i.label).collect::<Vec<_>>(), vec![3, 7]);
        assert_eq!(imgs[0].pixels[0], 1.0);
        assert_eq!(imgs[1].pixels[100], 0.0);
    }

    #[test]
    fn plane_order_is_red_green_blue() {
        let mut r = record(0, 0);
        r[1] = 10;
        r[1 + 1024] = 20;
        r[1 + 2048 + 33] = 30;
        let img = &parse_records(&r, 0, 10).unwrap()[0];
        assert_eq!(pixel_to_byte(img.pixels[0]), 10);
        assert_eq!(pixel_to_byte(img.pixels[1024]), 20);
        assert_eq!(pixel_to_byte(img.pixels[2048 + 33]), 30);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let mut bytes = record(1, 0);
        bytes.extend(record(12, 0));
        match parse_records(&bytes, 0, 10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, RECORD_BYTES as u64),
            other => panic!("{other:?}"),
        }
        bytes.truncate(RECORD_BYTES + 5);
        assert!(matches!(parse_records(&bytes, 0, 10), Err(Error::Format { offset, .. }) if offset == RECORD_BYTES as u64));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.bin");
        fs::write(&p, record(0, 0)).unwrap();
        assert!(matches!(load_cifar10_file(&p), Err(Error::Format { offset, .. }) if offset == RECORD_BYTES as u64));
    }

    #[test]
    fn raw_header_checks() {
        let empty = Dataset {
            images: vec![],
            classes: 10,
        };
        let bytes = encode_raw_labeled(&empty);
        assert_eq!(bytes.len(), RAW_HEADER_BYTES);
        assert!(decode_raw_labeled(&bytes).unwrap().is_empty());
        let mut wrong = bytes.clone();
        wrong[4] = 2;
        assert!(matches!(decode_raw_labeled(&wrong), Err(Error::Format { .. })));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode_raw_labeled(&magic), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn augmentation_primitives() {
        let data = make_toy_dataset(2, 1, 0).unwrap();
        let img = &data.images[0];
        assert_eq!(&pad_crop_flip(img, AUGMENT_PAD, AUGMENT_PAD, false), img);
        let f = pad_crop_flip(img, AUGMENT_PAD, AUGMENT_PAD, true);
        assert_eq!(&pad_crop_flip(&f, AUGMENT_PAD, AUGMENT_PAD, true), img);
        let mut a: Vec<u32> = img.pixels.iter().map(|p| p.to_bits()).collect();
        let mut b: Vec<u32> = f.pixels.iter().map(|p| p.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        let shifted = pad_crop_flip(img, 0, 0, false);
        assert_eq!(shifted.pixels[0], 0.0);
        assert_eq!(shifted.pixels[4 * SIDE + 4], img.pixels[0]);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(augment(img, &mut r1), augment(img, &mut r2));
    }

    #[test]
    fn toy_dataset_is_seeded_and_balanced() {
        let a = make_toy_dataset(4, 6, 11).unwrap();
        let b = make_toy_dataset(4, 6, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_histogram(), vec![6; 4]);
        assert_ne!(a, make_toy_dataset(4, 6, 12).unwrap());
        assert!(make_toy_dataset(1, 5, 0).is_err());
    }

    #[test]
    fn normalization_whitens_training_split() {
        let data = make_toy_dataset(3, 4, 2).unwrap();
        let norm = Normalization::compute(&data).unwrap();
        let refs: Vec<_> = data.images.iter().collect();
        let (t, labels) = batch_tensor::<f64>(&refs, &norm);
        assert_eq!(labels.len(), 12);
        let plane = SIDE * SIDE;
        for c in 0..CHANNELS {
            let vals: Vec<f64> = (0..12)
                .flat_map(|n| t.data()[n * IMAGE_BYTES + c * plane..n * IMAGE_BYTES + (c + 1) * plane].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-4);
        }
        assert_eq!(Normalization::compute(&data).unwrap(), norm);
    }
}

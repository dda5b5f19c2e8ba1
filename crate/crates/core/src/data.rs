//! CIFAR-100 binary records and a seeded synthetic substitute.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIZE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIZE * CIFAR_SIZE;
pub const CIFAR_RECORD_BYTES: usize = 2 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 100;

/// Per-channel statistics applied as (x / 255 - mean) / std.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

pub const CIFAR100_NORMALIZATION: Normalization = Normalization {
    mean: [0.5071, 0.4865, 0.4409],
    std: [0.2673, 0.2564, 0.2762],
};

impl Normalization {
    pub fn normalize(&self, channel: usize, byte: u8) -> f32 {
        (byte as f32 / 255.0 - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, value: f32) -> u8 {
        ((value * self.std[channel] + self.mean[channel]) * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Images stored contiguously as [N, 3, S, S].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    pub num_classes: usize,
    pub image_size: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, num_classes: usize, image_size: usize, split: Split) -> Result<Self> {
        let per = 3 * image_size * image_size;
        if images.len() != labels.len() * per {
            return Err(Error::Config(format!(
                "{} image values for {} samples of {per}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Label {
                label,
                classes: num_classes,
                row,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            image_size,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels_per_image(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let per = self.pixels_per_image();
        &self.images[index * per..(index + 1) * per]
    }

    /// Stacks the selected samples into a [B, 3, S, S] batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let s = self.image_size;
        let x = Tensor::new(vec![indices.len(), 3, s, s], data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Same images with replaced labels.
    pub fn relabeled(&self, labels: Vec<usize>) -> Result<Self> {
        Dataset::new(self.images.clone(), labels, self.num_classes, self.image_size, self.split)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (x, labels) = self.batch(indices);
        Dataset {
            images: x.into_data(),
            labels,
            num_classes: self.num_classes,
            image_size: self.image_size,
            split: self.split,
        }
    }
}

/// Parses concatenated CIFAR-100 records; `path` is used for diagnostics.
pub fn parse_cifar_records(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return Err(Error::Data {
            path: path.to_path_buf(),
            offset: whole as u64,
            detail: format!(
                "truncated record: file length {} is not a multiple of {CIFAR_RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    let norm = CIFAR100_NORMALIZATION;
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let fine = record[1] as usize;
        if fine >= CIFAR_CLASSES {
            return Err(Error::Data {
                path: path.to_path_buf(),
                offset: (r * CIFAR_RECORD_BYTES + 1) as u64,
                detail: format!("fine label {fine} is not below {CIFAR_CLASSES}"),
            });
        }
        labels.push(fine);
        let plane = CIFAR_SIZE * CIFAR_SIZE;
        images.extend(record[2..].iter().enumerate().map(|(i, &b)| norm.normalize(i / plane, b)));
    }
    Dataset::new(images, labels, CIFAR_CLASSES, CIFAR_SIZE, split)
}

pub fn read_cifar_bin(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes, path, split)
}

/// Reads `train.bin` and `test.bin`; the test split serves as validation.
pub fn load_cifar100(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = read_cifar_bin(&dir.join("train.bin"), Split::Train)?;
    let val = read_cifar_bin(&dir.join("test.bin"), Split::Val)?;
    Ok((train, val))
}

/// Encodes 32x32 datasets as CIFAR-100 records (coarse label 0).
pub fn encode_cifar_records(data: &Dataset) -> Result<Vec<u8>> {
    if data.image_size != CIFAR_SIZE || data.num_classes > CIFAR_CLASSES {
        return Err(Error::Config(format!(
            "CIFAR records hold 32x32 images with at most 100 classes, dataset is {}x{} with {} classes",
            data.image_size, data.image_size, data.num_classes
        )));
    }
    let norm = CIFAR100_NORMALIZATION;
    let plane = CIFAR_SIZE * CIFAR_SIZE;
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD_BYTES);
    for i in 0..data.len() {
        out.push(0);
        out.push(data.labels[i] as u8);
        out.extend(data.image(i).iter().enumerate().map(|(j, &v)| norm.denormalize(j / plane, v)));
    }
    Ok(out)
}

pub fn write_cifar_bin(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_cifar_records(data)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub const DEFAULT_NOISE: f64 = 0.25;

    pub fn new(n: usize, classes: usize) -> Self {
        SynthConfig {
            n,
            classes,
            size: CIFAR_SIZE,
            noise: Self::DEFAULT_NOISE,
            seed: 0,
        }
    }
}

const TEMPLATE_WAVES: usize = 3;
const MAX_FREQUENCY: usize = 3;

/// One sum-of-sinusoids pattern per class and channel, drawn from `seed`.
fn class_templates(seed: u64, classes: usize, size: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq = Uniform::new_inclusive(0, MAX_FREQUENCY).expect("range");
    let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("range");
    let amp = Uniform::new(0.5, 1.0).expect("range");
    let plane = size * size;
    let mut out = vec![0.0f32; classes * 3 * plane];
    for t in out.chunks_mut(plane) {
        for _ in 0..TEMPLATE_WAVES {
            let (fx, fy) = (freq.sample(&mut rng) as f64, freq.sample(&mut rng) as f64);
            let (ph, a) = (phase.sample(&mut rng), amp.sample(&mut rng));
            for y in 0..size {
                for x in 0..size {
                    let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / size as f64 + ph;
                    t[y * size + x] += (a * arg.sin()) as f32;
                }
            }
        }
    }
    out
}

/// Samples `start..start + count` of the infinite synthetic stream: label
/// `i % classes`, class template plus Gaussian noise seeded per index.
fn synth_range(cfg: &SynthConfig, start: usize, count: usize, split: Split) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.n < cfg.classes {
        return Err(Error::Config(format!("synthetic n = {} is smaller than classes = {}", cfg.n, cfg.classes)));
    }
    if cfg.size == 0 || !cfg.noise.is_finite() || cfg.noise < 0.0 {
        return Err(Error::Config(format!("invalid synthetic size {} or noise {}", cfg.size, cfg.noise)));
    }
    let templates = class_templates(cfg.seed, cfg.classes, cfg.size);
    let per = 3 * cfg.size * cfg.size;
    let noise = Normal::new(0.0, cfg.noise).expect("finite sigma");
    let mut images = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for i in start..start + count {
        let c = i % cfg.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        images.extend(templates[c * per..(c + 1) * per].iter().map(|&t| t + noise.sample(&mut rng) as f32));
        labels.push(c);
    }
    Dataset::new(images, labels, cfg.classes, cfg.size, split)
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    synth_range(cfg, 0, cfg.n, Split::Train)
}

/// Training set plus `n_val` further samples from the same generator.
pub fn synth_split(cfg: &SynthConfig, n_val: usize) -> Result<(Dataset, Dataset)> {
    Ok((synth_range(cfg, 0, cfg.n, Split::Train)?, synth_range(cfg, cfg.n, n_val, Split::Val)?))
}

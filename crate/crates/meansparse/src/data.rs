//! Dataset access: CIFAR-10 binary batches, deterministic stratified
//! subsetting, and a synthetic class-conditional Gaussian fallback so every
//! experiment also runs without the real data on disk.
//!
//! Pixels stay in [0,1]; per-channel standardization is folded into the
//! model's first layer so attack budgets are in raw pixel units.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Cifar10,
    Synthetic,
}

impl Provenance {
    pub fn name(&self) -> &'static str {
        match self {
            Provenance::Cifar10 => "cifar10",
            Provenance::Synthetic => "synthetic",
        }
    }
}

/// Images as flat `N x C x H x W` in [0,1] plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub provenance: Provenance,
    pub seed: u64,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let len = self.image_len();
        &self.images[i * len..(i + 1) * len]
    }

    /// Batch `i0..i0+bs` as an `N x C x H x W` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(data, &[indices.len(), self.channels, self.height, self.width])
            .expect("dataset images are finite");
        (t, labels)
    }

    /// Fixed-order batches of size `bs` (last may be short).
    pub fn batches(&self, bs: usize) -> Vec<(Tensor, Vec<usize>)> {
        (0..self.n)
            .step_by(bs.max(1))
            .map(|start| {
                let idx: Vec<usize> = (start..(start + bs).min(self.n)).collect();
                self.batch(&idx)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.images.len() != self.n * self.image_len() || self.labels.len() != self.n {
            return Err(Error::Format("dataset field lengths disagree".into()));
        }
        if self.images.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Format("pixel outside [0,1]".into()));
        }
        if self.labels.iter().any(|&l| l >= self.classes) {
            return Err(Error::Format("label outside [0, K)".into()));
        }
        Ok(())
    }

    /// Split off the first `n_train` examples; the tail becomes the second
    /// split. Synthetic labels cycle through the classes, so both sides stay
    /// balanced when `n_train` is a multiple of `classes`.
    pub fn split(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.n {
            return Err(Error::Config(format!(
                "split point {n_train} outside dataset of {}",
                self.n
            )));
        }
        let len = self.image_len();
        let head = Dataset {
            images: self.images[..n_train * len].to_vec(),
            labels: self.labels[..n_train].to_vec(),
            n: n_train,
            ..self.clone()
        };
        let tail = Dataset {
            images: self.images[n_train * len..].to_vec(),
            labels: self.labels[n_train..].to_vec(),
            n: self.n - n_train,
            ..self.clone()
        };
        Ok((head, tail))
    }

    /// Seeded stratified sample with exactly `per_class` examples per class.
    pub fn stratified_subset(&self, total: usize, seed: u64) -> Result<Dataset> {
        if total == 0 || total % self.classes != 0 {
            return Err(Error::Config(format!(
                "subset size {total} not divisible by {} classes",
                self.classes
            )));
        }
        let per_class = total / self.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::with_capacity(total);
        for class in 0..self.classes {
            let mut ids: Vec<usize> = (0..self.n).filter(|&i| self.labels[i] == class).collect();
            if ids.len() < per_class {
                return Err(Error::Config(format!(
                    "class {class} has {} examples, need {per_class}",
                    ids.len()
                )));
            }
            ids.shuffle(&mut rng);
            chosen.extend_from_slice(&ids[..per_class]);
        }
        chosen.sort_unstable();
        let len = self.image_len();
        let mut images = Vec::with_capacity(chosen.len() * len);
        let mut labels = Vec::with_capacity(chosen.len());
        for &i in &chosen {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            images,
            labels,
            n: chosen.len(),
            seed,
            ..self.clone()
        })
    }
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 32 * 32 pixels
const CIFAR_PIXELS: usize = 3072;

/// Parse one CIFAR-10 binary batch file (label byte then R, G, B planes).
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR batch length {} is not a multiple of the {CIFAR_RECORD}-byte record size",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format(format!("CIFAR label byte {label} out of range")));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((images, labels))
}

/// Re-serialize to the exact byte stream `parse_cifar_batch` accepts; the
/// round trip is bit-exact because /255 on u8 values is invertible.
pub fn serialize_cifar_batch(images: &[f64], labels: &[usize]) -> Result<Vec<u8>> {
    if images.len() != labels.len() * CIFAR_PIXELS {
        return Err(Error::Format("image/label count mismatch".into()));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (i, &label) in labels.iter().enumerate() {
        out.push(u8::try_from(label).map_err(|_| Error::Format("label too large".into()))?);
        for &p in &images[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS] {
            out.push((p * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Load the five train batches and the test batch from `dir`, optionally
/// stratified-subsetting each split.
pub fn load_cifar10(
    dir: &Path,
    subset: Option<(usize, usize)>,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        let bytes = fs::read(&path)?;
        if bytes.len() != 10_000 * CIFAR_RECORD {
            return Err(Error::Format(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                10_000 * CIFAR_RECORD,
                bytes.len()
            )));
        }
        let (imgs, labels) = parse_cifar_batch(&bytes)?;
        train_images.extend(imgs);
        train_labels.extend(labels);
    }
    let test_bytes = fs::read(dir.join("test_batch.bin"))?;
    if test_bytes.len() != 10_000 * CIFAR_RECORD {
        return Err(Error::Format(format!(
            "test_batch.bin: expected {} bytes, found {}",
            10_000 * CIFAR_RECORD,
            test_bytes.len()
        )));
    }
    let (test_images, test_labels) = parse_cifar_batch(&test_bytes)?;
    let make = |images: Vec<f64>, labels: Vec<usize>| Dataset {
        n: labels.len(),
        images,
        labels,
        channels: 3,
        height: 32,
        width: 32,
        classes: 10,
        provenance: Provenance::Cifar10,
        seed,
    };
    let mut train = make(train_images, train_labels);
    let mut test = make(test_images, test_labels);
    if let Some((n_train, n_test)) = subset {
        train = train.stratified_subset(n_train, seed)?;
        test = test.stratified_subset(n_test, seed.wrapping_add(1))?;
    }
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

/// Class-conditional Gaussian blobs: each class gets per-channel means drawn
/// once from the seed, pixels are mean + noise, clipped to [0,1]. Separable
/// by a linear probe at the default spread.
pub fn synth_blobs(n: usize, classes: usize, d_spatial: usize, seed: u64) -> Result<Dataset> {
    synth_blobs_spread(n, classes, d_spatial, seed, 0.12)
}

pub fn synth_blobs_spread(
    n: usize,
    classes: usize,
    d_spatial: usize,
    seed: u64,
    noise: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need K >= 2 classes, got {classes}")));
    }
    let channels = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Class templates: per-channel base mean plus a smooth spatial ramp so
    // classes differ in more than a constant offset.
    let mut templates = Vec::with_capacity(classes);
    for _ in 0..classes {
        let ch_means: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.25..0.75)).collect();
        let ramp: Vec<f64> = (0..channels).map(|_| rng.gen_range(-0.2..0.2)).collect();
        templates.push((ch_means, ramp));
    }
    let img_len = channels * d_spatial * d_spatial;
    let mut images = Vec::with_capacity(n * img_len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let (ch_means, ramp) = &templates[class];
        labels.push(class);
        for c in 0..channels {
            for y in 0..d_spatial {
                for x in 0..d_spatial {
                    let pos = (x + y) as f64 / (2 * d_spatial.max(1)) as f64 - 0.5;
                    let mean = ch_means[c] + ramp[c] * pos;
                    let v: f64 = mean + noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    images.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    let ds = Dataset {
        images,
        labels,
        n,
        channels,
        height: d_spatial,
        width: d_spatial,
        classes,
        provenance: Provenance::Synthetic,
        seed,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_cifar_record(label: u8, fill: u8) -> Vec<u8> {
        let mut rec = vec![label];
        rec.extend(std::iter::repeat(fill).take(CIFAR_PIXELS));
        rec
    }

    #[test]
    fn parse_reads_label_and_scales_pixels() {
        let bytes = fake_cifar_record(7, 255);
        let (imgs, labels) = parse_cifar_batch(&bytes).unwrap();
        assert_eq!(labels, vec![7]);
        assert_eq!(imgs[0], 1.0);
    }

    #[test]
    fn parse_rejects_truncated_batch() {
        let bytes = vec![0u8; CIFAR_RECORD - 1];
        let err = parse_cifar_batch(&bytes).unwrap_err().to_string();
        assert!(err.contains("3073"), "{err}");
    }

    #[test]
    fn serialize_roundtrips_bit_exact() {
        let mut bytes = Vec::new();
        for i in 0..4u8 {
            bytes.extend(fake_cifar_record(i % 10, i.wrapping_mul(37)));
        }
        // vary pixels a bit
        for (i, b) in bytes.iter_mut().enumerate() {
            if i % CIFAR_RECORD != 0 {
                *b = (i % 251) as u8;
            }
        }
        let (imgs, labels) = parse_cifar_batch(&bytes).unwrap();
        let back = serialize_cifar_batch(&imgs, &labels).unwrap();
        assert_eq!(back, bytes);
    }

    #[test]
    fn blobs_are_deterministic_and_in_range() {
        let a = synth_blobs(100, 4, 8, 42).unwrap();
        let b = synth_blobs(100, 4, 8, 42).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert!(a.images.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let c = synth_blobs(100, 4, 8, 43).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn blobs_linear_probe_accuracy() {
        // Nearest-class-mean probe on per-channel means; >= 95% per contract.
        let ds = synth_blobs(1000, 2, 8, 7).unwrap();
        let img_len = ds.image_len();
        let chan = ds.height * ds.width;
        let feat = |img: &[f64]| -> Vec<f64> {
            (0..ds.channels)
                .map(|c| img[c * chan..(c + 1) * chan].iter().sum::<f64>() / chan as f64)
                .collect()
        };
        let mut means = vec![vec![0.0; ds.channels]; ds.classes];
        let mut counts = vec![0usize; ds.classes];
        for i in 0..ds.n {
            let f = feat(&ds.images[i * img_len..(i + 1) * img_len]);
            for (m, v) in means[ds.labels[i]].iter_mut().zip(&f) {
                *m += v;
            }
            counts[ds.labels[i]] += 1;
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        let correct = (0..ds.n)
            .filter(|&i| {
                let f = feat(&ds.images[i * img_len..(i + 1) * img_len]);
                let pred = (0..ds.classes)
                    .min_by(|&a, &b| {
                        let da: f64 = means[a].iter().zip(&f).map(|(m, v)| (m - v).powi(2)).sum();
                        let db: f64 = means[b].iter().zip(&f).map(|(m, v)| (m - v).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                pred == ds.labels[i]
            })
            .count();
        assert!(correct >= 950, "probe accuracy {correct}/1000");
    }

    #[test]
    fn stratified_subset_exact_counts_and_deterministic() {
        let ds = synth_blobs(400, 4, 4, 1).unwrap();
        let sub = ds.stratified_subset(80, 9).unwrap();
        assert_eq!(sub.n, 80);
        for class in 0..4 {
            assert_eq!(sub.labels.iter().filter(|&&l| l == class).count(), 20);
        }
        let sub2 = ds.stratified_subset(80, 9).unwrap();
        assert_eq!(sub.images, sub2.images);
        let sub3 = ds.stratified_subset(80, 10).unwrap();
        assert_ne!(sub.images, sub3.images);
    }

    #[test]
    fn batches_cover_dataset_in_order() {
        let ds = synth_blobs(10, 2, 4, 3).unwrap();
        let batches = ds.batches(4);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].0.shape()[0], 4);
        assert_eq!(batches[2].0.shape()[0], 2);
        let total: usize = batches.iter().map(|(_, l)| l.len()).sum();
        assert_eq!(total, 10);
    }
}

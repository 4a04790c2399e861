use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use detrame_core::train::TrainData;
use detrame_core::{Rng, Tensor};

use crate::augment::augment_batch;

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * SIDE * SIDE;
/// One label byte followed by the R, G and B planes.
pub const RECORD_LEN: usize = 1 + PIXELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// `N × 3 × 32 × 32` images in `[0, 1]` with labels and per-channel statistics.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Per-channel `(mean, std)` subtracted and divided out of every batch
    /// handed to a network. Images themselves stay in `[0, 1]`.
    pub normalization: Option<([f64; 3], [f64; 3])>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        ensure!(
            images.rank() == 4 && images.shape()[1..] == [CHANNELS, SIDE, SIDE],
            "images must be N × 3 × 32 × 32, got {:?}",
            images.shape()
        );
        ensure!(images.batch() == labels.len(), "{} images but {} labels", images.batch(), labels.len());
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            bail!("label {bad} outside [0, {classes})");
        }
        let (mean, std) = channel_stats(&images);
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            mean,
            std,
            normalization: None,
        })
    }

    /// Standardizes batches with the given statistics (normally the training set's).
    pub fn with_normalization(mut self, mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        ensure!(std.iter().all(|&s| s > 0.0), "normalization std must be positive, got {std:?}");
        self.normalization = Some((mean, std));
        Ok(self)
    }

    /// Applies [`Dataset::normalization`] to a batch of raw images in place.
    pub fn normalize(&self, x: &mut Tensor) {
        if let Some((mean, std)) = self.normalization {
            let plane = x.shape()[2] * x.shape()[3];
            let channels = x.shape()[1];
            for (i, p) in x.data_mut().chunks_mut(plane).enumerate() {
                let c = i % channels;
                p.iter_mut().for_each(|v| *v = (*v - mean[c]) / std[c]);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut d = Dataset::new(self.images.gather(indices)?, labels, self.classes, split)?;
        d.normalization = self.normalization;
        Ok(d)
    }

    /// First `n` images as training data, the rest as test data.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        ensure!(n > 0 && n < self.len(), "split point {n} outside (0, {})", self.len());
        let train: Vec<usize> = (0..n).collect();
        let test: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&train, Split::Train)?, self.subset(&test, Split::Test)?))
    }

    /// Serializes in the CIFAR-10 binary record layout (pixels rounded to bytes).
    pub fn to_cifar_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.len() * RECORD_LEN);
        for (i, &y) in self.labels.iter().enumerate() {
            out.push(u8::try_from(y).context("label does not fit in a byte")?);
            out.extend(self.images.item(i).iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        Ok(out)
    }
}

fn channel_stats(images: &Tensor) -> ([f64; 3], [f64; 3]) {
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    let plane = SIDE * SIDE;
    let count = (images.batch() * plane) as f64;
    for item in images.data().chunks(PIXELS) {
        for c in 0..CHANNELS {
            let p = &item[c * plane..(c + 1) * plane];
            mean[c] += p.iter().sum::<f64>();
            std[c] += p.iter().map(|v| v * v).sum::<f64>();
        }
    }
    for c in 0..CHANNELS {
        mean[c] /= count;
        std[c] = (std[c] / count - mean[c] * mean[c]).max(0.0).sqrt();
    }
    (mean, std)
}

/// Parses CIFAR-10 binary records. `source` names the input in error messages.
pub fn parse_cifar_records(bytes: &[u8], classes: usize, split: Split, source: &str) -> Result<Dataset> {
    ensure!(!bytes.is_empty(), "{source}: no records");
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        let offset = bytes.len() - bytes.len() % RECORD_LEN;
        bail!(
            "{source}: truncated record at byte offset {offset} ({} of {RECORD_LEN} bytes present)",
            bytes.len() - offset
        );
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks(RECORD_LEN).enumerate() {
        let y = rec[0] as usize;
        ensure!(y < classes, "{source}: label {y} at byte offset {} is not below {classes}", i * RECORD_LEN);
        labels.push(y);
        data.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Dataset::new(Tensor::from_vec(&[n, CHANNELS, SIDE, SIDE], data)?, labels, classes, split)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Loads `data_batch_*.bin` (training, in name order) and `test_batch.bin`
/// from a CIFAR-10-format directory.
pub fn load_cifar10(dir: &Path, classes: usize) -> Result<(Dataset, Dataset)> {
    let mut train_files: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    train_files.sort();
    ensure!(!train_files.is_empty(), "no data_batch_*.bin files in {}", dir.display());
    let mut train_bytes = Vec::new();
    for f in &train_files {
        let bytes = read_file(f)?;
        // validate each file on its own so offsets refer to that file
        parse_cifar_records(&bytes, classes, Split::Train, &f.display().to_string())?;
        train_bytes.extend(bytes);
    }
    let test_path = dir.join("test_batch.bin");
    let test = parse_cifar_records(&read_file(&test_path)?, classes, Split::Test, &test_path.display().to_string())?;
    let train = parse_cifar_records(&train_bytes, classes, Split::Train, &dir.display().to_string())?;
    Ok((train, test))
}

/// Knobs of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticOptions {
    /// Scale of the class template relative to the clutter.
    pub separation: f64,
    /// Gaussian blobs in every class template.
    pub template_blobs: usize,
    /// Class-independent blobs added to every image.
    pub clutter_blobs: usize,
    /// Maximum template shift in pixels along each axis.
    pub jitter: usize,
    /// Per-pixel Gaussian noise.
    pub pixel_noise: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            separation: 1.0,
            template_blobs: 3,
            clutter_blobs: 3,
            jitter: 2,
            pixel_noise: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    y: f64,
    x: f64,
    sigma: f64,
    color: [f64; 3],
}

impl Blob {
    fn random(rng: &mut Rng) -> Self {
        let mut color = [0.0; 3];
        color.iter_mut().for_each(|c| *c = rng.normal(0.0, 1.0));
        let norm = color.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
        color.iter_mut().for_each(|c| *c /= norm);
        Blob {
            y: rng.uniform(4.0, SIDE as f64 - 4.0),
            x: rng.uniform(4.0, SIDE as f64 - 4.0),
            sigma: rng.uniform(1.5, 3.5),
            color,
        }
    }

    fn paint(&self, canvas: &mut [f64], scale: f64, dy: f64, dx: f64) {
        let plane = SIDE * SIDE;
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        for r in 0..SIDE {
            for c in 0..SIDE {
                let d2 = (r as f64 - self.y - dy).powi(2) + (c as f64 - self.x - dx).powi(2);
                let g = scale * (-d2 * inv).exp();
                for ch in 0..CHANNELS {
                    canvas[ch * plane + r * SIDE + c] += g * self.color[ch];
                }
            }
        }
    }
}

/// Class-conditional Gaussian-blob images.
///
/// Each class owns a template of `template_blobs` coloured Gaussian blobs;
/// the colours and widths are shared by all classes, the positions are not.
/// An image is `½ + ¼·tanh(s·template(shifted) + clutter + noise)` where the
/// clutter blobs are drawn independently of the class; `s = separation`.
/// Labels cycle through the classes and the order is then shuffled.
pub fn make_synthetic(classes: usize, n: usize, seed: u64, opts: SyntheticOptions) -> Result<Dataset> {
    ensure!(classes >= 1 && n >= classes, "need n ≥ classes ≥ 1 (n = {n}, classes = {classes})");
    ensure!(opts.separation >= 0.0 && opts.pixel_noise >= 0.0, "separation and noise must be non-negative");
    let root = Rng::new(seed);
    let mut trng = root.fork(0);
    // one palette for every class: classes differ only in where the blobs sit
    let palette: Vec<Blob> = (0..opts.template_blobs).map(|_| Blob::random(&mut trng)).collect();
    let templates: Vec<Vec<Blob>> = (0..classes)
        .map(|_| {
            palette
                .iter()
                .map(|b| {
                    let moved = Blob::random(&mut trng);
                    Blob { y: moved.y, x: moved.x, ..*b }
                })
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    root.fork(1).shuffle(&mut labels);
    let mut data = vec![0.0; n * PIXELS];
    for (i, (canvas, &y)) in data.chunks_mut(PIXELS).zip(&labels).enumerate() {
        let mut rng = root.fork(2 + i as u64);
        let j = opts.jitter as f64;
        let (dy, dx) = (rng.uniform(-j, j).round(), rng.uniform(-j, j).round());
        for blob in &templates[y] {
            blob.paint(canvas, opts.separation, dy, dx);
        }
        for _ in 0..opts.clutter_blobs {
            Blob::random(&mut rng).paint(canvas, 1.0, 0.0, 0.0);
        }
        for v in canvas.iter_mut() {
            *v = 0.5 + 0.25 * (*v + rng.normal(0.0, opts.pixel_noise)).tanh();
        }
    }
    Dataset::new(Tensor::from_vec(&[n, CHANNELS, SIDE, SIDE], data)?, labels, classes, Split::Train)
}

impl TrainData for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, indices: &[usize], augment: bool, rng: &mut Rng) -> detrame_core::Result<(Tensor, Vec<usize>)> {
        let mut x = self.images.gather(indices)?;
        if augment {
            augment_batch(&mut x, rng)?;
        }
        self.normalize(&mut x);
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize) -> Vec<u8> {
        let mut bytes = Vec::new();
        for i in 0..n {
            bytes.push((i % 10) as u8);
            bytes.extend((0..PIXELS).map(|p| ((p * 7 + i * 13) % 256) as u8));
        }
        bytes
    }

    #[test]
    fn parses_hand_built_records() {
        let bytes = fixture(5);
        let d = parse_cifar_records(&bytes, 10, Split::Train, "fixture").unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.labels, vec![0, 1, 2, 3, 4]);
        // record 1, green plane, row 0, col 2 → byte index 1024 + 2
        let want = ((1026 * 7 + 13) % 256) as f64 / 255.0;
        assert_eq!(d.images.item(1)[1026], want);
        assert_eq!(d.to_cifar_bytes().unwrap(), bytes);
    }

    #[test]
    fn full_byte_is_one() {
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat_n(255u8, PIXELS));
        let d = parse_cifar_records(&bytes, 10, Split::Test, "ones").unwrap();
        assert!(d.images.data().iter().all(|&v| v == 1.0));
        assert_eq!(d.mean, [1.0; 3]);
        assert_eq!(d.std, [0.0; 3]);
    }

    #[test]
    fn truncated_record_reports_offset() {
        let mut bytes = fixture(3);
        bytes.truncate(2 * RECORD_LEN + 100);
        let err = parse_cifar_records(&bytes, 10, Split::Train, "cut").unwrap_err().to_string();
        assert!(err.contains(&format!("byte offset {}", 2 * RECORD_LEN)), "{err}");
        let mut bad = fixture(2);
        bad[RECORD_LEN] = 12;
        let err = parse_cifar_records(&bad, 10, Split::Train, "lbl").unwrap_err().to_string();
        assert!(err.contains("label 12"), "{err}");
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let a = make_synthetic(3, 30, 4, SyntheticOptions::default()).unwrap();
        let b = make_synthetic(3, 30, 4, SyntheticOptions::default()).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for k in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&y| y == k).count(), 10);
        }
        let c = make_synthetic(3, 30, 5, SyntheticOptions::default()).unwrap();
        assert_ne!(a.images.data(), c.images.data());
        assert!(make_synthetic(4, 3, 0, SyntheticOptions::default()).is_err());
    }

    #[test]
    fn batches_are_standardized() {
        let d = make_synthetic(2, 40, 1, SyntheticOptions::default()).unwrap();
        let (mean, std) = (d.mean, d.std);
        let d = d.with_normalization(mean, std).unwrap();
        let all: Vec<usize> = (0..40).collect();
        let (x, _) = d.batch(&all, false, &mut Rng::new(0)).unwrap();
        let plane = SIDE * SIDE;
        for c in 0..3 {
            let vals: Vec<f64> = x.data().chunks(plane).skip(c).step_by(3).flatten().copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10 && (v - 1.0).abs() < 1e-9, "{m} {v}");
        }
        assert!(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

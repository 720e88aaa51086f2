//! CIFAR binary files, synthetic datasets, augmentation and batching.

use std::fs;
use std::path::{Path, PathBuf};

use kshare_core::{Rng, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cifar10,
    Cifar100,
}

impl Variant {
    pub fn record_len(self) -> usize {
        match self {
            Variant::Cifar10 => 1 + PIXELS,
            Variant::Cifar100 => 2 + PIXELS,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Variant::Cifar10 => 10,
            Variant::Cifar100 => 100,
        }
    }

    /// Byte offset of the label used for training (the fine label for CIFAR-100).
    fn label_offset(self) -> usize {
        match self {
            Variant::Cifar10 => 0,
            Variant::Cifar100 => 1,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            Variant::Cifar10 => "cifar-10-batches-bin",
            Variant::Cifar100 => "cifar-100-binary",
        }
    }

    /// Official file names and record counts of a split.
    fn files(self, split: Split) -> Vec<(String, usize)> {
        match (self, split) {
            (Variant::Cifar10, Split::Train) => (1..=5).map(|i| (format!("data_batch_{i}.bin"), 10_000)).collect(),
            (Variant::Cifar10, Split::Test) => vec![("test_batch.bin".into(), 10_000)],
            (Variant::Cifar100, Split::Train) => vec![("train.bin".into(), 50_000)],
            (Variant::Cifar100, Split::Test) => vec![("test.bin".into(), 10_000)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// (N, C, H, W), values in [0, 1].
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!("label {l} of sample {i} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample (C, H, W).
    pub fn geometry(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.geometry().iter().product::<usize>();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let [c, h, w] = self.geometry();
        let images = Tensor::new(vec![n, c, h, w], self.images.data()[..n * c * h * w].to_vec())?;
        Self::new(images, self.labels[..n].to_vec(), self.classes, self.split)
    }
}

/// Decodes concatenated CIFAR records.
pub fn parse_cifar(bytes: &[u8], variant: Variant, split: Split) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(rec) {
        labels.push(record[variant.label_offset()] as usize);
        pixels.extend(record[rec - PIXELS..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, variant.classes(), split)
}

/// Reads one binary file, optionally insisting on an exact record count.
pub fn read_cifar_file(path: &Path, variant: Variant, split: Split, records: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rec = variant.record_len();
    let expected = match records {
        Some(n) => Some((n * rec) as u64),
        None if bytes.len() % rec != 0 => Some((bytes.len().div_ceil(rec) * rec) as u64),
        None => None,
    };
    if let Some(expected) = expected.filter(|&e| e != bytes.len() as u64) {
        return Err(Error::FileSize {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    parse_cifar(&bytes, variant, split).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads a split from `dir` (or its official subdirectory). Every file must
/// have its published size; nothing is returned unless all of them parse.
pub fn load_cifar(dir: &Path, variant: Variant, split: Split) -> Result<Dataset> {
    let nested = dir.join(variant.subdir());
    let root = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (name, records) in variant.files(split) {
        let part = read_cifar_file(&root.join(&name), variant, split, Some(records))?;
        labels.extend_from_slice(&part.labels);
        images.extend(part.images.into_data());
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], images)?, labels, variant.classes(), split)
}

/// Writes `ds` in the binary layout of `variant` (pixels rounded to bytes;
/// CIFAR-100 coarse labels are written as 0).
pub fn write_cifar(path: &Path, ds: &Dataset, variant: Variant) -> Result<()> {
    if ds.geometry() != [3, 32, 32] {
        return Err(Error::Data(format!("CIFAR records are 3x32x32, got {:?}", ds.geometry())));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for i in 0..ds.len() {
        if variant == Variant::Cifar100 {
            out.push(0);
        }
        out.push(u8::try_from(ds.labels[i]).map_err(|_| Error::Data(format!("label {} exceeds a byte", ds.labels[i])))?);
        out.extend(ds.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Class-conditional images: each class has a colour tint and an oriented
/// sinusoidal texture; samples add a random phase and pixel noise. Class
/// templates depend only on `classes` and `geometry`, so datasets drawn with
/// different seeds share them.
pub fn synthetic_dataset(seed: u64, n: usize, classes: usize, geometry: [usize; 3], split: Split) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::Data(format!("need n ≥ classes ≥ 2, got n={n}, classes={classes}")));
    }
    let [c, h, w] = geometry;
    let tau = std::f64::consts::TAU;
    let mut trng = Rng::new(0x5EED_C1A5);
    let templates: Vec<(Vec<f64>, f64, f64)> = (0..classes)
        .map(|k| {
            let hue = tau * k as f64 / classes as f64;
            let tint = (0..c).map(|ch| 0.12 * (hue + ch as f64 * tau / 3.0).cos()).collect();
            (tint, trng.uniform(0.5, 3.0), trng.uniform(-3.0, 3.0))
        })
        .collect();

    let mut rng = Rng::new(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let mut pixels = Vec::with_capacity(n * c * h * w);
    for &label in &labels {
        let (tint, fx, fy) = &templates[label];
        let phase = rng.uniform(0.0, tau);
        for t in tint {
            for y in 0..h {
                for x in 0..w {
                    let arg = tau * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase;
                    let v = 0.5 + t + 0.2 * arg.sin() + 0.1 * rng.normal();
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], pixels)?, labels, classes, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub crop: bool,
    pub padding: usize,
    pub flip: bool,
    pub flip_prob: f64,
    pub normalize: bool,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop: true,
            padding: 4,
            flip: true,
            flip_prob: 0.5,
            normalize: true,
            mean: CIFAR_MEAN.to_vec(),
            std: CIFAR_STD.to_vec(),
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            crop: false,
            flip: false,
            normalize: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.normalize && (self.mean.len() != channels || self.std.len() != channels) {
            return Err(Error::Config(format!(
                "normalization needs {channels} means and stds, got {} and {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("std must be positive and flip_prob in [0, 1]".into()));
        }
        Ok(())
    }

    /// Random crop and flip (training only), then normalization.
    fn apply(&self, img: &[f32], geometry: [usize; 3], train: bool, rng: &mut Rng, out: &mut Vec<f32>) {
        let [c, h, w] = geometry;
        let (dy, dx) = if train && self.crop {
            (rng.below(2 * self.padding + 1), rng.below(2 * self.padding + 1))
        } else {
            (self.padding, self.padding)
        };
        let pad = if train && self.crop { self.padding } else { dy };
        let flip = train && self.flip && rng.bernoulli(self.flip_prob);
        for ch in 0..c {
            let (m, s) = if self.normalize { (self.mean[ch], self.std[ch]) } else { (0.0, 1.0) };
            for y in 0..h {
                for x in 0..w {
                    // output (y, x) reads padded input (y + dy, x' + dx)
                    let xs = if flip { w - 1 - x } else { x };
                    let sy = (y + dy) as isize - pad as isize;
                    let sx = (xs + dx) as isize - pad as isize;
                    let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        0.0
                    } else {
                        img[(ch * h + sy as usize) * w + sx as usize]
                    };
                    out.push((v - m) / s);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Iterator over one epoch. Shuffling and augmentation use two PRNG streams
/// derived from `(seed, epoch)`, so results do not depend on how batches
/// are consumed.
pub struct Batches<'a, T> {
    ds: &'a Dataset,
    policy: &'a AugmentPolicy,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    train: bool,
    rng: Rng,
    _t: std::marker::PhantomData<T>,
}

pub fn batches<'a, T: Scalar>(
    ds: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    policy: &'a AugmentPolicy,
    train: bool,
) -> Batches<'a, T> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if train {
        Rng::stream(seed, 2 * epoch as u64).shuffle(&mut order);
    }
    Batches {
        ds,
        policy,
        order,
        pos: 0,
        batch_size: batch_size.max(1),
        train,
        rng: Rng::stream(seed, 2 * epoch as u64 + 1),
        _t: std::marker::PhantomData,
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let geometry = self.ds.geometry();
        let mut buf = Vec::with_capacity(indices.len() * geometry.iter().product::<usize>());
        for &i in &indices {
            self.policy
                .apply(self.ds.image(i), geometry, self.train, &mut self.rng, &mut buf);
        }
        let [c, h, w] = geometry;
        let x = Tensor::new(vec![indices.len(), c, h, w], buf.into_iter().map(|v| T::of(v as f64)).collect())
            .expect("batch geometry");
        Some(Batch {
            x,
            labels: indices.iter().map(|&i| self.ds.labels[i]).collect(),
            indices,
        })
    }
}

/// Where a run's images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: Source,
    pub path: Option<PathBuf>,
    /// Synthetic: number of samples; CIFAR: keep only the first `n` training images.
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
}

impl DataConfig {
    /// Train and test splits for a model with the given input geometry and
    /// class count. Synthetic data is seeded from `seed`.
    pub fn load(&self, seed: u64, geometry: [usize; 3], classes: usize) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.source {
            Source::Synthetic => {
                let n = self.train_size.unwrap_or(512);
                let m = self.test_size.unwrap_or(256);
                (
                    synthetic_dataset(seed, n, classes, geometry, Split::Train)?,
                    synthetic_dataset(seed ^ 0x7E57, m, classes, geometry, Split::Test)?,
                )
            }
            Source::Cifar10 | Source::Cifar100 => {
                let variant = if self.source == Source::Cifar10 { Variant::Cifar10 } else { Variant::Cifar100 };
                let dir = self
                    .path
                    .as_deref()
                    .ok_or_else(|| Error::Config("CIFAR data needs a path (--data or KSHARE_DATA)".into()))?;
                let mut train = load_cifar(dir, variant, Split::Train)?;
                let mut test = load_cifar(dir, variant, Split::Test)?;
                if let Some(n) = self.train_size {
                    train = train.take(n)?;
                }
                if let Some(n) = self.test_size {
                    test = test.take(n)?;
                }
                (train, test)
            }
        };
        if train.geometry() != geometry || train.classes != classes {
            return Err(Error::Mismatch(vec![format!(
                "data is {:?} with {} classes, model expects {:?} with {}",
                train.geometry(),
                train.classes,
                geometry,
                classes
            )]));
        }
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Dataset {
        let images = Tensor::from_fn(&[n, 3, 32, 32], |i| (i % 256) as f32 / 255.0);
        Dataset::new(images, (0..n).map(|i| i % 10).collect(), 10, Split::Train).unwrap()
    }

    #[test]
    fn partial_last_batch() {
        let ds = ramp(10);
        let p = AugmentPolicy::none();
        let sizes: Vec<usize> = batches::<f32>(&ds, 4, 0, 0, &p, true).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, [4, 4, 2]);
    }

    #[test]
    fn eval_order_is_sequential_and_unaugmented() {
        let ds = ramp(5);
        let p = AugmentPolicy {
            normalize: false,
            ..AugmentPolicy::default()
        };
        let b: Vec<Batch<f32>> = batches(&ds, 5, 3, 1, &p, false).collect();
        assert_eq!(b[0].indices, [0, 1, 2, 3, 4]);
        assert_eq!(b[0].x.data(), ds.images.data());
    }

    #[test]
    fn crop_shifts_content() {
        let ds = ramp(1);
        let p = AugmentPolicy {
            flip: false,
            normalize: false,
            ..AugmentPolicy::default()
        };
        let mut any_shift = false;
        for epoch in 0..8 {
            let b: Batch<f32> = batches(&ds, 1, 1, epoch, &p, true).next().unwrap();
            any_shift |= b.x.data() != ds.images.data();
        }
        assert!(any_shift);
    }

    #[test]
    fn rejects_bad_labels() {
        let images = Tensor::zeros(&[2, 3, 32, 32]);
        assert!(Dataset::new(images, vec![0, 10], 10, Split::Test).is_err());
    }
}

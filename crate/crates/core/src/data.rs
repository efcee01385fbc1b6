//! Datasets: CIFAR binary records, synthetic blob images, augmentation,
//! per-channel normalization and shuffled batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CROP_PAD: usize = 4;

/// One image, channel-planar, values in [0, 1] before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub label: usize,
    /// CIFAR-100 coarse label, kept so records re-encode exactly.
    pub coarse_label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    /// The first `n` images (or all of them).
    pub fn truncated(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn files(self, train: bool) -> Vec<&'static str> {
        match (self, train) {
            (CifarVariant::Cifar10, true) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar10, false) => vec!["test_batch.bin"],
            (CifarVariant::Cifar100, true) => vec!["train.bin"],
            (CifarVariant::Cifar100, false) => vec!["test.bin"],
        }
    }
}

pub fn parse_cifar_record(bytes: &[u8], variant: CifarVariant) -> Result<LabeledImage> {
    if bytes.len() != variant.record_len() {
        return Err(Error::Data(format!(
            "CIFAR record must be {} bytes, got {}",
            variant.record_len(),
            bytes.len()
        )));
    }
    let (coarse_label, label, body) = match variant {
        CifarVariant::Cifar10 => (None, bytes[0] as usize, &bytes[1..]),
        CifarVariant::Cifar100 => {
            let coarse = bytes[0] as usize;
            if coarse >= 20 {
                return Err(Error::Data(format!("coarse label {coarse} out of range")));
            }
            (Some(coarse), bytes[1] as usize, &bytes[2..])
        }
    };
    if label >= variant.num_classes() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            variant.num_classes()
        )));
    }
    Ok(LabeledImage {
        pixels: body.iter().map(|&b| b as f32 / 255.0).collect(),
        label,
        coarse_label,
    })
}

pub fn encode_cifar_record(img: &LabeledImage, variant: CifarVariant) -> Result<Vec<u8>> {
    if img.pixels.len() != CIFAR_PIXELS {
        return Err(Error::Data(format!(
            "image has {} values, expected {CIFAR_PIXELS}",
            img.pixels.len()
        )));
    }
    if img.label >= variant.num_classes() {
        return Err(Error::Data(format!("label {} out of range", img.label)));
    }
    let mut out = Vec::with_capacity(variant.record_len());
    if variant == CifarVariant::Cifar100 {
        out.push(img.coarse_label.unwrap_or(0) as u8);
    }
    out.push(img.label as u8);
    out.extend(img.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Reads the train or test split from a directory holding the binary
/// distribution files.
pub fn load_cifar(dir: &Path, variant: CifarVariant, train: bool, limit: Option<usize>) -> Result<Dataset> {
    let rec = variant.record_len();
    let mut images = Vec::new();
    for name in variant.files(train) {
        let path: PathBuf = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % rec != 0 {
            return Err(Error::Data(format!(
                "{}: {} bytes is not a whole number of {rec}-byte records",
                path.display(),
                bytes.len()
            )));
        }
        for chunk in bytes.chunks_exact(rec) {
            if limit.is_some_and(|l| images.len() >= l) {
                break;
            }
            images.push(parse_cifar_record(chunk, variant)?);
        }
    }
    Ok(Dataset {
        shape: [3, CIFAR_SIDE, CIFAR_SIDE],
        num_classes: variant.num_classes(),
        images,
    })
}

/// Zero-pads by [`CROP_PAD`] on each side, crops an H×W window at offset
/// `(dy, dx)` of the padded image and optionally mirrors it horizontally.
pub fn augment_with(img: &LabeledImage, shape: [usize; 3], dy: usize, dx: usize, flip: bool) -> LabeledImage {
    let [c, h, w] = shape;
    let mut pixels = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (ox + dx) as isize - CROP_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                pixels[(ch * h + y) * w + x] = img.pixels[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    LabeledImage {
        pixels,
        label: img.label,
        coarse_label: img.coarse_label,
    }
}

/// Random crop from the padded image plus a mirror flip with probability 1/2.
pub fn augment_train(img: &LabeledImage, shape: [usize; 3], rng: &mut impl Rng) -> LabeledImage {
    let dy = rng.gen_range(0..=2 * CROP_PAD);
    let dx = rng.gen_range(0..=2 * CROP_PAD);
    let flip = rng.gen_bool(0.5);
    augment_with(img, shape, dy, dx, flip)
}

/// Scale/aspect random crop resized back to the input size (nearest
/// neighbour). Large-image pipelines are out of scope; kept for completeness.
#[cfg(feature = "imagenet-aug")]
pub fn augment_scale_aspect(img: &LabeledImage, shape: [usize; 3], rng: &mut impl Rng) -> LabeledImage {
    let [c, h, w] = shape;
    let area = (h * w) as f64 * rng.gen_range(0.08..=1.0);
    let aspect = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln()).exp();
    let ch_ = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let cw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - ch_);
    let x0 = rng.gen_range(0..=w - cw);
    let flip = rng.gen_bool(0.5);
    let mut pixels = vec![0.0f32; c * h * w];
    for k in 0..c {
        for y in 0..h {
            let sy = y0 + y * ch_ / h;
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = x0 + ox * cw / w;
                pixels[(k * h + y) * w + x] = img.pixels[(k * h + sy) * w + sx];
            }
        }
    }
    LabeledImage { pixels, ..img.clone() }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of a (training) split.
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty dataset".into()));
        }
        let [c, h, w] = data.shape;
        let plane = h * w;
        let count = (data.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in &data.images {
            for k in 0..c {
                for &v in &img.pixels[k * plane..(k + 1) * plane] {
                    mean[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
            }
        }
        let mut std = vec![0.0; c];
        for k in 0..c {
            mean[k] /= count;
            std[k] = (sq[k] / count - mean[k] * mean[k]).max(0.0).sqrt();
            if std[k].is_nan() || std[k] <= 0.0 {
                return Err(Error::Data(format!("channel {k} has zero variance")));
            }
        }
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, pixels: &mut [f32]) {
        let plane = pixels.len() / self.mean.len();
        for (k, chunk) in pixels.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[k], self.std[k]);
            for v in chunk {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }

    pub fn invert(&self, pixels: &mut [f32]) {
        let plane = pixels.len() / self.mean.len();
        for (k, chunk) in pixels.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[k], self.std[k]);
            for v in chunk {
                *v = (*v as f64 * s + m) as f32;
            }
        }
    }
}

/// Class-conditional blob images: each class has a fixed set of coloured
/// Gaussian blobs; samples jitter the blob positions and add pixel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub size: (usize, usize),
    pub noise: f64,
    pub seed: u64,
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: [f64; 3],
}

impl SyntheticSpec {
    pub fn new(classes: usize, size: (usize, usize), seed: u64) -> Self {
        SyntheticSpec {
            classes,
            size,
            noise: 0.1,
            seed,
        }
    }

    fn templates(&self) -> Vec<Vec<Blob>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (h, w) = (self.size.0 as f64, self.size.1 as f64);
        (0..self.classes)
            .map(|_| {
                (0..2)
                    .map(|_| Blob {
                        cy: rng.gen_range(0.2..0.8) * h,
                        cx: rng.gen_range(0.2..0.8) * w,
                        sigma: rng.gen_range(0.1..0.25) * h.min(w),
                        color: [rng.gen(), rng.gen(), rng.gen()],
                    })
                    .collect()
            })
            .collect()
    }

    /// `per_class` images per class, labels interleaved `0, 1, .., M−1, 0, ..`.
    /// `stream` selects an independent sample sequence over the same classes.
    pub fn generate(&self, per_class: usize, stream: u64) -> Result<Dataset> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        let (h, w) = self.size;
        if h == 0 || w == 0 {
            return Err(Error::Config("synthetic image size must be positive".into()));
        }
        let templates = self.templates();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let noise = Normal::new(0.0, self.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let jitter = (h.min(w) as f64 / 8.0).max(1.0);
        let mut images = Vec::with_capacity(per_class * self.classes);
        for _ in 0..per_class {
            for (label, blobs) in templates.iter().enumerate() {
                let shifted: Vec<(f64, f64, f64, f64)> = blobs
                    .iter()
                    .map(|b| {
                        (
                            b.cy + rng.gen_range(-jitter..=jitter),
                            b.cx + rng.gen_range(-jitter..=jitter),
                            b.sigma,
                            rng.gen_range(0.7..1.0),
                        )
                    })
                    .collect();
                let mut pixels = vec![0.0f32; 3 * h * w];
                for y in 0..h {
                    for x in 0..w {
                        for k in 0..3 {
                            let mut v = 0.0;
                            for (b, &(cy, cx, s, amp)) in blobs.iter().zip(&shifted) {
                                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                                v += amp * b.color[k] * (-d2 / (2.0 * s * s)).exp();
                            }
                            v += noise.sample(&mut rng);
                            pixels[(k * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
                        }
                    }
                }
                images.push(LabeledImage {
                    pixels,
                    label,
                    coarse_label: None,
                });
            }
        }
        Ok(Dataset {
            shape: [3, h, w],
            num_classes: self.classes,
            images,
        })
    }
}

/// Training split of synthetic blobs.
pub fn make_synthetic_set(classes: usize, per_class: usize, size: (usize, usize), seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(classes, size, seed).generate(per_class, 0)
}

/// Index batches covering `0..n` once each. With a generator the order is
/// shuffled. A trailing batch of one sample is merged into the previous batch
/// so batch-norm always sees at least two samples.
pub fn epoch_batches(n: usize, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Stacks images into an N×C×H×W tensor, optionally augmenting and
/// normalizing each one.
pub fn make_batch<T: Scalar>(
    data: &Dataset,
    indices: &[usize],
    mut augment: Option<&mut ChaCha8Rng>,
    norm: Option<&Normalization>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [c, h, w] = data.shape;
    let mut buf = Vec::with_capacity(indices.len() * c * h * w);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = data
            .images
            .get(i)
            .ok_or_else(|| Error::Data(format!("index {i} out of range for {} images", data.len())))?;
        let mut pixels = match augment.as_deref_mut() {
            Some(rng) => augment_train(img, data.shape, rng).pixels,
            None => img.pixels.clone(),
        };
        if let Some(n) = norm {
            n.apply(&mut pixels);
        }
        buf.extend(pixels.iter().map(|&v| T::from_f64(v as f64)));
        labels.push(img.label);
    }
    Ok((Tensor::new(vec![indices.len(), c, h, w], buf)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_record_examples() {
        let zeros = vec![0u8; 3073];
        let img = parse_cifar_record(&zeros, CifarVariant::Cifar10).unwrap();
        assert_eq!(img.label, 0);
        assert!(img.pixels.iter().all(|&v| v == 0.0));

        let mut white = vec![255u8; 3073];
        white[0] = 9;
        let img = parse_cifar_record(&white, CifarVariant::Cifar10).unwrap();
        assert_eq!(img.label, 9);
        assert!(img.pixels.iter().all(|&v| v == 1.0));
        assert_eq!(encode_cifar_record(&img, CifarVariant::Cifar10).unwrap(), white);

        assert!(parse_cifar_record(&zeros[..3072], CifarVariant::Cifar10).is_err());
        let mut bad = zeros.clone();
        bad[0] = 10;
        assert!(parse_cifar_record(&bad, CifarVariant::Cifar10).is_err());
    }

    #[test]
    fn cifar100_keeps_both_labels() {
        let mut rec: Vec<u8> = (0..3074).map(|i| (i * 7 % 256) as u8).collect();
        rec[0] = 19;
        rec[1] = 99;
        let img = parse_cifar_record(&rec, CifarVariant::Cifar100).unwrap();
        assert_eq!((img.label, img.coarse_label), (99, Some(19)));
        assert_eq!(encode_cifar_record(&img, CifarVariant::Cifar100).unwrap(), rec);
    }

    #[test]
    fn centre_crop_is_identity_and_corner_crop_pads() {
        let shape = [3, 32, 32];
        let img = LabeledImage {
            pixels: (0..CIFAR_PIXELS).map(|i| (i % 255 + 1) as f32 / 255.0).collect(),
            label: 3,
            coarse_label: None,
        };
        assert_eq!(augment_with(&img, shape, 4, 4, false), img);
        let tl = augment_with(&img, shape, 0, 0, false);
        for k in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = tl.pixels[(k * 32 + y) * 32 + x];
                    assert_eq!(v == 0.0, y < 4 || x < 4, "({k},{y},{x})");
                }
            }
        }
        let flipped = augment_with(&img, shape, 4, 4, true);
        assert_eq!(flipped.pixels[0], img.pixels[31]);
        assert_eq!(tl.label, 3);
    }

    #[test]
    fn augmentation_is_seeded() {
        let data = make_synthetic_set(2, 2, (8, 8), 1).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            data.images
                .iter()
                .map(|i| augment_train(i, data.shape, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn synthetic_examples() {
        let d = make_synthetic_set(2, 1, (8, 8), 3).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), vec![0, 1]);
        assert_eq!(d, make_synthetic_set(2, 1, (8, 8), 3).unwrap());
        assert!(make_synthetic_set(1, 1, (8, 8), 3).is_err());
        let other = SyntheticSpec::new(2, (8, 8), 3).generate(1, 1).unwrap();
        assert_ne!(d, other);
    }

    #[test]
    fn normalization_round_trip() {
        let d = make_synthetic_set(3, 4, (6, 6), 9).unwrap();
        let n = Normalization::fit(&d).unwrap();
        assert!(n.std.iter().all(|&s| s > 0.0));
        let mut px = d.images[0].pixels.clone();
        n.apply(&mut px);
        n.invert(&mut px);
        for (a, b) in px.iter().zip(&d.images[0].pixels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = epoch_batches(21, 4, Some(&mut rng));
        let mut all: Vec<usize> = batches.concat();
        assert!(batches.iter().all(|b| b.len() >= 2));
        all.sort_unstable();
        assert_eq!(all, (0..21).collect::<Vec<_>>());
        assert_eq!(epoch_batches(5, 2, None), vec![vec![0, 1], vec![2, 3, 4]]);
    }
}

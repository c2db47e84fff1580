//! Datasets: seeded synthetic blob images and a loader for CIFAR-style
//! binary records (one label byte followed by `C*H*W` pixel bytes).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Per-channel constants already applied to `images`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok((
            self.images.select_axis0(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// The leading `ceil(fraction * N)` examples.
    pub fn head_fraction(&self, fraction: f64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "data fraction {fraction} outside (0, 1]"
            )));
        }
        let n = ((fraction * self.len() as f64).ceil() as usize).clamp(1, self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx)?;
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
            mean: self.mean.clone(),
            std: self.std.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Format(format!(
                "label {l} out of range for {} classes",
                self.classes
            )));
        }
        if self.images.dim0() != self.labels.len() {
            return Err(Error::Format("image and label counts differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub extent: usize,
    pub channels: usize,
    pub blobs_per_class: usize,
    pub noise: f64,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            extent: 16,
            channels: 3,
            blobs_per_class: 2,
            noise: 0.3,
            train: 512,
            val: 256,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.classes < 2 {
            p.push("data.classes must be >= 2".into());
        }
        if self.extent < 8 {
            p.push("data.extent must be >= 8".into());
        }
        if self.channels == 0 || self.blobs_per_class == 0 {
            p.push("data.channels and data.blobs_per_class must be >= 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            p.push("data.noise must be a finite value >= 0".into());
        }
        if self.train < self.classes {
            p.push("data.train must hold at least one example per class".into());
        }
        if self.val == 0 {
            p.push("data.val must be >= 1".into());
        }
        p
    }
}

/// One smooth template per class, each a sum of Gaussian blobs with its
/// own position, width and per-channel amplitude.
fn class_templates(spec: &SyntheticSpec, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let (c, e) = (spec.channels, spec.extent);
    (0..spec.classes)
        .map(|_| {
            let mut img = vec![0.0; c * e * e];
            for _ in 0..spec.blobs_per_class {
                let cy = rng.random_range(0.15..0.85) * e as f64;
                let cx = rng.random_range(0.15..0.85) * e as f64;
                let sigma = rng.random_range(0.08..0.25) * e as f64;
                let amp: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                for ch in 0..c {
                    for y in 0..e {
                        for x in 0..e {
                            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(ch * e + y) * e + x] +=
                                amp[ch] * (-r2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            img
        })
        .collect()
}

fn sample(templates: &[Vec<f64>], spec: &SyntheticSpec, n: usize, rng: &mut SeededRng) -> Dataset {
    let (c, e) = (spec.channels, spec.extent);
    let per = c * e * e;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // cycle through classes so every class is present
        let label = if i < spec.classes {
            i
        } else {
            rng.random_range(0..spec.classes)
        };
        labels.push(label);
        for &t in &templates[label] {
            let z: f64 = StandardNormal.sample(rng);
            data.push(t + spec.noise * z);
        }
    }
    Dataset {
        images: Tensor::new(vec![n, c, e, e], data).expect("synthetic extents"),
        labels,
        classes: spec.classes,
        mean: vec![0.0; c],
        std: vec![1.0; c],
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Split> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = seeded(spec.seed);
    let templates = class_templates(spec, &mut rng);
    let train = sample(&templates, spec, spec.train, &mut rng);
    let val = sample(&templates, spec, spec.val, &mut rng);
    Ok(Split { train, val })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BinaryLayout {
    pub fn record_len(&self) -> usize {
        1 + self.channels * self.height * self.width
    }
}

/// Decodes records, scales pixels to `[0, 1]` and normalizes each channel
/// once with the layout's constants.
pub fn parse_binary_images(bytes: &[u8], layout: &BinaryLayout) -> Result<Dataset> {
    let rec = layout.record_len();
    if layout.mean.len() != layout.channels || layout.std.len() != layout.channels {
        return Err(Error::Format(
            "normalization constants must have one entry per channel".into(),
        ));
    }
    if layout.std.iter().any(|&s| s <= 0.0) {
        return Err(Error::Format("normalization std must be positive".into()));
    }
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!(
            "file of {} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let plane = layout.height * layout.width;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (rec - 1));
    for r in bytes.chunks_exact(rec) {
        let label = r[0] as usize;
        if label >= layout.classes {
            return Err(Error::Format(format!(
                "label {label} out of range for {} classes",
                layout.classes
            )));
        }
        labels.push(label);
        for (i, &p) in r[1..].iter().enumerate() {
            let ch = i / plane;
            data.push((p as f64 / 255.0 - layout.mean[ch]) / layout.std[ch]);
        }
    }
    let ds = Dataset {
        images: Tensor::new(vec![n, layout.channels, layout.height, layout.width], data)?,
        labels,
        classes: layout.classes,
        mean: layout.mean.clone(),
        std: layout.std.clone(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_binary_images(path: &Path, layout: &BinaryLayout) -> Result<Dataset> {
    parse_binary_images(&std::fs::read(path)?, layout)
}

/// Mirrors an image `[C, H, W]` left to right.
pub fn flip_horizontal(img: &mut [f64], c: usize, h: usize, w: usize) {
    for row in img[..c * h * w].chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Random `H x W` crop of the image zero-padded by `pad` on every side.
pub fn random_crop(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    rng: &mut SeededRng,
) -> Vec<f64> {
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Crop-with-padding and horizontal flip applied independently to every
/// image of a training batch.
pub fn augment_batch(images: &mut Tensor, pad: usize, rng: &mut SeededRng) {
    let s = images.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    for i in 0..s[0] {
        let img = images.row_mut(i);
        let mut cropped = random_crop(img, c, h, w, pad, rng);
        if rng.random_bool(0.5) {
            flip_horizontal(&mut cropped, c, h, w);
        }
        img.copy_from_slice(&cropped);
    }
}

/// A seeded permutation of `0..n` split into batches of `size`.
pub fn shuffled_batches(n: usize, size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size.max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> BinaryLayout {
        BinaryLayout {
            channels: 1,
            height: 2,
            width: 2,
            classes: 3,
            mean: vec![0.0],
            std: vec![1.0],
        }
    }

    #[test]
    fn golden_records() {
        let bytes = [2u8, 0, 255, 51, 102, 0, 255, 255, 0, 0];
        let ds = parse_binary_images(&bytes, &layout()).unwrap();
        assert_eq!(ds.labels, vec![2, 0]);
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.images.data(), &[0.0, 1.0, 0.2, 0.4, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn loader_errors() {
        assert!(parse_binary_images(&[0u8, 1, 2], &layout()).is_err());
        assert!(parse_binary_images(&[7u8, 0, 0, 0, 0], &layout()).is_err());
    }

    #[test]
    fn half_normalization() {
        let l = BinaryLayout {
            mean: vec![0.5],
            std: vec![0.5],
            ..layout()
        };
        // 127.5 is not a byte; check the affine map on the decoded value
        let ds = parse_binary_images(&[0u8, 0, 255, 0, 255], &l).unwrap();
        assert_eq!(ds.images.data(), &[-1.0, 1.0, -1.0, 1.0]);
        assert_eq!((0.5 - l.mean[0]) / l.std[0], 0.0);
    }

    #[test]
    fn flip_is_an_involution() {
        let orig: Vec<f64> = (0..2 * 3 * 4).map(|v| v as f64).collect();
        let mut img = orig.clone();
        flip_horizontal(&mut img, 2, 3, 4);
        assert_ne!(img, orig);
        assert_eq!(img[0..4], [3.0, 2.0, 1.0, 0.0]);
        flip_horizontal(&mut img, 2, 3, 4);
        assert_eq!(img, orig);
    }

    #[test]
    fn crop_shifts_content() {
        let img: Vec<f64> = (1..=16).map(|v| v as f64).collect();
        let mut rng = seeded(3);
        for _ in 0..20 {
            let out = random_crop(&img, 1, 4, 4, 1, &mut rng);
            let kept: f64 = out.iter().filter(|&&v| v != 0.0).count() as f64;
            assert!(kept >= 9.0);
        }
        assert_eq!(random_crop(&img, 1, 4, 4, 0, &mut rng), img);
    }

    #[test]
    fn synthetic_is_deterministic_and_noise_free_classes_repeat() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        let t = &a.train;
        for i in 0..t.len() {
            let j = t.labels.iter().position(|&l| l == t.labels[i]).unwrap();
            assert_eq!(t.images.row(i), t.images.row(j));
        }
        for c in 0..spec.classes {
            assert!(t.labels.contains(&c));
        }
    }

    #[test]
    fn synthetic_validation() {
        let bad = SyntheticSpec {
            classes: 1,
            extent: 4,
            ..SyntheticSpec::default()
        };
        match generate_synthetic(&bad) {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nearest_template_probe_separates_classes() {
        // a linear probe: score each class by <x, template_c> - |template_c|^2 / 2
        let spec = SyntheticSpec::default();
        let split = generate_synthetic(&spec).unwrap();
        let mut rng = seeded(spec.seed);
        let templates = class_templates(&spec, &mut rng);
        let correct = (0..split.val.len())
            .filter(|&i| {
                let x = split.val.images.row(i);
                let pred = (0..spec.classes)
                    .max_by(|&a, &b| {
                        let s = |c: usize| {
                            let t = &templates[c];
                            x.iter().zip(t).map(|(p, q)| p * q).sum::<f64>()
                                - 0.5 * t.iter().map(|q| q * q).sum::<f64>()
                        };
                        s(a).total_cmp(&s(b))
                    })
                    .unwrap();
                pred == split.val.labels[i]
            })
            .count();
        assert!(correct as f64 / split.val.len() as f64 > 0.8);
    }

    #[test]
    fn batches_cover_everything_once() {
        let b = shuffled_batches(10, 3, &mut seeded(1));
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}

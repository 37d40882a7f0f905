//! Labeled image collections in `[S, 3, H, W]` layout, plus batching and
//! light augmentation.

mod cifar;
mod idx;
mod synthetic;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::rng::TrainRng;
use crate::tensor::Tensor;

pub use cifar::{load_cifar_binary, load_cifar_file, CifarSplit, CIFAR_RECORD_BYTES};
pub use idx::{load_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{
    synthetic_blobs, synthetic_split, SYNTHETIC_EVAL_PER_CLASS, SYNTHETIC_TRAIN_PER_CLASS,
};

pub const CHANNEL_MEAN: f32 = 0.5;
pub const CHANNEL_STD: f32 = 0.5;

/// `(x - mean) / std` for a pixel already scaled to `[0, 1]`.
pub fn normalize(unit: f32) -> f32 {
    (unit - CHANNEL_MEAN) / CHANNEL_STD
}

pub fn normalize_byte(byte: u8) -> f32 {
    normalize(f32::from(byte) / 255.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[S, 3, H, W]`, channel-normalized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        class_count: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::shape(
                "dataset",
                format!("images must be [S, 3, H, H], got {s:?}"),
            ));
        }
        if s[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                s[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Consistency(format!(
                "label {bad} outside {class_count} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    fn image_numel(&self) -> usize {
        self.images.numel() / self.len()
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let per = self.image_numel();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Batch {
            images: Tensor::from_vec(&shape, data).expect("gathered shape is consistent"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Nearest-neighbour resize of every image to `size × size`.
    pub fn resized(&self, size: usize) -> Result<Self> {
        let from = self.image_size();
        if size == from {
            return Ok(self.clone());
        }
        if size == 0 {
            return Err(Error::Config("resize target must be positive".into()));
        }
        let planes = self.len() * 3;
        let mut data = Vec::with_capacity(planes * size * size);
        for plane in self.images.data().chunks_exact(from * from) {
            for y in 0..size {
                let sy = y * from / size;
                for x in 0..size {
                    data.push(plane[sy * from + x * from / size]);
                }
            }
        }
        let images = Tensor::from_vec(&[self.len(), 3, size, size], data)?;
        Dataset::new(
            images,
            self.labels.clone(),
            self.class_count,
            self.name.clone(),
        )
    }
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Every image mirrored left to right.
    pub fn flipped(&self) -> Batch {
        let w = self.images.shape()[3];
        let mut data = self.images.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            row.reverse();
        }
        Batch {
            images: Tensor::from_vec(self.images.shape(), data).expect("same shape"),
            labels: self.labels.clone(),
        }
    }
}

/// Sample order for one epoch, in batches. The last batch may be short.
pub struct EpochIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl EpochIter<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for EpochIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.dataset.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

pub fn epoch_order(len: usize, shuffle_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut TrainRng::seed_from_u64(shuffle_seed));
    order
}

pub fn iterate_epoch(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<EpochIter<'_>> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    Ok(EpochIter {
        dataset,
        order: epoch_order(dataset.len(), shuffle_seed),
        batch_size,
        pos: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop_pad: usize,
}

/// Random horizontal flip (p = 0.5) and zero-pad-then-crop, per image.
pub fn augment(batch: &Batch, config: AugmentConfig, seed: u64) -> Result<Batch> {
    let s = batch.images.shape();
    let (planes, h, w) = (s[1], s[2], s[3]);
    if config.crop_pad >= h.min(w) {
        return Err(Error::Config(format!(
            "crop_pad {} must be smaller than the image size {}",
            config.crop_pad,
            h.min(w)
        )));
    }
    let pad = config.crop_pad as isize;
    let mut rng = TrainRng::seed_from_u64(seed);
    let per = planes * h * w;
    let mut out = vec![0.0f32; batch.images.numel()];
    for (src, dst) in batch
        .images
        .data()
        .chunks_exact(per)
        .zip(out.chunks_exact_mut(per))
    {
        let flip = config.flip && rng.gen_bool(0.5);
        let oy = rng.gen_range(0..=2 * pad) - pad;
        let ox = rng.gen_range(0..=2 * pad) - pad;
        for c in 0..planes {
            for y in 0..h {
                let sy = y as isize + oy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + ox;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let sx = if flip {
                        w - 1 - sx as usize
                    } else {
                        sx as usize
                    };
                    dst[(c * h + y) * w + x] = src[(c * h + sy as usize) * w + sx];
                }
            }
        }
    }
    Ok(Batch {
        images: Tensor::from_vec(s, out)?,
        labels: batch.labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        synthetic_blobs(2, 5, 8, 1)
    }

    #[test]
    fn batches_cover_epoch() {
        let d = small();
        let sizes: Vec<usize> = iterate_epoch(&d, 4, 9).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut labels: Vec<usize> = iterate_epoch(&d, 4, 9)
            .unwrap()
            .flat_map(|b| b.labels)
            .collect();
        let mut expect = d.labels.clone();
        labels.sort();
        expect.sort();
        assert_eq!(labels, expect);
        assert!(iterate_epoch(&d, 0, 9).is_err());
    }

    #[test]
    fn same_seed_same_order() {
        let d = small();
        let a: Vec<_> = iterate_epoch(&d, 3, 5).unwrap().collect();
        let b: Vec<_> = iterate_epoch(&d, 3, 5).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn augment_identity_and_flip() {
        let d = small();
        let batch = d.gather(&[0, 1, 2]);
        assert_eq!(augment(&batch, AugmentConfig::default(), 3).unwrap(), batch);
        assert_eq!(batch.flipped().flipped(), batch);
        let cfg = AugmentConfig {
            flip: true,
            crop_pad: 2,
        };
        assert_eq!(
            augment(&batch, cfg, 11).unwrap(),
            augment(&batch, cfg, 11).unwrap()
        );
        assert!(augment(
            &batch,
            AugmentConfig {
                flip: false,
                crop_pad: 8
            },
            0
        )
        .is_err());
    }

    #[test]
    fn nearest_resize() {
        let d = small();
        let r = d.resized(16).unwrap();
        assert_eq!(r.images.shape(), &[10, 3, 16, 16]);
        // pixel (2y, 2x) of the upscaled image is pixel (y, x) of the source
        assert_eq!(r.images.data()[2 * 16 + 4], d.images.data()[8 + 2]);
    }

    #[test]
    fn normalized_range() {
        assert_eq!(normalize_byte(0), -1.0);
        assert_eq!(normalize_byte(255), 1.0);
    }
}

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};

use crate::rng::TrainRng;
use crate::tensor::Tensor;

use super::{normalize, Dataset};

/// Class-specific location and colour. Independent of the seed, so datasets
/// drawn with different seeds share one distribution.
fn class_style(class: usize, classes: usize, size: usize) -> ([f64; 2], [f64; 3]) {
    let angle = 2.0 * PI * class as f64 / classes as f64;
    let radius = 0.3 * size as f64;
    let mid = (size as f64 - 1.0) / 2.0;
    let centre = [mid + radius * angle.sin(), mid + radius * angle.cos()];
    let colour = [
        0.5 + 0.5 * angle.cos(),
        0.5 + 0.5 * (angle + 2.0 * PI / 3.0).cos(),
        0.5 + 0.5 * (angle + 4.0 * PI / 3.0).cos(),
    ];
    (centre, colour)
}

/// `classes × per_class` images of one Gaussian blob each on a noisy
/// background. Labels cycle `0, 1, .., classes-1, 0, ..`.
pub fn synthetic_blobs(classes: usize, per_class: usize, size: usize, seed: u64) -> Dataset {
    let classes = classes.max(1);
    let per_class = per_class.max(1);
    let mut rng = TrainRng::seed_from_u64(seed);
    let total = classes * per_class;
    let sigma = size as f64 / 8.0;
    let jitter = size as f64 / 16.0;
    let mut data = Vec::with_capacity(total * 3 * size * size);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % classes;
        let (centre, colour) = class_style(class, classes, size);
        let cy = centre[0] + rng.gen_range(-jitter..=jitter);
        let cx = centre[1] + rng.gen_range(-jitter..=jitter);
        let mut blob = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                blob[y * size + x] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        for &c in &colour {
            for &b in &blob {
                let noise: f64 = rng.gen_range(0.0..0.25);
                let v = (noise + b * c * 0.75).clamp(0.0, 1.0);
                data.push(normalize(v as f32));
            }
        }
        labels.push(class);
    }
    let images =
        Tensor::from_vec(&[total, 3, size, size], data).expect("shape matches generated data");
    Dataset::new(
        images,
        labels,
        classes,
        format!("blobs-{classes}x{per_class}-{size}px-seed{seed}"),
    )
    .expect("labels are below the class count")
}

pub const SYNTHETIC_TRAIN_PER_CLASS: usize = 200;
pub const SYNTHETIC_EVAL_PER_CLASS: usize = 30;

/// Default train and held-out eval sets; the eval set uses `seed + 1`.
pub fn synthetic_split(classes: usize, size: usize, seed: u64) -> (Dataset, Dataset) {
    (
        synthetic_blobs(classes, SYNTHETIC_TRAIN_PER_CLASS, size, seed),
        synthetic_blobs(
            classes,
            SYNTHETIC_EVAL_PER_CLASS,
            size,
            seed.wrapping_add(1),
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checksum(d: &Dataset) -> u64 {
        d.images
            .data()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
                (h ^ u64::from(v.to_bits())).wrapping_mul(0x100_0000_01b3)
            })
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthetic_blobs(10, 100, 32, 7);
        assert_eq!(a.len(), 1000);
        assert_eq!(a.images.shape(), &[1000, 3, 32, 32]);
        assert_eq!(checksum(&a), checksum(&synthetic_blobs(10, 100, 32, 7)));
        assert_ne!(checksum(&a), checksum(&synthetic_blobs(10, 100, 32, 8)));
    }

    #[test]
    fn pixels_in_normalized_range() {
        let d = synthetic_blobs(4, 3, 16, 0);
        assert!(d.images.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}

//! Seeded toy datasets for smoke runs and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datapipe::{normalize, ImageBuffer, NormStats, NUM_CLASSES};
use crate::dataset::InMemoryDataset;
use crate::error::Result;
use crate::rng::stream_seed;
use crate::tensor::{Real, Tensor};

/// Per-class sample counts that add up to `total`, earlier classes taking
/// the remainder.
pub fn even_counts(total: usize, classes: usize) -> Vec<usize> {
    (0..classes).map(|j| total / classes + usize::from(j < total % classes)).collect()
}

const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [220, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [230, 210, 40],
    [200, 60, 210],
    [40, 210, 220],
    [240, 240, 240],
];

fn inside(class: usize, dy: f64, dx: f64, r: f64) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    match class {
        0 => dy * dy + dx * dx <= r * r,
        1 => ay <= r * 0.8 && ax <= r * 0.8,
        2 => dy <= r * 0.7 && dy >= -r && ax <= (dy + r) * 0.6,
        3 => (ay <= r * 0.3 && ax <= r) || (ax <= r * 0.3 && ay <= r),
        4 => {
            let d = (dy * dy + dx * dx).sqrt();
            d <= r && d >= r * 0.55
        }
        5 => ay <= r * 0.35 && ax <= r,
        _ => ay + ax <= r,
    }
}

/// One image of `class`: a colored shape with jittered size, position and
/// tint on a noisy dark background.
pub fn shape_image(class: usize, side: usize, rng: &mut impl Rng) -> ImageBuffer {
    let s = side as f64;
    let r = rng.random_range(0.18..0.32) * s;
    let cy = rng.random_range(0.35..0.65) * s;
    let cx = rng.random_range(0.35..0.65) * s;
    let tint: Vec<i32> = (0..3).map(|_| rng.random_range(-30..=30)).collect();
    let bg: [u8; 3] = [rng.random_range(0..50), rng.random_range(0..50), rng.random_range(0..50)];
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let on = inside(class, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r);
            for c in 0..3 {
                let base = if on {
                    (PALETTE[class][c] as i32 + tint[c]).clamp(0, 255)
                } else {
                    bg[c] as i32
                };
                let noise = rng.random_range(-12..=12);
                data.push((base + noise).clamp(0, 255) as u8);
            }
        }
    }
    ImageBuffer::new(side, side, data).expect("consistent buffer size")
}

/// Labelled shape images; ids are `{prefix}_{index}`.
pub fn shape_images(total: usize, side: usize, seed: u64, prefix: &str) -> Vec<(String, usize, ImageBuffer)> {
    let mut out = Vec::with_capacity(total);
    for (class, n) in even_counts(total, NUM_CLASSES).into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, prefix, class as u64));
        for _ in 0..n {
            let id = format!("{prefix}_{:05}", out.len());
            out.push((id, class, shape_image(class, side, &mut rng)));
        }
    }
    out
}

/// Train and test shape datasets normalized with the training statistics.
pub struct ShapeData {
    pub train: InMemoryDataset,
    pub test: InMemoryDataset,
    pub norm: NormStats,
}

pub fn shape_datasets(n_train: usize, n_test: usize, side: usize, seed: u64) -> Result<ShapeData> {
    let train = shape_images(n_train, side, seed, "train");
    let test = shape_images(n_test, side, seed, "test");
    let norm = NormStats::from_images(train.iter().map(|t| &t.2));
    let build = |items: Vec<(String, usize, ImageBuffer)>| -> Result<InMemoryDataset> {
        let imgs: Vec<ImageBuffer> = items.iter().map(|t| t.2.clone()).collect();
        let x = normalize(&imgs, &norm)?;
        InMemoryDataset::new(
            items.iter().map(|t| t.0.clone()).collect(),
            items.iter().map(|t| t.1).collect(),
            x,
        )
    };
    Ok(ShapeData {
        train: build(train)?,
        test: build(test)?,
        norm,
    })
}

/// Isotropic 2-D Gaussian clusters with means evenly spaced on a circle.
pub fn gaussian_clusters(classes: usize, per_class: usize, radius: f64, sigma: f64, seed: u64) -> Result<InMemoryDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "clusters", 0));
    let noise = Normal::new(0.0, sigma).map_err(|e| crate::Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for j in 0..classes {
            let a = std::f64::consts::TAU * j as f64 / classes as f64;
            data.push((radius * a.cos() + noise.sample(&mut rng)) as Real);
            data.push((radius * a.sin() + noise.sample(&mut rng)) as Real);
            labels.push(j);
        }
    }
    let n = labels.len();
    let ids = (0..n).map(|i| format!("g{i}")).collect();
    InMemoryDataset::new(ids, labels, Tensor::new(&[n, 2], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;

    #[test]
    fn counts_split_evenly() {
        assert_eq!(even_counts(600, 7), vec![86, 86, 86, 86, 86, 85, 85]);
        assert_eq!(even_counts(140, 7), vec![20; 7]);
    }

    #[test]
    fn shape_data_is_deterministic() {
        let a = shape_images(14, 16, 3, "train");
        let b = shape_images(14, 16, 3, "train");
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|t| t.1 == 6).count(), 2);
        let d = shape_datasets(14, 7, 16, 3).unwrap();
        assert_eq!(d.train.sample_shape(), &[3, 16, 16]);
        assert_eq!(d.test.len(), 7);
    }

    #[test]
    fn clusters_have_expected_layout() {
        let d = gaussian_clusters(7, 10, 4.0, 0.5, 1).unwrap();
        assert_eq!(d.len(), 70);
        assert_eq!(d.sample_shape(), &[2]);
        assert_eq!(d.label(8), 1);
    }
}
